#include "pioner/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "pioner/binary_io.hpp"
#include "pioner/gap.hpp"
#include "pioner/hash.hpp"

namespace pioner {

// ---------------------------------------------------------------------------
// metadata and checkpoint archive

json TrainMeta::to_json() const {
    return json{{"corpus_id", corpus_id},       {"corpus_size", corpus_size}, {"epochs", epochs},
                {"lr", lr},                     {"batch_size", batch_size},   {"weight_decay", weight_decay},
                {"seed", seed},                 {"sigma2", sigma2},           {"adapter", adapter},
                {"steps", steps},               {"final_loss", final_loss},   {"epoch_losses", epoch_losses}};
}

TrainMeta TrainMeta::from_json(const json& j) {
    TrainMeta m;
    m.corpus_id = j.value("corpus_id", "");
    m.corpus_size = j.value("corpus_size", std::size_t{0});
    m.epochs = j.value("epochs", 0);
    m.lr = j.value("lr", 0.0);
    m.batch_size = j.value("batch_size", 0);
    m.weight_decay = j.value("weight_decay", 0.0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.sigma2 = j.value("sigma2", 0.0);
    m.adapter = j.value("adapter", "");
    m.steps = j.value("steps", std::size_t{0});
    m.final_loss = j.value("final_loss", 0.0);
    m.epoch_losses = j.value("epoch_losses", std::vector<double>{});
    return m;
}

void save_checkpoint(const DecoderCheckpoint& ckpt, const std::filesystem::path& path) {
    json header{{"format", 1},
                {"shape", ckpt.model.shape().to_json()},
                {"tokenizer", ckpt.tokenizer.to_json()},
                {"mitigation_mode", std::string(to_string(ckpt.mitigation))},
                {"train_meta", ckpt.meta.to_json()}};
    std::string text = header.dump();
    binary::Writer w;
    w.bytes(kCheckpointMagic);
    w.str(text);
    w.u64(ckpt.model.param_count());
    for (double p : ckpt.model.params()) w.f64(p);
    binary::write_file(path, w.buffer());
}

DecoderCheckpoint load_checkpoint(const std::filesystem::path& path) {
    auto bytes = binary::read_file(path);
    binary::Reader r(bytes);
    if (bytes.size() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic)
        throw FormatError("bad checkpoint magic in '" + path.string() + "'");
    DecoderCheckpoint ckpt;
    json header;
    try {
        header = json::parse(r.str());
        if (header.at("format").get<int>() != 1) throw FormatError("unsupported checkpoint format");
        ckpt.tokenizer = Tokenizer::from_json(header.at("tokenizer"));
        ckpt.mitigation = gap_mode_from_string(header.at("mitigation_mode").get<std::string>());
        ckpt.meta = TrainMeta::from_json(header.at("train_meta"));
    } catch (const json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
    } catch (const ValidationError& e) {
        throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
    }
    const std::uint64_t n = r.u64();
    if (r.remaining() != n * 8) throw FormatError("checkpoint payload size mismatch");
    std::vector<double> params(n);
    for (double& p : params) p = r.f64();
    DecoderShape shape;
    try {
        shape = DecoderShape::from_json(header.at("shape"));
    } catch (const json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint shape: ") + e.what());
    }
    if (shape.vocab != ckpt.tokenizer.vocab_size()) throw FormatError("checkpoint vocab does not match tokenizer");
    try {
        ckpt.model = PrefixDecoder(shape, std::move(params));
    } catch (const ValidationError& e) {
        throw FormatError(std::string("invalid checkpoint shape: ") + e.what());
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// training

TrainSpec TrainSpec::from_config(const Config& cfg, std::vector<std::string> corpus) {
    TrainSpec s;
    s.corpus = std::move(corpus);
    s.epochs = cfg.train.epochs;
    s.lr = cfg.train.lr;
    s.weight_decay = cfg.train.weight_decay;
    s.batch_size = cfg.train.batch;
    s.mitigation = cfg.gap.mode;
    s.sigma2 = cfg.gap.sigma2;
    s.seed = cfg.train.seed;
    s.workers = cfg.train.workers;
    s.deterministic = cfg.train.deterministic;
    s.d_model = cfg.decoder.d_model;
    s.n_layer = cfg.decoder.n_layer;
    s.n_head = cfg.decoder.n_head;
    s.max_len = cfg.decoder.max_len;
    s.max_vocab = cfg.decoder.max_vocab;
    return s;
}

namespace {

struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    std::size_t t = 0;

    void step(std::vector<double>& params, const std::vector<double>& grad, double lr, double weight_decay) {
        if (m.empty()) {
            m.assign(params.size(), 0.0);
            v.assign(params.size(), 0.0);
        }
        ++t;
        const double c1 = 1.0 - std::pow(beta1, double(t));
        const double c2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] -= lr * weight_decay * params[i];
            m[i] = beta1 * m[i] + (1 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

} // namespace

DecoderCheckpoint train(const TrainSpec& spec, const BackboneAdapter& adapter, TrainLog* log,
                        const std::function<void(const TrainProgress&)>& on_step) {
    if (spec.corpus.empty()) throw TrainError("training corpus is empty");
    if (spec.epochs < 1) throw TrainError("epochs must be >= 1");
    if (!(spec.lr > 0)) throw TrainError("learning rate must be > 0");
    if (spec.batch_size < 1) throw TrainError("batch size must be >= 1");
    if (spec.max_len < 1) throw TrainError("max_len must be >= 1");
    if (spec.mitigation == GapMode::noise && !(spec.sigma2 >= 0)) throw TrainError("noise variance must be >= 0");
    if (!adapter.capabilities().has_text_encoder)
        throw CapabilityError("backbone '" + adapter.name() + "' has no text encoder");

    DecoderCheckpoint ckpt;
    ckpt.tokenizer = Tokenizer::train(spec.corpus, spec.max_vocab);
    ckpt.mitigation = spec.mitigation;
    DecoderShape shape{ckpt.tokenizer.vocab_size(), spec.d_model,     spec.n_layer,
                       spec.n_head,                 spec.max_len + 1, adapter.embedding_dim()};
    ckpt.model = PrefixDecoder(shape, spec.seed);

    std::vector<Vector> embeddings;
    std::vector<std::vector<int>> tokens;
    embeddings.reserve(spec.corpus.size());
    tokens.reserve(spec.corpus.size());
    std::string joined;
    for (const auto& text : spec.corpus) {
        embeddings.push_back(l2_normalized(adapter.encode_text(text)));
        auto ids = ckpt.tokenizer.encode(text);
        if (static_cast<int>(ids.size()) > spec.max_len) ids.resize(spec.max_len);
        tokens.push_back(std::move(ids));
        joined += text;
        joined.push_back('\n');
    }

    const int workers = spec.deterministic ? 1 : std::max(1, spec.workers);
    std::vector<Perturber> perturbers;
    for (int w = 0; w < workers; ++w)
        perturbers.emplace_back(NoiseConfig{spec.sigma2, spec.seed * 1000003ull + static_cast<std::uint64_t>(w) + 1});

    auto& params = ckpt.model.params();
    std::vector<double> grad(params.size());
    std::vector<std::vector<double>> worker_grads(workers > 1 ? workers : 0, std::vector<double>(params.size()));
    AdamW opt;
    std::mt19937_64 shuffle_rng(spec.seed);
    std::vector<std::size_t> order(spec.corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::size_t step = 0;
    double last_loss = 0;
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0;
        std::size_t epoch_tokens = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += spec.batch_size) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(spec.batch_size));
            std::size_t batch_tokens = 0;
            for (std::size_t i = begin; i < end; ++i) batch_tokens += tokens[order[i]].size() + 1;
            const double weight = 1.0 / double(batch_tokens);

            auto run_range = [&](std::size_t from, std::size_t to, Perturber& noise, std::vector<double>& g) {
                double sum = 0;
                for (std::size_t i = from; i < to; ++i) {
                    const std::size_t ex = order[i];
                    Vector cond = spec.mitigation == GapMode::noise ? noise.perturb(embeddings[ex]) : embeddings[ex];
                    sum += ckpt.model.loss(cond, tokens[ex], Tokenizer::kEos, weight, &g);
                }
                return sum;
            };

            std::fill(grad.begin(), grad.end(), 0.0);
            double batch_loss = 0;
            if (workers == 1) {
                batch_loss = run_range(begin, end, perturbers[0], grad);
            } else {
                std::vector<double> sums(workers, 0.0);
                std::vector<std::thread> threads;
                const std::size_t n = end - begin;
                for (int w = 0; w < workers; ++w) {
                    const std::size_t from = begin + n * w / workers, to = begin + n * (w + 1) / workers;
                    threads.emplace_back([&, w, from, to] {
                        std::fill(worker_grads[w].begin(), worker_grads[w].end(), 0.0);
                        sums[w] = run_range(from, to, perturbers[w], worker_grads[w]);
                    });
                }
                for (auto& t : threads) t.join();
                for (int w = 0; w < workers; ++w) {
                    batch_loss += sums[w];
                    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += worker_grads[w][i];
                }
            }

            const double mean_loss = batch_loss / double(batch_tokens);
            if (!std::isfinite(mean_loss))
                throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step) + " (first caption in batch: '" +
                                 spec.corpus[order[begin]] + "')");
            opt.step(params, grad, spec.lr, spec.weight_decay);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
            last_loss = mean_loss;
            if (log) log->step_losses.push_back(mean_loss);
            if (on_step) on_step({step, epoch, mean_loss});
            ++step;
        }
        ckpt.meta.epoch_losses.push_back(epoch_loss / double(epoch_tokens));
    }

    ckpt.meta.corpus_id = spec.corpus_id.empty() ? sha256_hex(joined) : spec.corpus_id;
    ckpt.meta.corpus_size = spec.corpus.size();
    ckpt.meta.epochs = spec.epochs;
    ckpt.meta.lr = spec.lr;
    ckpt.meta.batch_size = spec.batch_size;
    ckpt.meta.weight_decay = spec.weight_decay;
    ckpt.meta.seed = spec.seed;
    ckpt.meta.sigma2 = spec.mitigation == GapMode::noise ? spec.sigma2 : 0.0;
    ckpt.meta.adapter = adapter.name();
    ckpt.meta.steps = step;
    ckpt.meta.final_loss = last_loss;
    return ckpt;
}

// ---------------------------------------------------------------------------
// generation

GenerateOptions GenerateOptions::from_config(const Config& cfg) {
    GenerateOptions o;
    o.strategy = cfg.decoder.strategy == "beam" ? Strategy::beam : Strategy::greedy;
    o.beam_size = o.strategy == Strategy::beam ? cfg.decoder.beam_size : 1;
    o.max_len = cfg.decoder.max_len;
    return o;
}

namespace {

// Token ids ordered by log-probability (descending), ties by lower id.
std::vector<int> top_tokens(const Eigen::VectorXd& lp, int k) {
    std::vector<int> ids(lp.size());
    std::iota(ids.begin(), ids.end(), 0);
    k = std::min<int>(k, static_cast<int>(ids.size()));
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
        if (lp(a) != lp(b)) return lp(a) > lp(b);
        return a < b;
    });
    ids.resize(k);
    return ids;
}

struct Hypothesis {
    std::vector<int> tokens;
    double score = 0;
    PrefixDecoder::State state;
    Eigen::VectorXd next;
    bool done = false;
};

Caption make_caption(const DecoderCheckpoint& ckpt, std::vector<int> tokens, double score) {
    Caption c;
    c.text = ckpt.tokenizer.decode(tokens);
    c.token_ids = std::move(tokens);
    c.score = score;
    c.empty = c.token_ids.empty() || c.text.empty();
    return c;
}

} // namespace

Caption generate(const Vector& prefix, const DecoderCheckpoint& ckpt, const GenerateOptions& opts) {
    const auto& model = ckpt.model;
    const int max_len = std::min(opts.max_len, model.shape().n_positions - 1);
    if (max_len < 1) throw DecodeError("max_len must be >= 1");
    const int eos = Tokenizer::kEos;

    if (opts.strategy == GenerateOptions::Strategy::greedy) {
        PrefixDecoder::State state;
        Eigen::VectorXd lp = model.start(prefix, state);
        std::vector<int> out;
        double score = 0;
        while (true) {
            int tok = top_tokens(lp, 1).front();
            score += lp(tok);
            if (tok == eos) break;
            out.push_back(tok);
            if (static_cast<int>(out.size()) >= max_len) break;
            lp = model.step(tok, state);
        }
        return make_caption(ckpt, std::move(out), score);
    }

    const int k = std::max(1, opts.beam_size);
    std::vector<Hypothesis> beams(1);
    beams[0].next = model.start(prefix, beams[0].state);
    while (true) {
        struct Candidate {
            std::size_t parent;
            int token; // -1: carry a finished hypothesis unchanged
            double score;
        };
        std::vector<Candidate> cands;
        for (std::size_t b = 0; b < beams.size(); ++b) {
            if (beams[b].done) {
                cands.push_back({b, -1, beams[b].score});
                continue;
            }
            for (int tok : top_tokens(beams[b].next, k)) cands.push_back({b, tok, beams[b].score + beams[b].next(tok)});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        if (static_cast<int>(cands.size()) > k) cands.resize(k);

        std::vector<Hypothesis> next;
        next.reserve(cands.size());
        bool all_done = true;
        for (const auto& c : cands) {
            const Hypothesis& parent = beams[c.parent];
            Hypothesis h;
            h.tokens = parent.tokens;
            h.score = c.score;
            if (c.token < 0 || c.token == eos) {
                h.done = true;
            } else {
                h.tokens.push_back(c.token);
                if (static_cast<int>(h.tokens.size()) >= max_len) {
                    h.done = true;
                } else {
                    h.state = parent.state;
                    h.next = model.step(c.token, h.state);
                }
            }
            all_done &= h.done;
            next.push_back(std::move(h));
        }
        beams = std::move(next);
        if (all_done) break;
    }
    const auto best = std::max_element(beams.begin(), beams.end(),
                                       [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
    return make_caption(ckpt, best->tokens, best->score);
}

} // namespace pioner
