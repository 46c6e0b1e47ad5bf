#include "pioner/transformer.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace pioner {

using Mat = PrefixDecoder::Mat;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

json DecoderShape::to_json() const {
    return json{{"vocab", vocab},         {"d_model", d_model},         {"n_layer", n_layer},
                {"n_head", n_head},       {"n_positions", n_positions}, {"prefix_dim", prefix_dim}};
}

DecoderShape DecoderShape::from_json(const json& j) {
    DecoderShape s;
    s.vocab = j.at("vocab").get<int>();
    s.d_model = j.at("d_model").get<int>();
    s.n_layer = j.at("n_layer").get<int>();
    s.n_head = j.at("n_head").get<int>();
    s.n_positions = j.at("n_positions").get<int>();
    s.prefix_dim = j.at("prefix_dim").get<int>();
    return s;
}

namespace {

constexpr double kLnEps = 1e-5;
const double kGeluC = std::sqrt(2.0 / M_PI);

struct LnCache {
    Mat xhat;
    VectorXd rstd;
};

template <class G, class B>
Mat layer_norm(const Mat& x, const G& g, const B& b, LnCache& c) {
    const Eigen::Index t = x.rows();
    c.xhat.resize(t, x.cols());
    c.rstd.resize(t);
    for (Eigen::Index i = 0; i < t; ++i) {
        double mu = x.row(i).mean();
        double var = (x.row(i).array() - mu).square().mean();
        c.rstd(i) = 1.0 / std::sqrt(var + kLnEps);
        c.xhat.row(i) = (x.row(i).array() - mu) * c.rstd(i);
    }
    Mat y = c.xhat.array().rowwise() * g.transpose().array();
    y.rowwise() += b.transpose();
    return y;
}

template <class G, class DG, class DB>
Mat layer_norm_backward(const Mat& dy, const G& g, const LnCache& c, DG dg, DB db) {
    dg += (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
    db += dy.colwise().sum().transpose();
    Mat dxhat = dy.array().rowwise() * g.transpose().array();
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        double m1 = dxhat.row(i).mean();
        double m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
        dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
    return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
    double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

VectorXd log_softmax(const RowVectorXd& logits) {
    double top = logits.maxCoeff();
    double lse = top + std::log((logits.array() - top).exp().sum());
    return (logits.array() - lse).transpose();
}

struct LayerCache {
    Mat x_in;
    LnCache ln1;
    Mat h1, qkv;
    std::vector<Mat> probs;
    Mat attn, x_mid;
    LnCache ln2;
    Mat h2, pre, act;
};

} // namespace

PrefixDecoder::Offsets PrefixDecoder::layout(const DecoderShape& s) {
    if (s.vocab < 1 || s.d_model < 1 || s.n_layer < 1 || s.n_head < 1 || s.n_positions < 2 || s.prefix_dim < 1)
        throw ValidationError("invalid decoder shape");
    if (s.d_model % s.n_head != 0) throw ValidationError("d_model must be divisible by n_head");
    const std::size_t d = s.d_model;
    Offsets o{};
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
        std::size_t here = at;
        at += n;
        return here;
    };
    o.prefix_w = take(std::size_t(s.prefix_dim) * d);
    o.prefix_b = take(d);
    o.wte = take(std::size_t(s.vocab) * d);
    o.wpe = take(std::size_t(s.n_positions) * d);
    for (int l = 0; l < s.n_layer; ++l) {
        Offsets::Layer L{};
        L.ln1_g = take(d);
        L.ln1_b = take(d);
        L.attn_w = take(d * 3 * d);
        L.attn_b = take(3 * d);
        L.proj_w = take(d * d);
        L.proj_b = take(d);
        L.ln2_g = take(d);
        L.ln2_b = take(d);
        L.fc_w = take(d * 4 * d);
        L.fc_b = take(4 * d);
        L.out_w = take(4 * d * d);
        L.out_b = take(d);
        o.layers.push_back(L);
    }
    o.lnf_g = take(d);
    o.lnf_b = take(d);
    o.total = at;
    return o;
}

PrefixDecoder::PrefixDecoder(DecoderShape shape, std::uint64_t seed) : shape_(shape), off_(layout(shape)) {
    params_.assign(off_.total, 0.0);
    std::mt19937_64 rng(seed);
    const int d = shape_.d_model;
    auto fill = [&](std::size_t off, std::size_t n, double stddev) {
        std::normal_distribution<double> normal(0.0, stddev);
        for (std::size_t i = 0; i < n; ++i) params_[off + i] = normal(rng);
    };
    auto ones = [&](std::size_t off) { std::fill_n(params_.begin() + off, d, 1.0); };
    const double residual_std = 0.02 / std::sqrt(2.0 * shape_.n_layer);

    fill(off_.prefix_w, std::size_t(shape_.prefix_dim) * d, 1.0 / std::sqrt(double(shape_.prefix_dim)));
    fill(off_.wte, std::size_t(shape_.vocab) * d, 0.02);
    fill(off_.wpe, std::size_t(shape_.n_positions) * d, 0.01);
    for (const auto& L : off_.layers) {
        ones(L.ln1_g);
        ones(L.ln2_g);
        fill(L.attn_w, std::size_t(d) * 3 * d, 0.02);
        fill(L.proj_w, std::size_t(d) * d, residual_std);
        fill(L.fc_w, std::size_t(d) * 4 * d, 0.02);
        fill(L.out_w, std::size_t(4) * d * d, residual_std);
    }
    ones(off_.lnf_g);
}

PrefixDecoder::PrefixDecoder(DecoderShape shape, std::vector<double> params)
    : shape_(shape), off_(layout(shape)), params_(std::move(params)) {
    if (params_.size() != off_.total)
        throw FormatError("decoder parameter count " + std::to_string(params_.size()) + " does not match shape (" +
                          std::to_string(off_.total) + ")");
}

double PrefixDecoder::loss(const Vector& prefix, std::span<const int> tokens, int eos, double weight,
                           std::vector<double>* grad, Vector* prefix_grad) const {
    const int d = shape_.d_model, H = shape_.n_head, hd = d / H, V = shape_.vocab;
    const int T = static_cast<int>(tokens.size()) + 1;
    if (static_cast<int>(prefix.size()) != shape_.prefix_dim)
        throw ValidationError("prefix has dimension " + std::to_string(prefix.size()) + ", decoder expects " +
                              std::to_string(shape_.prefix_dim));
    if (T > shape_.n_positions) throw ValidationError("sequence longer than the decoder context");
    for (int t : tokens)
        if (t < 0 || t >= V) throw ValidationError("token id out of vocabulary");
    const double scale = 1.0 / std::sqrt(double(hd));

    // ---- forward ----
    Eigen::Map<const VectorXd> e(prefix.data(), shape_.prefix_dim);
    auto prefix_w = mat(off_.prefix_w, shape_.prefix_dim, d);
    auto wte = mat(off_.wte, V, d);
    auto wpe = mat(off_.wpe, shape_.n_positions, d);

    Mat x(T, d);
    x.row(0) = e.transpose() * prefix_w + vec(off_.prefix_b, d).transpose();
    for (int k = 1; k < T; ++k) x.row(k) = wte.row(tokens[k - 1]);
    x += wpe.topRows(T);

    std::vector<LayerCache> caches(off_.layers.size());
    for (std::size_t l = 0; l < off_.layers.size(); ++l) {
        const auto& L = off_.layers[l];
        LayerCache& c = caches[l];
        c.x_in = x;
        c.h1 = layer_norm(x, vec(L.ln1_g, d), vec(L.ln1_b, d), c.ln1);
        c.qkv = c.h1 * mat(L.attn_w, d, 3 * d);
        c.qkv.rowwise() += vec(L.attn_b, 3 * d).transpose();
        c.attn.resize(T, d);
        c.probs.resize(H);
        for (int h = 0; h < H; ++h) {
            auto q = c.qkv.middleCols(h * hd, hd);
            auto kk = c.qkv.middleCols(d + h * hd, hd);
            auto vv = c.qkv.middleCols(2 * d + h * hd, hd);
            Mat s = (q * kk.transpose()) * scale;
            Mat& p = c.probs[h];
            p.setZero(T, T);
            for (int i = 0; i < T; ++i) {
                double top = s.row(i).head(i + 1).maxCoeff();
                p.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - top).exp();
                p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
            }
            c.attn.middleCols(h * hd, hd) = p * vv;
        }
        c.x_mid = x + c.attn * mat(L.proj_w, d, d);
        c.x_mid.rowwise() += vec(L.proj_b, d).transpose();
        c.h2 = layer_norm(c.x_mid, vec(L.ln2_g, d), vec(L.ln2_b, d), c.ln2);
        c.pre = c.h2 * mat(L.fc_w, d, 4 * d);
        c.pre.rowwise() += vec(L.fc_b, 4 * d).transpose();
        c.act = c.pre.unaryExpr([](double v) { return gelu(v); });
        x = c.x_mid + c.act * mat(L.out_w, 4 * d, d);
        x.rowwise() += vec(L.out_b, d).transpose();
    }
    LnCache lnf;
    Mat hf = layer_norm(x, vec(off_.lnf_g, d), vec(off_.lnf_b, d), lnf);
    Mat logits = hf * wte.transpose();

    double total = 0;
    Mat dlogits;
    const bool backward = grad || prefix_grad;
    if (backward) dlogits.resize(T, V);
    for (int k = 0; k < T; ++k) {
        const int target = k + 1 < T ? tokens[k] : eos;
        VectorXd lp = log_softmax(logits.row(k));
        total -= lp(target);
        if (backward) {
            dlogits.row(k) = lp.array().exp().transpose() * weight;
            dlogits(k, target) -= weight;
        }
    }
    if (!backward) return total;

    // ---- backward ----
    std::vector<double> local;
    std::vector<double>* g = grad;
    if (!g) {
        local.assign(params_.size(), 0.0);
        g = &local;
    }
    auto gmat = [&](std::size_t off, int rows, int cols) { return MapMat(g->data() + off, rows, cols); };
    auto gvec = [&](std::size_t off, int n) { return MapVec(g->data() + off, n); };

    Mat dhf = dlogits * wte;
    gmat(off_.wte, V, d) += dlogits.transpose() * hf;
    Mat dx = layer_norm_backward(dhf, vec(off_.lnf_g, d), lnf, gvec(off_.lnf_g, d), gvec(off_.lnf_b, d));

    for (int l = static_cast<int>(off_.layers.size()) - 1; l >= 0; --l) {
        const auto& L = off_.layers[l];
        const LayerCache& c = caches[l];

        // mlp
        Mat dmid = dx;
        Mat dact = dx * mat(L.out_w, 4 * d, d).transpose();
        gmat(L.out_w, 4 * d, d) += c.act.transpose() * dx;
        gvec(L.out_b, d) += dx.colwise().sum().transpose();
        Mat dpre = dact.array() * c.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
        gmat(L.fc_w, d, 4 * d) += c.h2.transpose() * dpre;
        gvec(L.fc_b, 4 * d) += dpre.colwise().sum().transpose();
        Mat dh2 = dpre * mat(L.fc_w, d, 4 * d).transpose();
        dmid += layer_norm_backward(dh2, vec(L.ln2_g, d), c.ln2, gvec(L.ln2_g, d), gvec(L.ln2_b, d));

        // attention
        Mat dxin = dmid;
        Mat dattn = dmid * mat(L.proj_w, d, d).transpose();
        gmat(L.proj_w, d, d) += c.attn.transpose() * dmid;
        gvec(L.proj_b, d) += dmid.colwise().sum().transpose();
        Mat dqkv = Mat::Zero(T, 3 * d);
        for (int h = 0; h < H; ++h) {
            auto q = c.qkv.middleCols(h * hd, hd);
            auto kk = c.qkv.middleCols(d + h * hd, hd);
            auto vv = c.qkv.middleCols(2 * d + h * hd, hd);
            const Mat& p = c.probs[h];
            Mat dout = dattn.middleCols(h * hd, hd);
            Mat dp = dout * vv.transpose();
            dqkv.middleCols(2 * d + h * hd, hd) = p.transpose() * dout;
            Eigen::VectorXd rows = (dp.array() * p.array()).rowwise().sum();
            Mat ds = (p.array() * (dp.colwise() - rows).array()) * scale;
            dqkv.middleCols(h * hd, hd) = ds * kk;
            dqkv.middleCols(d + h * hd, hd) = ds.transpose() * q;
        }
        gmat(L.attn_w, d, 3 * d) += c.h1.transpose() * dqkv;
        gvec(L.attn_b, 3 * d) += dqkv.colwise().sum().transpose();
        Mat dh1 = dqkv * mat(L.attn_w, d, 3 * d).transpose();
        dxin += layer_norm_backward(dh1, vec(L.ln1_g, d), c.ln1, gvec(L.ln1_g, d), gvec(L.ln1_b, d));
        dx = std::move(dxin);
    }

    gmat(off_.wpe, shape_.n_positions, d).topRows(T) += dx;
    auto dwte = gmat(off_.wte, V, d);
    for (int k = 1; k < T; ++k) dwte.row(tokens[k - 1]) += dx.row(k);
    RowVectorXd dtok = dx.row(0);
    gvec(off_.prefix_b, d) += dtok.transpose();
    gmat(off_.prefix_w, shape_.prefix_dim, d) += e * dtok;
    if (prefix_grad) {
        VectorXd de = prefix_w * dtok.transpose();
        prefix_grad->resize(shape_.prefix_dim, 0.0);
        for (int i = 0; i < shape_.prefix_dim; ++i) (*prefix_grad)[i] += de(i);
    }
    return total;
}

VectorXd PrefixDecoder::forward_row(RowVectorXd x, State& state) const {
    const int d = shape_.d_model, H = shape_.n_head, hd = d / H;
    const int pos = state.length;
    if (pos >= shape_.n_positions) throw DecodeError("decoder context exhausted");
    const double scale = 1.0 / std::sqrt(double(hd));
    x += mat(off_.wpe, shape_.n_positions, d).row(pos);
    if (state.keys.empty()) {
        state.keys.assign(off_.layers.size(), Mat(0, d));
        state.values.assign(off_.layers.size(), Mat(0, d));
    }

    for (std::size_t l = 0; l < off_.layers.size(); ++l) {
        const auto& L = off_.layers[l];
        LnCache ln;
        Mat xm = x;
        Mat h1 = layer_norm(xm, vec(L.ln1_g, d), vec(L.ln1_b, d), ln);
        RowVectorXd qkv = h1.row(0) * mat(L.attn_w, d, 3 * d) + vec(L.attn_b, 3 * d).transpose();
        Mat& K = state.keys[l];
        Mat& Vv = state.values[l];
        K.conservativeResize(pos + 1, d);
        Vv.conservativeResize(pos + 1, d);
        K.row(pos) = qkv.segment(d, d);
        Vv.row(pos) = qkv.segment(2 * d, d);
        RowVectorXd attn(d);
        for (int h = 0; h < H; ++h) {
            RowVectorXd s = (qkv.segment(h * hd, hd) * K.middleCols(h * hd, hd).transpose()) * scale;
            double top = s.maxCoeff();
            RowVectorXd p = (s.array() - top).exp();
            p /= p.sum();
            attn.segment(h * hd, hd) = p * Vv.middleCols(h * hd, hd);
        }
        RowVectorXd mid = x + attn * mat(L.proj_w, d, d) + vec(L.proj_b, d).transpose();
        Mat midm = mid;
        Mat h2 = layer_norm(midm, vec(L.ln2_g, d), vec(L.ln2_b, d), ln);
        RowVectorXd pre = h2.row(0) * mat(L.fc_w, d, 4 * d) + vec(L.fc_b, 4 * d).transpose();
        RowVectorXd act = pre.unaryExpr([](double v) { return gelu(v); });
        x = mid + act * mat(L.out_w, 4 * d, d) + vec(L.out_b, d).transpose();
    }
    state.length = pos + 1;
    LnCache ln;
    Mat xm = x;
    Mat hf = layer_norm(xm, vec(off_.lnf_g, d), vec(off_.lnf_b, d), ln);
    RowVectorXd logits = hf.row(0) * mat(off_.wte, shape_.vocab, d).transpose();
    return log_softmax(logits);
}

VectorXd PrefixDecoder::start(const Vector& prefix, State& state) const {
    if (static_cast<int>(prefix.size()) != shape_.prefix_dim)
        throw ValidationError("prefix has dimension " + std::to_string(prefix.size()) + ", decoder expects " +
                              std::to_string(shape_.prefix_dim));
    for (double v : prefix)
        if (!std::isfinite(v)) throw ValidationError("prefix is not finite");
    state = State{};
    Eigen::Map<const VectorXd> e(prefix.data(), shape_.prefix_dim);
    RowVectorXd x = e.transpose() * mat(off_.prefix_w, shape_.prefix_dim, shape_.d_model) +
                    vec(off_.prefix_b, shape_.d_model).transpose();
    return forward_row(std::move(x), state);
}

VectorXd PrefixDecoder::step(int token, State& state) const {
    if (token < 0 || token >= shape_.vocab) throw ValidationError("token id out of vocabulary");
    RowVectorXd x = mat(off_.wte, shape_.vocab, shape_.d_model).row(token);
    return forward_row(std::move(x), state);
}

} // namespace pioner
