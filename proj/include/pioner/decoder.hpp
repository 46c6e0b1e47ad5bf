#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pioner/backbones.hpp"
#include "pioner/core.hpp"
#include "pioner/tokenizer.hpp"
#include "pioner/transformer.hpp"

namespace pioner {

struct TrainMeta {
    std::string corpus_id;
    std::size_t corpus_size = 0;
    int epochs = 0;
    double lr = 0;
    int batch_size = 0;
    double weight_decay = 0;
    std::uint64_t seed = 0;
    double sigma2 = 0;
    std::string adapter;
    std::size_t steps = 0;
    double final_loss = 0;
    std::vector<double> epoch_losses;

    json to_json() const;
    static TrainMeta from_json(const json& j);
};

struct DecoderCheckpoint {
    PrefixDecoder model;
    Tokenizer tokenizer;
    GapMode mitigation = GapMode::memory;
    TrainMeta meta;

    int prefix_dim() const { return model.shape().prefix_dim; }
};

// "PIONCKPT1" | u32 header_len | header JSON | u64 n_params | n_params float64.
// The header carries format version, shape, tokenizer, mitigation_mode, train_meta.
inline constexpr std::string_view kCheckpointMagic = "PIONCKPT1";
void save_checkpoint(const DecoderCheckpoint& ckpt, const std::filesystem::path& path);
DecoderCheckpoint load_checkpoint(const std::filesystem::path& path);

struct TrainSpec {
    std::vector<std::string> corpus;
    int epochs = 10;
    double lr = 1e-5;
    double weight_decay = 0.01;
    int batch_size = 64;
    GapMode mitigation = GapMode::memory;
    double sigma2 = 0.08;
    std::uint64_t seed = 0;
    // Data-parallel gradient workers; 1 in deterministic mode.
    int workers = 1;
    bool deterministic = true;

    int d_model = 256;
    int n_layer = 4;
    int n_head = 4;
    int max_len = 64;
    int max_vocab = 8192;
    std::string corpus_id;

    static TrainSpec from_config(const Config& cfg, std::vector<std::string> corpus);
};

struct TrainProgress {
    std::size_t step = 0;
    int epoch = 0;
    double loss = 0; // mean token cross entropy of the step's batch
};

struct TrainLog {
    std::vector<double> step_losses;
};

// Text-only prefix language model training: condition on the normalized text
// embedding (perturbed in noise mode) and minimize autoregressive cross entropy.
DecoderCheckpoint train(const TrainSpec& spec, const BackboneAdapter& adapter, TrainLog* log = nullptr,
                        const std::function<void(const TrainProgress&)>& on_step = {});

struct GenerateOptions {
    enum class Strategy { greedy, beam } strategy = Strategy::greedy;
    int beam_size = 1;
    int max_len = 64;

    static GenerateOptions from_config(const Config& cfg);
};

// Autoregressive decoding until end-of-sequence or max_len tokens. A
// generation that produces no tokens returns a Caption with empty = true.
Caption generate(const Vector& prefix, const DecoderCheckpoint& ckpt, const GenerateOptions& opts = {});

} // namespace pioner
