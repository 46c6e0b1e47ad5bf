#include "pioner/pipeline.hpp"

namespace pioner {

CaptionPipeline::CaptionPipeline(std::shared_ptr<const BackboneAdapter> adapter,
                                 std::shared_ptr<const DecoderCheckpoint> ckpt, std::shared_ptr<const MemoryBank> bank,
                                 GenerateOptions gen)
    : adapter_(std::move(adapter)), ckpt_(std::move(ckpt)), bank_(std::move(bank)), gen_(gen) {
    if (!adapter_) throw ConfigError("caption pipeline needs a backbone");
    if (!ckpt_) throw ConfigError("caption pipeline needs a decoder checkpoint");
    if (ckpt_->prefix_dim() != adapter_->embedding_dim())
        throw ConfigError("checkpoint prefix_dim " + std::to_string(ckpt_->prefix_dim()) +
                          " does not match backbone dimension " + std::to_string(adapter_->embedding_dim()));
    if (ckpt_->mitigation == GapMode::memory) {
        if (!bank_) throw ConfigError("checkpoint was trained for memory projection but no memory bank is loaded");
        if (bank_->dim() != ckpt_->prefix_dim())
            throw ConfigError("memory bank dimension does not match checkpoint prefix_dim");
    }
}

CaptionPipeline CaptionPipeline::from_config(const Config& cfg, std::shared_ptr<const BackboneAdapter> adapter) {
    if (cfg.decoder.checkpoint.empty()) throw ConfigError("decoder.checkpoint is not set");
    auto ckpt = std::make_shared<const DecoderCheckpoint>(load_checkpoint(cfg.decoder.checkpoint));
    if (ckpt->mitigation != cfg.gap.mode)
        throw ConfigError("gap.mode is '" + std::string(to_string(cfg.gap.mode)) + "' but the checkpoint was trained in '" +
                          std::string(to_string(ckpt->mitigation)) + "' mode");
    std::shared_ptr<const MemoryBank> bank;
    if (cfg.gap.mode == GapMode::memory) {
        if (cfg.gap.memory.empty()) throw ConfigError("gap.mode is memory but gap.memory is not set");
        auto loaded = load_memory(cfg.gap.memory);
        // the configured temperature wins over the archived one
        bank = std::make_shared<const MemoryBank>(loaded.entries(), loaded.dim(), loaded.columns(), cfg.gap.tau);
    }
    return CaptionPipeline(std::move(adapter), std::move(ckpt), std::move(bank), GenerateOptions::from_config(cfg));
}

Vector CaptionPipeline::condition(const Vector& v) const {
    if (ckpt_->mitigation == GapMode::memory) return project(v, *bank_);
    return passthrough(l2_normalized(v));
}

Caption CaptionPipeline::caption_embedding(const Vector& v) const { return generate(condition(v), *ckpt_, gen_); }

RegionCaption CaptionPipeline::caption_grid(const PatchGrid& grid, const RegionSpec& spec, AggregationMode mode) const {
    RegionCaption out;
    out.selection = select_patches(spec, grid);
    auto weights = mode_weights(out.selection, grid, mode);
    out.weights = merged_weights(out.selection, weights);
    RegionEmbedding emb = aggregate(out.selection, grid, mode);
    out.caption = caption_embedding(emb.vector);
    return out;
}

RegionCaption CaptionPipeline::caption_region(const RgbImage& image, const RegionSpec& spec,
                                              AggregationMode mode) const {
    return caption_grid(adapter_->encode_image(image), spec, mode);
}

} // namespace pioner
