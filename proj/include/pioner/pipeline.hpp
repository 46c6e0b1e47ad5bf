#pragma once

#include <memory>

#include "pioner/backbones.hpp"
#include "pioner/decoder.hpp"
#include "pioner/gap.hpp"
#include "pioner/regions.hpp"

namespace pioner {

struct RegionCaption {
    Caption caption;
    PatchSelection selection;
    // Effective aggregation weights merged per patch, ascending index.
    std::vector<std::pair<std::size_t, double>> weights;
};

// encode_image -> select_patches -> aggregate -> (project | passthrough) -> generate.
// Immutable after construction; safe to share across threads.
class CaptionPipeline {
public:
    CaptionPipeline(std::shared_ptr<const BackboneAdapter> adapter, std::shared_ptr<const DecoderCheckpoint> ckpt,
                    std::shared_ptr<const MemoryBank> bank, GenerateOptions gen);

    // Loads checkpoint and memory bank from the config paths and checks that
    // gap.mode agrees with the checkpoint's training mode.
    static CaptionPipeline from_config(const Config& cfg, std::shared_ptr<const BackboneAdapter> adapter);

    const BackboneAdapter& adapter() const { return *adapter_; }
    const DecoderCheckpoint& checkpoint() const { return *ckpt_; }
    const MemoryBank* memory() const { return bank_.get(); }
    GapMode mode() const { return ckpt_->mitigation; }

    // Decoder input for a region embedding: the memory projection in memory
    // mode, otherwise the L2-normalized embedding itself.
    Vector condition(const Vector& region_embedding) const;

    Caption caption_embedding(const Vector& region_embedding) const;
    RegionCaption caption_grid(const PatchGrid& grid, const RegionSpec& spec, AggregationMode mode) const;
    RegionCaption caption_region(const RgbImage& image, const RegionSpec& spec, AggregationMode mode) const;

private:
    std::shared_ptr<const BackboneAdapter> adapter_;
    std::shared_ptr<const DecoderCheckpoint> ckpt_;
    std::shared_ptr<const MemoryBank> bank_;
    GenerateOptions gen_;
};

} // namespace pioner
