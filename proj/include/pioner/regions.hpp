#pragma once

#include <utility>
#include <vector>

#include "pioner/core.hpp"

namespace pioner {

// Maps a region spec onto the grid's patch multiset with uniform weights.
//   image   -> every patch once, ascending flat index
//   patch   -> that patch
//   box     -> patches whose cell overlaps the box with positive area
//   box_set -> concatenation of each box's patches (duplicates kept)
//   trace   -> one patch per point, points clamped to the image bounds
PatchSelection select_patches(const RegionSpec& spec, const PatchGrid& grid);

// Throws ValidationError unless indices/weights satisfy the PatchSelection invariants.
void validate(const PatchSelection& selection, const PatchGrid& grid);

// Row-major rows x cols weights proportional to exp(-(a^2 + b^2)) with (a, b)
// spaced uniformly over [-1, 1]^2, normalized to sum to 1.
std::vector<double> gaussian_weights(int rows, int cols);
// The same grid before normalization.
std::vector<double> gaussian_weights_unnormalized(int rows, int cols);

// Per-occurrence weights that `aggregate` applies for `mode`, parallel to
// selection.indices. Throws ModeError / DegenerateWeightError like aggregate.
std::vector<double> mode_weights(const PatchSelection& selection, const PatchGrid& grid,
                                 AggregationMode mode);

// Weights merged per distinct patch, ascending flat index.
std::vector<std::pair<std::size_t, double>> merged_weights(const PatchSelection& selection,
                                                           const std::vector<double>& weights);

// v_S = sum_i w_i v_i, summed in ascending flat index order with compensated
// summation so the result does not depend on selection order.
RegionEmbedding aggregate(const PatchSelection& selection, const PatchGrid& grid, AggregationMode mode);

} // namespace pioner
