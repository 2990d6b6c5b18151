#pragma once

// Attention-collapse diagnostic: distance of an attention map from the
// closest matrix of the form 𝟙aᵀ (all rows equal), measured in the
// ℓ1,ℓ∞-composite norm and normalized by the map's own norm.

#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "pfdetr/model.hpp"
#include "pfdetr/tensor.hpp"

namespace pfdetr {

/// sqrt(max column absolute sum × max row absolute sum)
double composite_norm(const Tensor& a);

/// composite_norm(A − 𝟙aᵀ)
double rank1_residual(const Tensor& a, std::span<const double> row);

/// Approximate argmin over a of composite_norm(A − 𝟙aᵀ): column medians,
/// a smoothed gradient descent, then coordinate-descent sweeps with
/// golden-section line search on the exact objective.
std::vector<double> rank1_minimizer(const Tensor& a);

double diversity(const Tensor& a);

struct DiversityEntry {
    AttnKind kind = AttnKind::EncoderSelf;
    std::size_t layer = 0;
    double mean = 0.0;
    std::size_t count = 0;
};

struct DiversityReport {
    std::vector<DiversityEntry> entries;

    const DiversityEntry& at(AttnKind kind, std::size_t layer) const;
};

/// Head-averaged maps of an inference pass over each feature sequence,
/// diversity averaged per (kind, layer).
DiversityReport diversity_curve(const DetrModel& model, const std::vector<Tensor>& features);

/// Same aggregation over already-collected maps.
DiversityReport aggregate_diversity(const std::vector<std::vector<AttentionMap>>& per_sample);

std::vector<AttentionMap> inference_maps(const DetrModel& model, const Tensor& features);

/// "ATTN v1 <rows> <cols> <provenance>" header line, then little-endian doubles.
void write_attention_map(const std::filesystem::path& path, const AttentionMap& map);
AttentionMap read_attention_map(const std::filesystem::path& path);
/// Binary 8-bit PGM heatmap scaled by the map maximum.
void write_heatmap_pgm(const std::filesystem::path& path, const Tensor& map);

std::string provenance_tag(AttnKind kind, std::size_t layer);

}  // namespace pfdetr
