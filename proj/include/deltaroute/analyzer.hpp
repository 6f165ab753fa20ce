#pragma once

// Diagnostics over recorded routing traces and hidden-state captures.

#include <filesystem>
#include <string>
#include <vector>

#include "deltaroute/model.hpp"

namespace deltaroute {

struct SiteSharpness {
  std::size_t layer = 0;
  SublayerKind kind = SublayerKind::Attention;
  std::size_t n_sources = 0;
  double value = 0.0;  // mean over (batch, position) of max_n alpha_n
};

struct SharpnessReport {
  std::string mode;
  std::vector<SiteSharpness> sites;  // (layer, attn, mlp) order
  // Per-layer series; a layer without a recorded site holds NaN.
  std::vector<double> attn_series;
  std::vector<double> mlp_series;
  std::vector<double> layer_mean;
  double average = 0.0;
};

/// Throws ContractError on an empty trace.
SharpnessReport sharpness(const RoutingTrace& trace);
double avg_max_weight(const RoutingTrace& trace);

struct RedundancyReport {
  // cumulative[i] = cos(h_i, h_{i+1}); delta[i] = cos(v_i, v_{i+1}) with
  // v_i = h_{i+1} - h_i. Averaged over batch and positions.
  std::vector<double> cumulative;
  std::vector<double> delta;
  double mean_cumulative = 0.0;
  double mean_delta = 0.0;
};

/// Needs at least three captured states. Zero-norm vectors count as cosine 0.
RedundancyReport redundancy(const HiddenCapture& capture);

/// Mean alpha per source at one site, in store insertion order.
struct HeatmapRow {
  std::size_t layer = 0;
  SublayerKind kind = SublayerKind::Attention;
  std::vector<double> mean_weights;
};

std::vector<HeatmapRow> heatmap_rows(const RoutingTrace& trace);

/// Writes `<path>` as CSV (header site,layer,sublayer,n_sources,s0,s1,...;
/// short rows padded with empty cells) and the sharpness JSON sidecar next to
/// it with a `.json` extension. Returns the sidecar path.
std::filesystem::path export_heatmap(const RoutingTrace& trace, const std::filesystem::path& path);
std::vector<HeatmapRow> read_heatmap_csv(const std::filesystem::path& path);

void write_sharpness_json(const SharpnessReport& report, const std::filesystem::path& path);

void save_trace(const RoutingTrace& trace, const std::filesystem::path& path);
RoutingTrace load_trace(const std::filesystem::path& path);

}  // namespace deltaroute
