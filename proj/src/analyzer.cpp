#include "deltaroute/analyzer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "deltaroute/errors.hpp"

namespace deltaroute {

namespace {

using json = nlohmann::json;

double site_sharpness(const SiteTrace& site) {
  const std::size_t rows = site.batch * site.seq;
  if (rows == 0 || site.n_sources == 0) return 0.0;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double peak = 0;
    for (std::size_t n = 0; n < site.n_sources; ++n) peak = std::max(peak, site.weights[n * rows + r]);
    total += peak;
  }
  return total / static_cast<double>(rows);
}

double cosine(const double* a, const double* b, std::size_t d) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double mean_cosine(const std::vector<double>& a, const std::vector<double>& b, std::size_t d) {
  const std::size_t rows = a.size() / d;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) total += cosine(a.data() + r * d, b.data() + r * d, d);
  return rows ? total / static_cast<double>(rows) : 0.0;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double total = 0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

SublayerKind parse_sublayer(const std::string& name) {
  if (name == "attn") return SublayerKind::Attention;
  if (name == "mlp") return SublayerKind::Mlp;
  throw FormatError("unknown sublayer '" + name + "'");
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

json nan_as_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

}  // namespace

SharpnessReport sharpness(const RoutingTrace& trace) {
  if (trace.sites.empty()) throw ContractError("sharpness needs a trace with at least one site");
  SharpnessReport report;
  report.mode = trace.mode;
  std::size_t n_layers = 0;
  for (const auto& site : trace.sites) {
    report.sites.push_back({site.layer, site.kind, site.n_sources, site_sharpness(site)});
    n_layers = std::max(n_layers, site.layer + 1);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.attn_series.assign(n_layers, nan);
  report.mlp_series.assign(n_layers, nan);
  report.layer_mean.assign(n_layers, nan);
  for (const auto& s : report.sites) {
    (s.kind == SublayerKind::Attention ? report.attn_series : report.mlp_series)[s.layer] = s.value;
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    double total = 0;
    int count = 0;
    for (double v : {report.attn_series[l], report.mlp_series[l]}) {
      if (!std::isnan(v)) {
        total += v;
        ++count;
      }
    }
    if (count) report.layer_mean[l] = total / count;
  }
  double total = 0;
  for (const auto& s : report.sites) total += s.value;
  report.average = total / static_cast<double>(report.sites.size());
  return report;
}

double avg_max_weight(const RoutingTrace& trace) { return sharpness(trace).average; }

RedundancyReport redundancy(const HiddenCapture& capture) {
  const auto& h = capture.states;
  if (h.size() < 3) throw ContractError("redundancy needs at least three captured states");
  const std::size_t d = capture.d;
  for (const auto& state : h) {
    if (d == 0 || state.size() != capture.batch * capture.seq * d) {
      throw DimensionError("hidden capture state does not match [batch, seq, d]");
    }
  }
  RedundancyReport report;
  std::vector<std::vector<double>> deltas;
  for (std::size_t i = 0; i + 1 < h.size(); ++i) {
    report.cumulative.push_back(mean_cosine(h[i], h[i + 1], d));
    std::vector<double> v(h[i].size());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = h[i + 1][j] - h[i][j];
    deltas.push_back(std::move(v));
  }
  for (std::size_t i = 0; i + 1 < deltas.size(); ++i) {
    report.delta.push_back(mean_cosine(deltas[i], deltas[i + 1], d));
  }
  report.mean_cumulative = mean_of(report.cumulative);
  report.mean_delta = mean_of(report.delta);
  return report;
}

std::vector<HeatmapRow> heatmap_rows(const RoutingTrace& trace) {
  std::vector<HeatmapRow> rows;
  for (const auto& site : trace.sites) {
    HeatmapRow row{site.layer, site.kind, std::vector<double>(site.n_sources, 0.0)};
    const std::size_t positions = site.batch * site.seq;
    for (std::size_t n = 0; n < site.n_sources; ++n) {
      double total = 0;
      for (std::size_t r = 0; r < positions; ++r) total += site.weights[n * positions + r];
      row.mean_weights[n] = positions ? total / static_cast<double>(positions) : 0.0;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::filesystem::path export_heatmap(const RoutingTrace& trace, const std::filesystem::path& path) {
  const auto rows = heatmap_rows(trace);
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.mean_weights.size());

  auto out = open_for_write(path);
  out << "site,layer,sublayer,n_sources";
  for (std::size_t n = 0; n < width; ++n) out << ",s" << n;
  out << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << i << ',' << r.layer << ',' << sublayer_name(r.kind) << ',' << r.mean_weights.size();
    for (std::size_t n = 0; n < width; ++n) {
      out << ',';
      if (n < r.mean_weights.size()) out << format_double(r.mean_weights[n]);
    }
    out << '\n';
  }
  finish(out, path);

  auto sidecar = path;
  sidecar.replace_extension(".json");
  write_sharpness_json(sharpness(trace), sidecar);
  return sidecar;
}

std::vector<HeatmapRow> read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("site,layer,sublayer,n_sources", 0) != 0) {
    throw FormatError(path.string() + ": missing heatmap header");
  }
  std::vector<HeatmapRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() < 4) throw FormatError(path.string() + ": short heatmap row");
    HeatmapRow row;
    try {
      row.layer = std::stoul(cells[1]);
      row.kind = parse_sublayer(cells[2]);
      const std::size_t n = std::stoul(cells[3]);
      if (cells.size() < 4 + n) throw FormatError(path.string() + ": row has fewer cells than sources");
      for (std::size_t i = 0; i < n; ++i) row.mean_weights.push_back(std::stod(cells[4 + i]));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": unparseable heatmap row '" + line + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sharpness_json(const SharpnessReport& report, const std::filesystem::path& path) {
  json sites = json::array();
  for (const auto& s : report.sites) {
    sites.push_back({{"layer", s.layer},
                     {"sublayer", std::string(sublayer_name(s.kind))},
                     {"n_sources", s.n_sources},
                     {"sharpness", s.value}});
  }
  auto series = [](const std::vector<double>& v) {
    json arr = json::array();
    for (double x : v) arr.push_back(nan_as_null(x));
    return arr;
  };
  json doc = {{"mode", report.mode},
              {"avg_max_weight", report.average},
              {"sites", sites},
              {"per_layer",
               {{"attn", series(report.attn_series)},
                {"mlp", series(report.mlp_series)},
                {"mean", series(report.layer_mean)}}}};
  auto out = open_for_write(path);
  out << doc.dump(2) << '\n';
  finish(out, path);
}

void save_trace(const RoutingTrace& trace, const std::filesystem::path& path) {
  json sites = json::array();
  for (const auto& s : trace.sites) {
    sites.push_back({{"layer", s.layer},
                     {"sublayer", std::string(sublayer_name(s.kind))},
                     {"n_sources", s.n_sources},
                     {"batch", s.batch},
                     {"seq", s.seq},
                     {"weights", s.weights}});
  }
  auto out = open_for_write(path);
  out << json{{"mode", trace.mode}, {"sites", sites}}.dump() << '\n';
  finish(out, path);
}

RoutingTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    const json doc = json::parse(in);
    RoutingTrace trace;
    trace.mode = doc.at("mode").get<std::string>();
    for (const auto& s : doc.at("sites")) {
      SiteTrace site;
      site.layer = s.at("layer").get<std::size_t>();
      site.kind = parse_sublayer(s.at("sublayer").get<std::string>());
      site.n_sources = s.at("n_sources").get<std::size_t>();
      site.batch = s.at("batch").get<std::size_t>();
      site.seq = s.at("seq").get<std::size_t>();
      site.weights = s.at("weights").get<std::vector<double>>();
      if (site.weights.size() != site.n_sources * site.batch * site.seq) {
        throw FormatError(path.string() + ": site weights do not match [n_sources, batch, seq]");
      }
      trace.sites.push_back(std::move(site));
    }
    return trace;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace deltaroute
