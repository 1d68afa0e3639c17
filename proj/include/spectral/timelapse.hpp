#pragma once

// Spatiotemporal spectral log: assembly from checkpoints, CSV interchange, and
// the wave / gradient / profile analyses over it.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spectral/error.hpp"
#include "spectral/fits.hpp"
#include "spectral/parallel.hpp"
#include "spectral/spectra.hpp"
#include "spectral/tensor_io.hpp"

namespace spectral {

using Step = std::int64_t;

class SpectralLog {
 public:
  SpectralLog() = default;
  SpectralLog(std::string run_id, int layer_count) : run_id_(std::move(run_id)), layer_count_(layer_count) {
    if (layer_count_ <= 0) throw SpectralError(ErrorCode::MalformedLog, "layer_count must be positive");
  }

  /// Insert keeping (step, layer, type, slot) order; duplicate keys are rejected.
  void add(SpectralRecord rec) {
    if (rec.coord.layer < 0 || rec.coord.layer >= layer_count_) {
      throw SpectralError(ErrorCode::MalformedLog, "record layer " + std::to_string(rec.coord.layer) +
                                                       " outside [0, " + std::to_string(layer_count_) + ")");
    }
    auto pos = std::lower_bound(records_.begin(), records_.end(), rec, less);
    if (pos != records_.end() && !less(rec, *pos)) {
      throw SpectralError(ErrorCode::MalformedLog, "duplicate record at step " + std::to_string(rec.step) +
                                                       ", layer " + std::to_string(rec.coord.layer) + ", type " +
                                                       std::string(to_string(rec.coord.matrix_type)));
    }
    records_.insert(pos, std::move(rec));
  }

  const std::string& run_id() const noexcept { return run_id_; }
  int layer_count() const noexcept { return layer_count_; }
  const std::vector<SpectralRecord>& records() const noexcept { return records_; }

  std::vector<Step> steps() const {
    std::vector<Step> out;
    for (const auto& r : records_) {
      if (out.empty() || out.back() != r.step) out.push_back(r.step);
    }
    return out;
  }

  std::vector<const SpectralRecord*> at_step(Step step) const {
    std::vector<const SpectralRecord*> out;
    for (const auto& r : records_) {
      if (r.step == step) out.push_back(&r);
    }
    return out;
  }

 private:
  static bool less(const SpectralRecord& a, const SpectralRecord& b) {
    return std::tie(a.step, a.coord) < std::tie(b.step, b.coord);
  }

  std::string run_id_;
  int layer_count_ = 1;
  std::vector<SpectralRecord> records_;
};

// ---------------------------------------------------------------------------
// Building a log from checkpoints

struct BuildOptions {
  std::vector<MatrixType> types{kTrackedTypes.begin(), kTrackedTypes.end()};
  double tail_fraction = 0.2;
  bool keep_spectra = false;
  unsigned threads = thread_count();
};

struct FileFailure {
  std::string path;
  std::string tensor;
  std::string error;
};

using RecordKey = std::tuple<Step, int, MatrixType, std::optional<MatrixType>>;

struct BuildResult {
  SpectralLog log;
  std::vector<std::string> warnings;
  std::vector<Step> skipped_steps;
  std::vector<FileFailure> failures;
  std::map<RecordKey, std::vector<double>> spectra;  // filled when keep_spectra
};

inline RecordKey record_key(const SpectralRecord& r) {
  return {r.step, r.coord.layer, r.coord.matrix_type, r.coord.fused_slot};
}

/// Analyze every requested (step, layer, type) matrix of a checkpoint series.
/// Fused QKV tensors are split per the manifest scheme and their blocks
/// recorded with `fused_slot` set. Steps whose layer coverage is not dense for
/// some requested type are skipped with a warning.
inline BuildResult build_log(const CheckpointSeries& series, const Manifest& manifest, const BuildOptions& opts = {}) {
  if (series.steps.empty()) throw SpectralError(ErrorCode::MissingInput, "checkpoint series is empty");
  const std::set<MatrixType> wanted(opts.types.begin(), opts.types.end());
  const bool wants_qkv = wanted.count(MatrixType::Q) || wanted.count(MatrixType::K) || wanted.count(MatrixType::V);

  struct Job {
    Step step;
    const CheckpointEntry* entry;
  };
  std::vector<Job> jobs;
  for (Step step : series.steps) {
    for (const auto& e : series.entries.at(step)) {
      const auto t = e.coord.matrix_type;
      if (t == MatrixType::FusedQkv ? wants_qkv : wanted.count(t) > 0) jobs.push_back({step, &e});
    }
  }

  struct JobOutput {
    std::vector<SpectralRecord> records;
    std::vector<std::vector<double>> spectra;
    std::optional<FileFailure> failure;
  };
  std::vector<JobOutput> outputs(jobs.size());
  parallel_for(
      jobs.size(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
          const auto& job = jobs[i];
          auto& out = outputs[i];
          try {
            const auto tensor = load_tensor(job.entry->locator);
            auto emit = [&](const TensorView& t, const ParamCoord& coord) {
              const auto s = singular_values(t);
              out.records.push_back(analyze_spectrum(s, t.rows(), t.cols(), job.step, coord, opts.tail_fraction));
              if (opts.keep_spectra) out.spectra.push_back(s.sigma());
            };
            if (job.entry->coord.matrix_type == MatrixType::FusedQkv) {
              const auto parts = split_fused_qkv(tensor, manifest.scheme, manifest.d_model, manifest.n_heads);
              static constexpr std::array<MatrixType, 3> slots = {MatrixType::Q, MatrixType::K, MatrixType::V};
              for (int s = 0; s < 3; ++s) {
                if (wanted.count(slots[s])) emit(parts[s], {job.entry->coord.layer, slots[s], slots[s]});
              }
            } else {
              emit(tensor, job.entry->coord);
            }
          } catch (const std::exception& e) {
            out.records.clear();
            out.spectra.clear();
            out.failure = FileFailure{job.entry->locator.path.string(), job.entry->locator.tensor_name, e.what()};
          }
        }
      },
      opts.threads);

  BuildResult result{SpectralLog(series.run_id, manifest.layers), {}, {}, {}, {}};
  std::map<Step, std::vector<SpectralRecord>> by_step;
  std::set<MatrixType> seen_types;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto& out = outputs[i];
    if (out.failure) {
      result.failures.push_back(*out.failure);
      result.warnings.push_back("failed to analyze " + out.failure->tensor + " (" + out.failure->path +
                                "): " + out.failure->error);
      continue;
    }
    for (std::size_t r = 0; r < out.records.size(); ++r) {
      auto& rec = out.records[r];
      seen_types.insert(rec.coord.matrix_type);
      if (opts.keep_spectra) result.spectra[record_key(rec)] = std::move(out.spectra[r]);
      by_step[jobs[i].step].push_back(std::move(rec));
    }
  }
  for (auto t : wanted) {
    if (!seen_types.count(t)) {
      result.warnings.push_back("matrix type " + std::string(to_string(t)) + " not found in any checkpoint");
    }
  }

  for (Step step : series.steps) {
    auto& recs = by_step[step];
    std::string missing;
    for (auto t : seen_types) {
      std::vector<bool> present(static_cast<std::size_t>(manifest.layers), false);
      for (const auto& r : recs) {
        if (r.coord.matrix_type == t && r.coord.layer >= 0 && r.coord.layer < manifest.layers) {
          present[static_cast<std::size_t>(r.coord.layer)] = true;
        }
      }
      for (int l = 0; l < manifest.layers; ++l) {
        if (!present[static_cast<std::size_t>(l)]) {
          missing += (missing.empty() ? "" : ", ") + std::string(to_string(t)) + "@L" + std::to_string(l);
        }
      }
    }
    if (!missing.empty()) {
      result.skipped_steps.push_back(step);
      result.warnings.push_back("MissingLayer: step " + std::to_string(step) + " skipped (missing " + missing + ")");
      for (const auto& r : recs) result.spectra.erase(record_key(r));
      continue;
    }
    for (auto& r : recs) {
      if (r.coord.layer >= manifest.layers) {
        result.warnings.push_back("ignoring layer " + std::to_string(r.coord.layer) + " beyond manifest layer count");
        continue;
      }
      result.log.add(std::move(r));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// CSV interchange

inline constexpr const char* kLogCsvHeader =
    "step,layer,matrix_type,fused_slot,rows,cols,stable_rank,alpha,alpha_r2,entropy,spectral_gap,frob_norm";

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string format_opt(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

inline void write_log_csv(std::ostream& out, const SpectralLog& log) {
  out << kLogCsvHeader << '\n';
  for (const auto& r : log.records()) {
    out << r.step << ',' << r.coord.layer << ',' << to_string(r.coord.matrix_type) << ','
        << (r.coord.fused_slot ? std::string(to_string(*r.coord.fused_slot)) : std::string()) << ',' << r.rows << ','
        << r.cols << ',' << format_opt(r.stable_rank) << ',' << format_opt(r.alpha) << ',' << format_opt(r.alpha_r2)
        << ',' << format_opt(r.entropy) << ',' << format_opt(r.spectral_gap) << ',' << format_real(r.frob_norm)
        << '\n';
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_real(const std::string& s, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw SpectralError(ErrorCode::MalformedLog, std::string("bad ") + what + " value '" + s + "'");
  }
  return v;
}

inline std::int64_t parse_int(const std::string& s, const char* what) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw SpectralError(ErrorCode::MalformedLog, std::string("bad ") + what + " value '" + s + "'");
  }
  return v;
}

/// Read a log CSV. The layer count is taken from `layer_count` when given,
/// otherwise from the largest layer index present.
inline SpectralLog read_log_csv(std::istream& in, std::string run_id = "run", std::optional<int> layer_count = {}) {
  std::string line;
  if (!std::getline(in, line)) throw SpectralError(ErrorCode::MalformedLog, "empty log");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kLogCsvHeader) throw SpectralError(ErrorCode::MalformedLog, "unexpected header '" + line + "'");

  std::vector<SpectralRecord> records;
  std::size_t lineno = 1;
  auto opt = [](const std::string& s, const char* what) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return parse_real(s, what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 12) {
      throw SpectralError(ErrorCode::MalformedLog, "line " + std::to_string(lineno) + " has " +
                                                       std::to_string(c.size()) + " fields, expected 12");
    }
    SpectralRecord r;
    r.step = parse_int(c[0], "step");
    r.coord.layer = static_cast<int>(parse_int(c[1], "layer"));
    auto type = parse_matrix_type(c[2]);
    if (!type) throw SpectralError(ErrorCode::MalformedLog, "unknown matrix_type '" + c[2] + "'");
    r.coord.matrix_type = *type;
    if (!c[3].empty()) {
      auto slot = parse_matrix_type(c[3]);
      if (!slot) throw SpectralError(ErrorCode::MalformedLog, "unknown fused_slot '" + c[3] + "'");
      r.coord.fused_slot = *slot;
    }
    r.rows = static_cast<std::size_t>(parse_int(c[4], "rows"));
    r.cols = static_cast<std::size_t>(parse_int(c[5], "cols"));
    r.stable_rank = opt(c[6], "stable_rank");
    r.alpha = opt(c[7], "alpha");
    r.alpha_r2 = opt(c[8], "alpha_r2");
    r.entropy = opt(c[9], "entropy");
    r.spectral_gap = opt(c[10], "spectral_gap");
    r.frob_norm = parse_real(c[11], "frob_norm");
    if (r.step < 0 || r.coord.layer < 0) throw SpectralError(ErrorCode::MalformedLog, "negative step or layer");
    records.push_back(std::move(r));
  }
  int layers = layer_count.value_or(0);
  if (!layer_count) {
    for (const auto& r : records) layers = std::max(layers, r.coord.layer + 1);
  }
  SpectralLog log(std::move(run_id), std::max(layers, 1));
  for (auto& r : records) log.add(std::move(r));
  return log;
}

using SpectraTable = std::map<RecordKey, std::vector<double>>;

inline constexpr const char* kSpectraCsvHeader = "step,layer,matrix_type,fused_slot,index,sigma";

/// Long-form singular values, one row per value, at full double precision.
inline void write_spectra_csv(std::ostream& out, const SpectraTable& spectra) {
  out << kSpectraCsvHeader << '\n';
  char buf[32];
  for (const auto& [key, sigma] : spectra) {
    const auto& [step, layer, type, slot] = key;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", sigma[i]);
      out << step << ',' << layer << ',' << to_string(type) << ',' << (slot ? std::string(to_string(*slot)) : "")
          << ',' << i << ',' << buf << '\n';
    }
  }
}

inline SpectraTable read_spectra_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SpectralError(ErrorCode::MalformedLog, "empty spectra file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kSpectraCsvHeader) throw SpectralError(ErrorCode::MalformedLog, "unexpected spectra header '" + line + "'");
  SpectraTable table;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 6) throw SpectralError(ErrorCode::MalformedLog, "spectra row with " + std::to_string(c.size()) + " fields");
    const auto type = parse_matrix_type(c[2]);
    if (!type) throw SpectralError(ErrorCode::MalformedLog, "unknown matrix_type '" + c[2] + "'");
    std::optional<MatrixType> slot;
    if (!c[3].empty()) {
      slot = parse_matrix_type(c[3]);
      if (!slot) throw SpectralError(ErrorCode::MalformedLog, "unknown fused_slot '" + c[3] + "'");
    }
    auto& sigma = table[{parse_int(c[0], "step"), static_cast<int>(parse_int(c[1], "layer")), *type, slot}];
    const auto index = static_cast<std::size_t>(parse_int(c[4], "index"));
    if (index != sigma.size()) throw SpectralError(ErrorCode::MalformedLog, "spectra rows out of order");
    sigma.push_back(parse_real(c[5], "sigma"));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Compression onsets and the wave

using StepValue = std::pair<Step, double>;

/// First step whose value drops below threshold_ratio x (value at the earliest step).
inline std::optional<Step> onset_step(std::span<const StepValue> series, double threshold_ratio = 0.9) {
  if (series.empty()) return std::nullopt;
  const double threshold = threshold_ratio * series.front().second;
  for (const auto& [step, value] : series) {
    if (value < threshold) return step;
  }
  return std::nullopt;
}

struct OnsetTable {
  std::map<int, std::optional<Step>> onsets;
  double threshold_ratio = 0.9;
};

/// Mean stable rank per layer at `step`, over every record of the layer (or
/// only `type` when given). Empty when some layer has no usable record.
inline std::optional<std::vector<double>> layer_mean_sr(const SpectralLog& log, Step step,
                                                        std::optional<MatrixType> type = {}) {
  const auto L = static_cast<std::size_t>(log.layer_count());
  std::vector<double> sum(L, 0.0);
  std::vector<int> count(L, 0);
  for (const auto* r : log.at_step(step)) {
    if (type && r->coord.matrix_type != *type) continue;
    if (!r->stable_rank) continue;
    sum[static_cast<std::size_t>(r->coord.layer)] += *r->stable_rank;
    ++count[static_cast<std::size_t>(r->coord.layer)];
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (count[l] == 0) return std::nullopt;
    sum[l] /= count[l];
  }
  return sum;
}

/// Per-layer onset of the layer-mean stable rank. The baseline is the earliest
/// step at which the log is dense.
inline OnsetTable compute_onsets(const SpectralLog& log, double threshold_ratio = 0.9,
                                 std::optional<MatrixType> type = {}) {
  OnsetTable table;
  table.threshold_ratio = threshold_ratio;
  const auto L = static_cast<std::size_t>(log.layer_count());
  std::vector<std::vector<StepValue>> per_layer(L);
  for (Step step : log.steps()) {
    if (auto sr = layer_mean_sr(log, step, type)) {
      for (std::size_t l = 0; l < L; ++l) per_layer[l].push_back({step, (*sr)[l]});
    }
  }
  for (std::size_t l = 0; l < L; ++l) table.onsets[static_cast<int>(l)] = onset_step(per_layer[l], threshold_ratio);
  return table;
}

/// OLS of onset step on layer index; the slope is the wave velocity (steps per layer).
inline LineFit wave_velocity(const OnsetTable& onsets) {
  std::vector<double> x, y;
  for (const auto& [layer, step] : onsets.onsets) {
    if (step) {
      x.push_back(layer);
      y.push_back(static_cast<double>(*step));
    }
  }
  if (x.size() < 3) {
    throw SpectralError(ErrorCode::TooFewOnsets,
                        "wave fit needs >= 3 layers with an onset, got " + std::to_string(x.size()));
  }
  return ols(x, y);
}

/// mean SR(layer 0) - mean SR(layer L-1) at every step with dense coverage.
inline std::vector<StepValue> sr_gradient_series(const SpectralLog& log, std::optional<MatrixType> type = {}) {
  std::vector<StepValue> out;
  for (Step step : log.steps()) {
    if (auto sr = layer_mean_sr(log, step, type)) out.push_back({step, sr->front() - sr->back()});
  }
  return out;
}

/// First adjacent pair with gradient <= 0 followed by gradient > 0.
inline std::optional<std::pair<Step, Step>> detect_reversal(std::span<const StepValue> series) {
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (series[i - 1].second <= 0.0 && series[i].second > 0.0) return std::pair{series[i - 1].first, series[i].first};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Alpha profiles

struct AlphaProfile {
  Step step = 0;
  MatrixType matrix_type = MatrixType::Q;
  std::vector<double> alphas;  // index = layer, dense over [0, L)

  int layers() const { return static_cast<int>(alphas.size()); }
};

inline AlphaProfile alpha_profile(const SpectralLog& log, Step step, MatrixType type = MatrixType::Q) {
  const auto recs = log.at_step(step);
  if (recs.empty()) throw SpectralError(ErrorCode::MissingStep, "step " + std::to_string(step) + " not in log");
  const auto L = static_cast<std::size_t>(log.layer_count());
  std::vector<std::optional<double>> vals(L);
  for (const auto* r : recs) {
    if (r->coord.matrix_type == type && r->alpha) vals[static_cast<std::size_t>(r->coord.layer)] = *r->alpha;
  }
  AlphaProfile p{step, type, {}};
  for (std::size_t l = 0; l < L; ++l) {
    if (!vals[l]) {
      throw SpectralError(ErrorCode::SparseProfile, "no " + std::string(to_string(type)) + " alpha for layer " +
                                                        std::to_string(l) + " at step " + std::to_string(step));
    }
    p.alphas.push_back(*vals[l]);
  }
  return p;
}

inline double alpha_spread(const AlphaProfile& p) {
  if (p.alphas.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(p.alphas.begin(), p.alphas.end());
  return *hi - *lo;
}

struct PeakPosition {
  int layer = 0;
  double relative_depth = 0.0;  // layer / L
};

inline PeakPosition peak_position(const AlphaProfile& p) {
  if (p.alphas.empty()) throw SpectralError(ErrorCode::SparseProfile, "empty profile");
  const auto it = std::max_element(p.alphas.begin(), p.alphas.end());  // first maximum
  const int layer = static_cast<int>(it - p.alphas.begin());
  return {layer, static_cast<double>(layer) / static_cast<double>(p.alphas.size())};
}

/// Sum of Frobenius norms of every record in each layer at `step`.
inline std::vector<double> layer_frob_norms(const SpectralLog& log, Step step) {
  std::vector<double> out(static_cast<std::size_t>(log.layer_count()), 0.0);
  for (const auto* r : log.at_step(step)) out[static_cast<std::size_t>(r->coord.layer)] += r->frob_norm;
  return out;
}

}  // namespace spectral
