// spectra: file-to-file pipelines over checkpoint series and spectral logs.
//
// Exit codes: 0 ok, 1 usage, 2 malformed input, 3 computation failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "spectral/spectral.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spectral;

namespace {

constexpr int kUsage = 1;

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SpectralError(ErrorCode::Io, "cannot open " + path.string());
  return in;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SpectralError(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

/// Write to `path`, or to stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

std::vector<MatrixType> parse_types(const std::string& list) {
  std::vector<MatrixType> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto t = parse_matrix_type(item);
    if (!t) throw SpectralError(ErrorCode::InvalidConfig, "unknown matrix type '" + item + "'");
    out.push_back(*t);
  }
  if (out.empty()) throw SpectralError(ErrorCode::InvalidConfig, "empty --types list");
  return out;
}

std::optional<MatrixType> single_type(const std::string& list) {
  if (list.empty()) return std::nullopt;
  const auto types = parse_types(list);
  if (types.size() != 1) throw SpectralError(ErrorCode::InvalidConfig, "this command takes a single --types value");
  return types.front();
}

SpectralLog load_log(const std::string& path, std::optional<int> layers) {
  auto in = open_in(path);
  return read_log_csv(in, fs::path(path).stem().string(), layers);
}

std::optional<int> manifest_layers(const std::string& manifest) {
  if (manifest.empty()) return std::nullopt;
  return load_manifest(manifest).layers;
}

// ---------------------------------------------------------------------------

struct ScanArgs {
  std::string manifest, root, out, types = "Q,K,V,O,MLP_UP,MLP_DOWN";
  double tail_fraction = 0.2;
  bool spectra = false;
};

int cmd_scan(const ScanArgs& a) {
  if (!(a.tail_fraction > 0.0 && a.tail_fraction <= 1.0)) {
    throw SpectralError(ErrorCode::InvalidConfig, "--tail-fraction must be in (0, 1]");
  }
  const auto start = std::chrono::steady_clock::now();
  const auto manifest = load_manifest(a.manifest);
  const auto series = discover_series(manifest, a.root);
  BuildOptions opts;
  opts.types = parse_types(a.types);
  opts.tail_fraction = a.tail_fraction;
  opts.keep_spectra = a.spectra;
  const auto result = build_log(series, manifest, opts);

  const fs::path out(a.out);
  std::ostringstream csv;
  write_log_csv(csv, result.log);
  write_text(out / "spectral_log.csv", csv.str());
  if (a.spectra) {
    std::ostringstream sc;
    write_spectra_csv(sc, result.spectra);
    write_text(out / "spectra.csv", sc.str());
  }

  json failures = json::array();
  for (const auto& f : result.failures) failures.push_back({{"path", f.path}, {"tensor", f.tensor}, {"error", f.error}});
  json types = json::array();
  for (auto t : opts.types) types.push_back(to_string(t));
  const json sidecar = {{"run_id", manifest.run_id},
                        {"layers", manifest.layers},
                        {"scheme", to_string(manifest.scheme)},
                        {"d_model", manifest.d_model},
                        {"n_heads", manifest.n_heads},
                        {"types", types},
                        {"tail_fraction", a.tail_fraction},
                        {"steps", result.log.steps()},
                        {"skipped_steps", result.skipped_steps},
                        {"records", result.log.records().size()},
                        {"warnings", result.warnings},
                        {"failures", failures}};
  write_text(out / "spectral_log.json", dump(sidecar));

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::size_t skipped = 0;
  for (Step s : result.skipped_steps) {
    for (const auto& e : series.entries.at(s)) skipped += e.coord.matrix_type == MatrixType::FusedQkv ? 3 : 1;
  }
  std::printf("records written: %zu\nmatrices skipped: %zu\nfailed files: %zu\nwall time: %.2fs\n",
              result.log.records().size(), skipped, result.failures.size(), secs);
  for (const auto& w : result.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return result.failures.empty() ? 0 : 3;
}

// ---------------------------------------------------------------------------

struct WaveArgs {
  std::string log, manifest, out, types, format = "json";
  double threshold = 0.9;
};

int cmd_wave(const WaveArgs& a) {
  const auto log = load_log(a.log, manifest_layers(a.manifest));
  const auto type = single_type(a.types);
  const auto onsets = compute_onsets(log, a.threshold, type);
  if (a.format == "csv") {
    std::ostringstream csv;
    csv << "layer,onset_step\n";
    for (const auto& [l, s] : onsets.onsets) csv << l << ',' << (s ? std::to_string(*s) : "") << '\n';
    emit(a.out, csv.str());
    return 0;
  }
  json j;
  j["threshold_ratio"] = a.threshold;
  j["matrix_type"] = type ? json(to_string(*type)) : json(nullptr);
  json on = json::object();
  for (const auto& [l, s] : onsets.onsets) on[std::to_string(l)] = s ? json(*s) : json(nullptr);
  j["onsets"] = on;
  int code = 0;
  try {
    j["velocity_fit"] = to_json(wave_velocity(onsets));
  } catch (const SpectralError& e) {
    j["velocity_fit"] = nullptr;
    j["velocity_error"] = e.what();
    code = exit_code_for(e.code());
  }
  const auto grad = sr_gradient_series(log, type);
  json g = json::array();
  for (const auto& [s, v] : grad) g.push_back({{"step", s}, {"gradient", v}});
  j["sr_gradient"] = g;
  const auto rev = detect_reversal(grad);
  j["reversal"] = rev ? json({rev->first, rev->second}) : json(nullptr);
  emit(a.out, dump(j));
  return code;
}

// ---------------------------------------------------------------------------

struct ProfileArgs {
  std::string log, manifest, out, types = "Q", format = "json";
  std::optional<Step> step;
};

json profile_json(const AlphaProfile& p) {
  const auto peak = peak_position(p);
  return {{"step", p.step},
          {"matrix_type", to_string(p.matrix_type)},
          {"alphas", p.alphas},
          {"spread", alpha_spread(p)},
          {"peak_layer", peak.layer},
          {"peak_relative_depth", peak.relative_depth},
          {"digest", profile_digest(p)}};
}

int cmd_profile(const ProfileArgs& a) {
  const auto log = load_log(a.log, manifest_layers(a.manifest));
  const auto steps = log.steps();
  if (steps.empty()) throw SpectralError(ErrorCode::MalformedLog, "log has no records");
  const Step step = a.step.value_or(steps.back());
  const auto profile = alpha_profile(log, step, single_type(a.types).value_or(MatrixType::Q));
  if (a.format == "csv") {
    std::ostringstream csv;
    csv << "layer,alpha\n";
    for (std::size_t l = 0; l < profile.alphas.size(); ++l) csv << l << ',' << format_real(profile.alphas[l]) << '\n';
    emit(a.out, csv.str());
  } else {
    emit(a.out, dump(profile_json(profile)));
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_scaling(const std::string& in_path, const std::string& out) {
  auto in = open_in(in_path);
  std::string line;
  if (!std::getline(in, line)) throw SpectralError(ErrorCode::MalformedLog, "empty summary file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "layers,delta_alpha,alpha_max,peak_ratio,wave_velocity") {
    throw SpectralError(ErrorCode::MalformedLog, "summary header must be layers,delta_alpha,alpha_max,peak_ratio,wave_velocity");
  }
  std::vector<ModelSummary> models;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 5) throw SpectralError(ErrorCode::MalformedLog, "summary row needs 5 fields: " + line);
    ModelSummary m{parse_real(c[0], "layers"), parse_real(c[1], "delta_alpha"), parse_real(c[2], "alpha_max"),
                   parse_real(c[3], "peak_ratio"), std::nullopt};
    if (!c[4].empty()) m.wave_velocity = parse_real(c[4], "wave_velocity");
    models.push_back(m);
  }
  emit(out, dump(to_json(fit_scaling_laws(models))));
  return 0;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string params, out;
  std::optional<std::uint64_t> seed;
};

int cmd_simulate(const SimulateArgs& a) {
  SimParams p = default_sim_params();
  if (!a.params.empty()) {
    auto in = open_in(a.params);
    try {
      p = sim_params_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
      throw SpectralError(ErrorCode::InvalidConfig, e.what());
    }
  }
  if (a.seed) p.seed = *a.seed;
  for (const auto& w : validate(p)) std::fprintf(stderr, "warning: %s\n", w.c_str());
  const auto traj = simulate(p);
  const fs::path out(a.out);
  std::ostringstream csv;
  write_trajectory_csv(csv, traj);
  write_text(out / "trajectory.csv", csv.str());
  write_text(out / "params.json", dump(to_json(p)));
  const auto report = check_predictions(traj, p);
  write_text(out / "predictions.json", dump(to_json(report)));
  std::printf("transient SR gradient: %s\npersistent alpha gradient: %s\nforward wave: %s\n",
              report.transient_sr_gradient ? "holds" : "fails", report.persistent_alpha_gradient ? "holds" : "fails",
              report.forward_wave ? "holds" : "fails");
  return 0;
}

// ---------------------------------------------------------------------------

struct PruneArgs {
  std::string log, profile, manifest, out, strategy = "zone_aware", types = "Q";
  int k = 0;
  std::optional<int> boundary, layers;
  int min_gap = 2;
  std::optional<std::uint64_t> seed;
  std::optional<Step> step;
};

AlphaProfile read_profile_file(const std::string& path) {
  auto in = open_in(path);
  if (fs::path(path).extension() == ".json") {
    try {
      const auto j = json::parse(in);
      return {j.value("step", Step{0}), parse_matrix_type(j.value("matrix_type", std::string("Q"))).value_or(MatrixType::Q),
              j.at("alphas").get<std::vector<double>>()};
    } catch (const json::exception& e) {
      throw SpectralError(ErrorCode::MalformedLog, e.what());
    }
  }
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "layer,alpha") throw SpectralError(ErrorCode::MalformedLog, "profile header must be layer,alpha");
  AlphaProfile p;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 2) throw SpectralError(ErrorCode::MalformedLog, "profile row needs 2 fields: " + line);
    if (parse_int(c[0], "layer") != static_cast<std::int64_t>(p.alphas.size())) {
      throw SpectralError(ErrorCode::SparseProfile, "profile layers must be 0..L-1 in order");
    }
    p.alphas.push_back(parse_real(c[1], "alpha"));
  }
  return p;
}

void print_plan_table(std::FILE* f, const PrunePlan& plan, const std::optional<AlphaProfile>& profile, int layers,
                      const std::optional<ZoneMap>& zones) {
  std::fprintf(f, "strategy %s, k=%d\n%5s  %-9s  %-15s  %s\n", std::string(to_string(plan.strategy)).c_str(), plan.k,
               "layer", "alpha", "zone", "removed");
  for (int l = 0; l < layers; ++l) {
    const bool removed = std::find(plan.removed_layers.begin(), plan.removed_layers.end(), l) != plan.removed_layers.end();
    const std::string alpha = profile ? format_real(profile->alphas[static_cast<std::size_t>(l)]) : "-";
    const std::string zone = zones ? std::string(to_string(zones->zones[static_cast<std::size_t>(l)])) : "-";
    std::fprintf(f, "%5d  %-9s  %-15s  %s\n", l, alpha.c_str(), zone.c_str(), removed ? "x" : "");
  }
}

int cmd_prune_plan(const PruneArgs& a) {
  const auto strategy = parse_strategy(a.strategy);
  if (!strategy) throw SpectralError(ErrorCode::InvalidConfig, "unknown strategy '" + a.strategy + "'");

  std::optional<AlphaProfile> profile;
  std::optional<std::vector<double>> norms;
  if (!a.profile.empty()) {
    profile = read_profile_file(a.profile);
  } else if (!a.log.empty()) {
    const auto log = load_log(a.log, manifest_layers(a.manifest));
    const Step step = a.step.value_or(log.steps().empty() ? 0 : log.steps().back());
    profile = alpha_profile(log, step, single_type(a.types).value_or(MatrixType::Q));
    norms = layer_frob_norms(log, step);
  }
  int L = 0;
  if (profile) {
    L = profile->layers();
  } else if (a.layers) {
    L = *a.layers;
  } else if (auto ml = manifest_layers(a.manifest)) {
    L = *ml;
  } else {
    throw SpectralError(ErrorCode::MissingInput, "need --profile, --log, --layers or --manifest to know the layer count");
  }

  const int b = a.boundary.value_or(default_boundary(L));
  PrunePlan plan;
  std::optional<ZoneMap> zones;
  if (*strategy == Strategy::ZoneAware) {
    if (!profile) throw SpectralError(ErrorCode::MissingInput, "zone_aware needs an alpha profile");
    zones = classify_zones(L, b);
    plan = zone_aware_select(*profile, a.k, b, a.min_gap);
  } else {
    BaselineInputs in{profile, norms, a.seed};
    plan = baseline_select(*strategy, L, a.k, in);
    if (2 * b < L) zones = classify_zones(L, b);
  }
  const auto text = dump(to_json(plan, profile));
  if (a.out.empty()) {
    std::cout << text;
    print_plan_table(stderr, plan, profile, L, zones);
  } else {
    write_text(a.out, text);
    print_plan_table(stdout, plan, profile, L, zones);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct WarmupArgs {
  std::string log, manifest, out, spectra, types = "Q,K,V,O,MLP_UP,MLP_DOWN", dtype = "f4";
  double scale = 1.0;
  std::uint64_t seed = 0;
};

int cmd_warmup(const WarmupArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  const auto log = load_log(a.log, manifest.layers);
  std::optional<SpectraTable> spectra;
  if (!a.spectra.empty()) {
    auto in = open_in(a.spectra);
    spectra = read_spectra_csv(in);
  }
  if (a.dtype != "f4" && a.dtype != "f8") throw SpectralError(ErrorCode::InvalidConfig, "--dtype must be f4 or f8");
  const auto dtype = a.dtype == "f8" ? NpyDtype::F8 : NpyDtype::F4;

  const fs::path out(a.out);
  fs::create_directories(out);
  json files = json::array();
  for (int l = 0; l < manifest.layers; ++l) {
    for (auto type : parse_types(a.types)) {
      bool present = false;
      for (const auto& r : log.records()) present |= r.coord.layer == l && r.coord.matrix_type == type;
      if (!present) continue;
      const auto [rec, sigma] = target_sigma_from_log(log, l, type, spectra ? &*spectra : nullptr);
      const bool exact = spectra && spectra->count(record_key(rec));
      const auto name = warmup_parameter_name(l, type);
      const WarmupSpec spec{rec.rows, rec.cols, sigma, a.scale, warmup_seed(a.seed, l, type), name};
      write_npy(out / (name + ".npy"), spectral_warmup_matrix(spec), dtype);
      files.push_back({{"file", name + ".npy"},
                       {"layer", l},
                       {"matrix_type", to_string(type)},
                       {"rows", rec.rows},
                       {"cols", rec.cols},
                       {"reference_step", rec.step},
                       {"spectrum_source", exact ? "spectra" : "power_law"},
                       {"seed", spec.seed}});
    }
  }
  const json summary = {{"run_id", manifest.run_id}, {"scale", a.scale}, {"seed", a.seed}, {"dtype", a.dtype}, {"files", files}};
  write_text(out / "warmup.json", dump(summary));
  std::printf("wrote %zu warmup tensors to %s\n", files.size(), out.string().c_str());
  return files.empty() ? 2 : 0;
}

// ---------------------------------------------------------------------------

int cmd_spearman(const std::string& in_path, const std::string& out, std::uint64_t permutations, std::uint64_t seed) {
  auto in = open_in(in_path);
  std::string line;
  if (!std::getline(in, line)) throw SpectralError(ErrorCode::MalformedLog, "empty input");
  std::vector<double> x, y;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 2) throw SpectralError(ErrorCode::MalformedLog, "expected two columns: " + line);
    x.push_back(parse_real(c[0], "x"));
    y.push_back(parse_real(c[1], "y"));
  }
  emit(out, dump(to_json(spearman(x, y, permutations, seed))));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectral analysis of transformer checkpoint series"};
  app.require_subcommand(1);
  std::function<int()> run;

  ScanArgs scan;
  auto* s = app.add_subcommand("scan", "Compute per-matrix spectral metrics for every checkpoint");
  s->add_option("--manifest", scan.manifest, "Run manifest JSON")->required();
  s->add_option("--root", scan.root, "Checkpoint root directory")->required();
  s->add_option("--out", scan.out, "Output directory")->required();
  s->add_option("--types", scan.types, "Comma-separated matrix types")->capture_default_str();
  s->add_option("--tail-fraction", scan.tail_fraction, "Fraction of leading singular values in the alpha fit")->capture_default_str();
  s->add_flag("--spectra", scan.spectra, "Also write raw singular values to spectra.csv");
  s->callback([&] { run = [&] { return cmd_scan(scan); }; });

  WaveArgs wave;
  auto* w = app.add_subcommand("wave", "Compression onsets, wave velocity and SR gradient reversal");
  w->add_option("--log", wave.log, "Spectral log CSV")->required();
  w->add_option("--manifest", wave.manifest, "Manifest (for the layer count)");
  w->add_option("--threshold", wave.threshold, "Onset threshold ratio")->capture_default_str();
  w->add_option("--types", wave.types, "Restrict to one matrix type (default: mean over all)");
  w->add_option("--format", wave.format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  w->add_option("--out", wave.out, "Output file (default stdout)");
  w->callback([&] { run = [&] { return cmd_wave(wave); }; });

  ProfileArgs prof;
  auto* p = app.add_subcommand("profile", "Per-layer alpha profile, spread and peak");
  p->add_option("--log", prof.log, "Spectral log CSV")->required();
  p->add_option("--manifest", prof.manifest, "Manifest (for the layer count)");
  p->add_option("--step", prof.step, "Step (default: last)");
  p->add_option("--types", prof.types, "Matrix type")->capture_default_str();
  p->add_option("--format", prof.format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  p->add_option("--out", prof.out, "Output file (default stdout)");
  p->callback([&] { run = [&] { return cmd_profile(prof); }; });

  std::string scaling_in, scaling_out;
  auto* sc = app.add_subcommand("scaling", "Fit depth scaling laws to per-model summaries");
  sc->add_option("--in", scaling_in, "CSV: layers,delta_alpha,alpha_max,peak_ratio,wave_velocity")->required();
  sc->add_option("--out", scaling_out, "Output JSON (default stdout)");
  sc->callback([&] { run = [&] { return cmd_scaling(scaling_in, scaling_out); }; });

  SimulateArgs sim;
  auto* si = app.add_subcommand("simulate", "Integrate the two-timescale model and check its predictions");
  si->add_option("--params", sim.params, "Parameter JSON (default parameters when omitted)");
  si->add_option("--seed", sim.seed, "Noise seed (overrides the parameter file)");
  si->add_option("--out", sim.out, "Output directory")->required();
  si->callback([&] { run = [&] { return cmd_simulate(sim); }; });

  PruneArgs prune;
  auto* pp = app.add_subcommand("prune-plan", "Choose layers to remove");
  pp->add_option("--log", prune.log, "Spectral log CSV (profile and norms)");
  pp->add_option("--profile", prune.profile, "Profile CSV (layer,alpha) or profile JSON");
  pp->add_option("--manifest", prune.manifest, "Manifest (for the layer count)");
  pp->add_option("--step", prune.step, "Step of the log to use (default: last)");
  pp->add_option("--types", prune.types, "Matrix type for the profile")->capture_default_str();
  pp->add_option("--strategy", prune.strategy, "zone_aware, last_n, random, magnitude, spectral_worst")->capture_default_str();
  pp->add_option("--k", prune.k, "Number of layers to remove")->required();
  pp->add_option("--boundary", prune.boundary, "Boundary size (default 2 for >= 14 layers, else 1)");
  pp->add_option("--min-gap", prune.min_gap, "Minimum index gap between removed layers")->capture_default_str();
  pp->add_option("--seed", prune.seed, "Seed for the random strategy");
  pp->add_option("--layers", prune.layers, "Layer count when no profile is given");
  pp->add_option("--out", prune.out, "Output JSON (default stdout)");
  pp->callback([&] { run = [&] { return cmd_prune_plan(prune); }; });

  WarmupArgs warm;
  auto* wu = app.add_subcommand("warmup", "Synthesize initialization tensors with reference spectra");
  wu->add_option("--log", warm.log, "Reference spectral log CSV")->required();
  wu->add_option("--manifest", warm.manifest, "Manifest of the reference run")->required();
  wu->add_option("--spectra", warm.spectra, "spectra.csv from scan --spectra (exact targets)");
  wu->add_option("--types", warm.types, "Comma-separated matrix types")->capture_default_str();
  wu->add_option("--scale", warm.scale, "Spectrum scale factor")->capture_default_str();
  wu->add_option("--seed", warm.seed, "Seed for the orthogonal factors")->capture_default_str();
  wu->add_option("--dtype", warm.dtype, "f4 or f8")->capture_default_str();
  wu->add_option("--out", warm.out, "Output directory")->required();
  wu->callback([&] { run = [&] { return cmd_warmup(warm); }; });

  std::string sp_in, sp_out;
  std::uint64_t sp_perms = 100000, sp_seed = 0;
  auto* sp = app.add_subcommand("spearman", "Rank correlation with a permutation p-value");
  sp->add_option("--in", sp_in, "Two-column CSV with a header row")->required();
  sp->add_option("--permutations", sp_perms, "Permutation count")->capture_default_str();
  sp->add_option("--seed", sp_seed, "Permutation seed")->capture_default_str();
  sp->add_option("--out", sp_out, "Output JSON (default stdout)");
  sp->callback([&] { run = [&] { return cmd_spearman(sp_in, sp_out, sp_perms, sp_seed); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    return run();
  } catch (const InfeasibleSelectionError& e) {
    std::fprintf(stderr, "error: %s (partial selection:", e.what());
    for (int l : e.partial()) std::fprintf(stderr, " %d", l);
    std::fprintf(stderr, ")\n");
    return exit_code_for(e.code());
  } catch (const SpectralError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
