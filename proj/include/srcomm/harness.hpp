// Experiment orchestration: run directories, resume, interval sweeps,
// pretraining chains, metrics reading and learning-curve plots.
//
// Run directory layout:
//   config.txt          resolved configuration plus version stamp
//   metrics.csv         windowed metrics, append-only
//   checkpoints/        periodic checkpoints, ckpt_<batches>.json
//   final.json          checkpoint at the end of training
#pragma once

#include "srcomm/checkpoint.hpp"
#include "srcomm/config.hpp"
#include "srcomm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef SRCOMM_GIT_REVISION
#define SRCOMM_GIT_REVISION "unknown"
#endif

namespace srcomm {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutputRootVariable = "SRCOMM_OUTPUT_ROOT";

inline std::string version_stamp() { return std::string("srcomm ") + kVersion + " (" + SRCOMM_GIT_REVISION + ")"; }

/// SRCOMM_OUTPUT_ROOT when set, otherwise the configured output directory.
inline fs::path output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kOutputRootVariable); env && *env) return env;
  return cfg.output_dir;
}

inline std::string sanitize(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  return s;
}

/// Fresh directory named <label>_<env>_<timestamp>_s<seed>; never reuses one.
inline fs::path make_run_dir(const fs::path& root, const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y%m%d-%H%M%S");
  const std::string base = sanitize(cfg.resolved_label()) + "_" + std::string(family_name(cfg.env)) + "_" +
                           stamp.str() + "_s" + std::to_string(seed);
  fs::create_directories(root);
  fs::path dir = root / base;
  for (int i = 1; !fs::create_directory(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  return dir;
}

struct RunResult {
  fs::path dir;
  std::uint64_t seed = 0;
  long long frames = 0;
  std::vector<MetricsRow> rows;
};

inline void write_config_snapshot(const fs::path& dir, const ExperimentConfig& cfg, std::uint64_t seed) {
  std::ofstream f(dir / "config.txt");
  f << "# " << version_stamp() << "\n# run seed " << seed << "\n" << to_config_text(cfg);
}

inline std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  if (fs::exists(dir / "final.json")) return dir / "final.json";
  std::optional<fs::path> best;
  long long best_batches = -1;
  if (fs::exists(dir / "checkpoints"))
    for (const auto& e : fs::directory_iterator(dir / "checkpoints")) {
      const std::string name = e.path().filename().string();
      if (name.rfind("ckpt_", 0) != 0 || e.path().extension() != ".json") continue;
      const long long b = std::stoll(name.substr(5));
      if (b > best_batches) {
        best_batches = b;
        best = e.path();
      }
    }
  return best;
}

namespace detail {

template <typename T>
RunResult drive(Trainer<T>& trainer, const fs::path& dir, std::ostream* log) {
  RunResult res;
  res.dir = dir;
  res.seed = trainer.seed();
  MetricsWriter writer(dir / "metrics.csv");
  TrainHooks hooks;
  hooks.on_window = [&](const MetricsRow& r) {
    writer.write(r);
    res.rows.push_back(r);
    if (log)
      *log << "[" << r.label << " s" << r.seed << "] frames " << r.frames << "  episode length "
           << r.mean_episode_length << "  success " << r.success_rate << std::endl;
  };
  hooks.on_checkpoint = [&](const json& ck, bool final) {
    if (final) {
      write_json_file(dir / "final.json", ck);
    } else {
      write_json_file(dir / "checkpoints" / ("ckpt_" + std::to_string(ck.at("batches").get<long long>()) + ".json"),
                      ck);
    }
  };
  trainer.train(hooks);
  res.frames = trainer.frames();
  return res;
}

}  // namespace detail

/// Trains one seed of a configuration in a fresh run directory.
inline RunResult run(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream* log = &std::cerr) {
  cfg.validate();
  std::optional<json> pretrained;
  if (!cfg.pretrained.empty()) {
    if (!fs::exists(cfg.pretrained)) throw std::invalid_argument("pretrained checkpoint not found: " + cfg.pretrained);
    pretrained = read_json_file(cfg.pretrained);
    check_compatible(checkpoint_info(*pretrained), cfg.resolved_model(), cfg.mode);
  }
  Trainer<float> trainer(cfg, seed);
  if (pretrained) trainer.restore(*pretrained, false);
  const fs::path dir = make_run_dir(output_root(cfg), cfg, seed);
  write_config_snapshot(dir, cfg, seed);
  if (log) *log << "run directory " << dir.string() << std::endl;
  return detail::drive(trainer, dir, log);
}

/// Trains every configured seed.
inline std::vector<RunResult> run_all_seeds(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
  std::vector<RunResult> out;
  for (auto seed : cfg.seeds) out.push_back(run(cfg, seed, log));
  return out;
}

inline std::uint64_t snapshot_seed(const fs::path& dir) {
  std::ifstream f(dir / "config.txt");
  std::string line;
  while (std::getline(f, line))
    if (line.rfind("# run seed ", 0) == 0) return std::stoull(line.substr(11));
  throw std::invalid_argument("run directory has no seed stamp: " + dir.string());
}

/// Continues a run from its latest checkpoint in the same directory. A
/// positive `frame_budget` replaces the configured budget.
inline RunResult resume(const fs::path& dir, long long frame_budget = 0, std::ostream* log = &std::cerr) {
  ExperimentConfig cfg = load_config_file((dir / "config.txt").string());
  if (frame_budget > 0) cfg.frame_budget = frame_budget;
  const auto ck = latest_checkpoint(dir);
  if (!ck) throw std::invalid_argument("no checkpoint to resume in " + dir.string());
  const std::uint64_t seed = snapshot_seed(dir);
  Trainer<float> trainer(cfg, seed);
  trainer.restore(read_json_file(*ck), true);
  fs::create_directories(dir / "checkpoints");
  if (fs::exists(dir / "final.json")) fs::rename(dir / "final.json", dir / "checkpoints" / "resumed_from.json");
  write_config_snapshot(dir, cfg, seed);
  return detail::drive(trainer, dir, log);
}

struct SweepSpec {
  std::vector<int> intervals{1, 2, 4, 8, 64};
  bool baselines = true;  // add no-communication and archimedean runs
  ExperimentConfig base;

  void validate() const {
    if (intervals.empty() && !baselines) throw std::invalid_argument("empty sweep");
    std::vector<int> sorted = intervals;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("sweep intervals must be distinct");
    for (int n : intervals)
      if (n < 1) throw std::invalid_argument("sweep intervals must be positive");
    base.validate();
  }

  std::vector<ExperimentConfig> expand() const {
    validate();
    std::vector<ExperimentConfig> out;
    for (int n : intervals) {
      ExperimentConfig c = base;
      c.mode = BaselineMode::Communicating;
      c.channel.interval_n = n;
      c.label.clear();
      out.push_back(c);
    }
    if (baselines)
      for (BaselineMode m : {BaselineMode::NoCommunication, BaselineMode::ArchimedeanReceiver}) {
        ExperimentConfig c = base;
        c.mode = m;
        c.channel = ChannelConfig{};
        c.label.clear();
        out.push_back(c);
      }
    return out;
  }
};

inline std::vector<RunResult> sweep(const SweepSpec& spec, std::ostream* log = &std::cerr) {
  std::vector<RunResult> out;
  for (const auto& cfg : spec.expand())
    for (auto r : run_all_seeds(cfg, log)) out.push_back(std::move(r));
  return out;
}

struct TransferResult {
  RunResult pretrain;
  RunResult target;
};

/// Trains on the pretraining environment, then starts the target run from its
/// final checkpoint. The target curve is labeled "<label> pretrained".
inline std::vector<TransferResult> transfer(const ExperimentConfig& pretrain, const ExperimentConfig& target,
                                            std::ostream* log = &std::cerr) {
  if (pretrain.mode != target.mode) throw std::invalid_argument("pretraining and target modes differ");
  ModelConfig a = pretrain.resolved_model(), b = target.resolved_model();
  a.channel.interval_n = b.channel.interval_n = 1;
  a.symbol_gain = b.symbol_gain = 1.0;
  if (!(a == b)) throw std::invalid_argument("pretraining and target model shapes differ");
  std::vector<TransferResult> out;
  for (std::size_t i = 0; i < pretrain.seeds.size(); ++i) {
    TransferResult tr;
    tr.pretrain = run(pretrain, pretrain.seeds[i], log);
    ExperimentConfig t = target;
    t.pretrained = (tr.pretrain.dir / "final.json").string();
    const std::uint64_t seed = i < target.seeds.size() ? target.seeds[i] : pretrain.seeds[i];
    tr.target = run(t, seed, log);
    out.push_back(std::move(tr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics files
// ---------------------------------------------------------------------------

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != kMetricsHeader)
    throw std::invalid_argument("unexpected metrics header in " + path.string());
  std::vector<MetricsRow> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> col;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) col.push_back(cell);
    if (col.size() != 14) throw std::invalid_argument("malformed metrics row in " + path.string());
    auto num = [](const std::string& s) {
      return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
    };
    MetricsRow r;
    r.frames = std::stoll(col[0]);
    r.batches = std::stoll(col[1]);
    r.window_batches = std::stoi(col[2]);
    r.episodes = std::stoi(col[3]);
    r.mean_episode_length = num(col[4]);
    r.success_rate = num(col[5]);
    r.receiver.policy_loss = num(col[6]);
    r.receiver.value_loss = num(col[7]);
    r.receiver.entropy = num(col[8]);
    r.sender.policy_loss = num(col[9]);
    r.sender.value_loss = num(col[10]);
    r.sender.entropy = num(col[11]);
    r.label = col[12];
    r.seed = std::stoull(col[13]);
    out.push_back(r);
  }
  return out;
}

/// Episode-weighted mean length over the last `windows` rows that span a
/// full window. NaN when there is no such row.
inline double plateau_length(const std::vector<MetricsRow>& rows, int full_window, int windows) {
  double sum = 0.0;
  long long eps = 0;
  int used = 0;
  for (auto it = rows.rbegin(); it != rows.rend() && used < windows; ++it) {
    if (it->window_batches != full_window || it->episodes == 0) continue;
    sum += it->mean_episode_length * it->episodes;
    eps += it->episodes;
    ++used;
  }
  return eps > 0 ? sum / static_cast<double>(eps) : std::numeric_limits<double>::quiet_NaN();
}

/// First frame count at which the windowed length is at or below `threshold`.
inline std::optional<long long> frames_to_threshold(const std::vector<MetricsRow>& rows, double threshold) {
  for (const auto& r : rows)
    if (r.episodes > 0 && r.mean_episode_length <= threshold) return r.frames;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Plot
// ---------------------------------------------------------------------------

struct Curve {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (frames, mean episode length)
};

/// Curves from run directories or metrics CSV files.
inline std::vector<Curve> load_curves(const std::vector<fs::path>& inputs) {
  std::vector<Curve> out;
  for (const auto& in : inputs) {
    const fs::path csv = fs::is_directory(in) ? in / "metrics.csv" : in;
    const auto rows = read_metrics_csv(csv);
    Curve c;
    for (const auto& r : rows)
      if (r.episodes > 0 && r.frames > 0 && r.mean_episode_length > 0)
        c.points.emplace_back(static_cast<double>(r.frames), r.mean_episode_length);
    if (!rows.empty()) c.label = rows.front().label + " s" + std::to_string(rows.front().seed);
    if (!c.points.empty()) out.push_back(std::move(c));
  }
  return out;
}

/// Log-log SVG of windowed mean episode length against frames.
inline std::string render_learning_curves_svg(const std::vector<Curve>& curves) {
  if (curves.empty()) throw std::invalid_argument("no metrics data to plot");
  double x0 = std::numeric_limits<double>::max(), x1 = 0, y0 = std::numeric_limits<double>::max(), y1 = 0;
  for (const auto& c : curves)
    for (auto [x, y] : c.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  double lx0 = std::floor(std::log10(x0)), lx1 = std::ceil(std::log10(x1));
  double ly0 = std::floor(std::log10(y0) * 4) / 4, ly1 = std::ceil(std::log10(y1) * 4) / 4;
  if (lx1 <= lx0) lx1 = lx0 + 1;
  if (ly1 <= ly0) ly1 = ly0 + 0.25;
  const double W = 720, H = 480, ml = 70, mr = 190, mt = 20, mb = 50;
  const double pw = W - ml - mr, ph = H - mt - mb;
  auto px = [&](double x) { return ml + (std::log10(x) - lx0) / (lx1 - lx0) * pw; };
  auto py = [&](double y) { return mt + (1 - (std::log10(y) - ly0) / (ly1 - ly0)) * ph; };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream o;
  o << std::fixed << std::setprecision(1);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double e = lx0; e <= lx1 + 1e-9; e += 1) {
    const double x = ml + (e - lx0) / (lx1 - lx0) * pw;
    o << "<line x1=\"" << x << "\" y1=\"" << mt << "\" x2=\"" << x << "\" y2=\"" << mt + ph
      << "\" stroke=\"#ddd\"/>\n<text x=\"" << x << "\" y=\"" << mt + ph + 16 << "\" text-anchor=\"middle\">1e"
      << static_cast<int>(e) << "</text>\n";
  }
  for (double e = ly0; e <= ly1 + 1e-9; e += 0.25) {
    const double y = mt + (1 - (e - ly0) / (ly1 - ly0)) * ph;
    o << "<line x1=\"" << ml << "\" y1=\"" << y << "\" x2=\"" << ml + pw << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n<text x=\"" << ml - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
      << std::setprecision(3) << std::pow(10.0, e) << std::setprecision(1) << "</text>\n";
  }
  o << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">frames</text>\n";
  o << "<text transform=\"translate(16," << mt + ph / 2
    << ") rotate(-90)\" text-anchor=\"middle\">mean episode length</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* col = colors[i % 10];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : curves[i].points) o << px(x) << "," << py(y) << " ";
    o << "\"/>\n";
    const double ly = mt + 10 + static_cast<double>(i) * 18;
    o << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n<text x=\"" << ml + pw + 38 << "\" y=\"" << ly + 4
      << "\">" << curves[i].label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace srcomm
