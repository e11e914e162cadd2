#include "mulde/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "mulde/datasets.hpp"
#include "mulde/energy_net.hpp"
#include "mulde/error.hpp"
#include "mulde/evaluation.hpp"
#include "mulde/gmm.hpp"
#include "mulde/io.hpp"
#include "mulde/pipeline.hpp"
#include "mulde/trainer.hpp"

namespace mulde::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  std::string features;
  std::string index;
  std::string config;
  std::string model;
  std::string gmm;
  std::string out;
  int k = 5;
  double smooth_sigma = 5.0;
  std::string mode = "gmm";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string spec;
  std::size_t n = 0;
  std::vector<double> sigma;
};

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

// --- Artifacts --------------------------------------------------------------

struct Model {
  EnergyNet net;
  Standardizer standardizer;
  TrainConfig config;
};

Model load_model(const std::string& path) {
  const json doc = io::read_json(path);
  try {
    return {net_from_json(doc), standardizer_from_json(doc.at("standardizer")),
            config_from_json(doc.at("config"))};
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
}

NoiseSchedule schedule_of(const TrainConfig& config) {
  return NoiseSchedule::linear(config.sigma_low, config.sigma_high, config.L);
}

struct GmmArtifact {
  GaussianMixture gmm;
  std::vector<ScoreStats> scale_stats;
};

GmmArtifact load_gmm(const std::string& path) {
  const json doc = io::read_json(path);
  try {
    GmmArtifact a{gmm_from_json(doc), {}};
    for (const auto& s : doc.at("scale_stats")) {
      a.scale_stats.push_back({s.at("mean").get<double>(), s.at("std").get<double>()});
    }
    return a;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
}

json stats_to_json(const ScoreStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

fs::path loss_csv_path(const fs::path& model_path) {
  fs::path p = model_path;
  p.replace_extension(".loss.csv");
  return p;
}

// Scores CSV: video_id,frame_index,score_raw,score_smoothed
struct ScoreRow {
  std::string video_id;
  std::int64_t frame_index;
  double raw;
  double smoothed;
};

std::vector<ScoreRow> parse_scores_csv(const std::string& text) {
  std::vector<ScoreRow> rows;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t line_start = pos;
    pos = end + 1;
    if (header) {
      if (line != "video_id,frame_index,score_raw,score_smoothed") {
        throw FormatError("scores: unexpected header", line_start);
      }
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() != 4) throw FormatError("scores: expected 4 fields", line_start);
    ScoreRow r;
    r.video_id = fields[0];
    const auto& fi = fields[1];
    if (std::from_chars(fi.data(), fi.data() + fi.size(), r.frame_index).ec != std::errc{}) {
      throw FormatError("scores: bad frame_index", line_start);
    }
    try {
      r.raw = std::stod(fields[2]);
      r.smoothed = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw FormatError("scores: bad score value", line_start);
    }
    rows.push_back(std::move(r));
  }
  if (header) throw FormatError("scores: missing header", 0);
  return rows;
}

// --- Verbs ------------------------------------------------------------------

int do_train(const Options& o, std::ostream& out) {
  TrainConfig config;
  if (!o.config.empty()) config = config_from_json(io::read_json(o.config));
  if (o.seed) config.seed = *o.seed;
  config.validate();

  FeatureSet all = load_feature_set(o.features, opt_path(o.index));
  const FeatureSet normal = all.normal_only();
  if (normal.size() == 0) throw UsageError("train: no normal training rows");
  const Standardizer standardizer = fit_standardizer(normal);
  const FeatureSet z = standardizer.apply(normal);

  EnergyNet net = EnergyNet::initialized(normal.dim, config.hidden_widths,
                                         {config.sigma_low, config.sigma_high}, config.seed);
  TrainResult result = train(z, std::move(net), config);

  json doc = net_to_json(result.net);
  doc["standardizer"] = standardizer_to_json(standardizer);
  doc["config"] = config_to_json(config);

  std::string loss = "epoch,mean_loss\n";
  for (std::size_t e = 0; e < result.history.size(); ++e) {
    loss += std::to_string(e + 1) + "," + fmt(result.history[e]) + "\n";
  }
  io::atomic_write(loss_csv_path(o.out), loss);
  io::write_json(o.out, doc);
  out << "trained " << result.history.size() << " epochs on " << normal.size()
      << " rows; final loss " << (result.history.empty() ? 0.0 : result.history.back()) << "\n";
  return 0;
}

int do_fit_gmm(const Options& o, std::ostream& out) {
  if (o.k < 1) throw UsageError("--k must be at least 1");
  const Model m = load_model(o.model);
  const std::uint64_t seed = o.seed.value_or(0);
  const FeatureSet normal = load_feature_set(o.features, opt_path(o.index)).normal_only();
  const NoiseSchedule schedule = schedule_of(m.config);
  const Eigen::MatrixXd vectors =
      build_multiscale_vectors(m.net, m.standardizer.apply(normal), schedule);
  const EmFit fit = fit_em(vectors, o.k, 500, 1e-7, -1.0, seed);

  const Eigen::VectorXd nll = fit.mixture.nll_rows(vectors);
  json doc = gmm_to_json(fit.mixture);
  doc["schedule"] = {{"sigma_low", schedule.sigma_low},
                     {"sigma_high", schedule.sigma_high},
                     {"L", schedule.L},
                     {"scales", schedule.scales}};
  json stats = json::array();
  for (const auto& s : fit_column_stats(vectors)) stats.push_back(stats_to_json(s));
  doc["scale_stats"] = stats;
  doc["training_score_stats"] =
      stats_to_json(fit_score_stats(std::span<const double>(nll.data(), static_cast<std::size_t>(nll.size()))));
  doc["em"] = {{"iterations", fit.trace.log_likelihood.size()},
               {"converged", fit.trace.converged},
               {"events", fit.trace.events}};
  doc["config"] = {{"k", o.k}, {"seed", seed}, {"max_iters", 500}, {"tol", 1e-7},
                   {"model", config_to_json(m.config)}};
  io::write_json(o.out, doc);
  out << "fitted " << o.k << "-component mixture on " << normal.size() << " rows\n";
  return 0;
}

int do_score(const Options& o, std::ostream& out) {
  if (!(o.smooth_sigma >= 0.0)) throw UsageError("--smooth-sigma must be nonnegative");
  const Model m = load_model(o.model);
  const GmmArtifact g = load_gmm(o.gmm);
  const FeatureSet features = load_feature_set(o.features, fs::path(o.index));
  const NoiseSchedule schedule = schedule_of(m.config);
  if (g.gmm.dim() != schedule.L) throw ShapeError("score: mixture and model scale counts differ");

  std::vector<double> row_scores;
  if (o.mode == "gmm") {
    row_scores = score_rows(m.net, g.gmm, schedule, m.standardizer, features);
  } else {
    const Eigen::MatrixXd vectors =
        build_multiscale_vectors(m.net, m.standardizer.apply(features), schedule);
    row_scores = pool_multiscale(vectors, g.scale_stats, parse_pool_mode(o.mode));
  }
  const auto frames = pool_objects_to_frames(row_scores, features.index, infer_frame_counts(features.index));

  std::string csv = "video_id,frame_index,score_raw,score_smoothed\n";
  std::size_t n_frames = 0;
  for (const auto& series : frames) {
    const ScoreSeries smoothed = smooth(series, o.smooth_sigma);
    for (std::size_t f = 0; f < series.scores.size(); ++f) {
      csv += series.video_id + "," + std::to_string(f) + "," + fmt(series.scores[f]) + "," +
             fmt(smoothed.scores[f]) + "\n";
    }
    n_frames += series.scores.size();
  }
  io::atomic_write(o.out, csv);
  out << "scored " << features.size() << " rows into " << n_frames << " frames of " << frames.size()
      << " videos\n";
  return 0;
}

int do_eval(const Options& o, std::ostream& out) {
  const auto rows = parse_scores_csv(io::read_file(o.features));
  const auto index = read_index(o.index);

  std::map<std::string, std::vector<std::pair<std::int64_t, double>>> by_video;
  for (const auto& r : rows) by_video[r.video_id].push_back({r.frame_index, r.smoothed});
  std::vector<ScoreSeries> series;
  for (auto& [video, frames] : by_video) {
    std::sort(frames.begin(), frames.end());
    ScoreSeries s;
    s.video_id = video;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].first != static_cast<std::int64_t>(i)) {
        throw FormatError("scores: frames of " + video + " are not 0..n-1", 0);
      }
      s.scores.push_back(frames[i].second);
    }
    series.push_back(std::move(s));
  }
  std::size_t dropped = 0;
  const auto labeled = attach_frame_labels(series, index, &dropped);
  const EvalReport report = evaluate(labeled);
  json doc = report_to_json(report);
  doc["n_frames_unlabeled"] = dropped;
  doc["config"] = {{"scores", o.features}, {"index", o.index}, {"score_column", "score_smoothed"}};
  io::write_json(o.out, doc);
  out << "micro AUC " << (report.micro_auc ? fmt(*report.micro_auc) : "undefined") << ", macro AUC "
      << (report.macro_auc ? fmt(*report.macro_auc) : "undefined") << "\n";
  return 0;
}

int do_synth(const Options& o, std::ostream& out) {
  const MixtureSpec spec = mixture_from_json(io::read_json(o.spec));
  const FeatureSet set = synth_labeled(spec, o.n, o.seed.value_or(0));
  save_feature_set(set, o.out, opt_path(o.index));
  out << "wrote " << set.size() << " rows of dimension " << set.dim << "\n";
  return 0;
}

int do_oracle_check(const Options& o, std::ostream& out) {
  const MixtureSpec raw_spec = mixture_from_json(io::read_json(o.spec));
  const Model m = load_model(o.model);
  if (raw_spec.dim() != m.net.feature_dim()) {
    throw ShapeError("oracle-check: spec dimension " + std::to_string(raw_spec.dim()) +
                     " differs from model dimension " + std::to_string(m.net.feature_dim()));
  }
  const MixtureSpec spec = raw_spec.standardized(m.standardizer.mean, m.standardizer.std);
  const std::vector<double> sigmas = o.sigma.empty() ? schedule_of(m.config).scales : o.sigma;

  // Evaluation points in raw coordinates: a 41x41 grid over the anomaly box
  // for 2-D specs, otherwise --n mixture draws.
  Eigen::MatrixXd raw;
  if (raw_spec.dim() == 2) {
    const AnomalySpec box = raw_spec.anomaly.value_or(AnomalySpec{});
    constexpr int kGrid = 41;
    raw.resize(kGrid * kGrid, 2);
    for (int i = 0; i < kGrid; ++i) {
      for (int j = 0; j < kGrid; ++j) {
        raw(i * kGrid + j, 0) = box.low + (box.high - box.low) * i / (kGrid - 1);
        raw(i * kGrid + j, 1) = box.low + (box.high - box.low) * j / (kGrid - 1);
      }
    }
  } else {
    raw = synth_mixture(raw_spec, o.n > 0 ? o.n : 1681, o.seed.value_or(0)).rows;
  }
  const Eigen::MatrixXd zs = m.standardizer.apply_rows(raw).transpose();  // d x N
  const auto n = static_cast<std::size_t>(zs.cols());

  json per_sigma = json::array();
  for (double sigma : sigmas) {
    const std::vector<double> col_sigmas(n, sigma);
    const Eigen::RowVectorXd f = m.net.forward_batch(zs, col_sigmas);
    const Eigen::MatrixXd grad = m.net.input_gradient_batch(zs, col_sigmas);
    std::vector<double> learned(n), oracle(n), cosines(n), mag_err(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<Eigen::Index>(i);
      const Eigen::VectorXd z = zs.col(c);
      learned[i] = f(c);
      oracle[i] = oracle_neg_log_density(spec, sigma, z);
      const Eigen::VectorXd target = oracle_score(spec, sigma, z);
      const Eigen::VectorXd g = grad.col(c);
      const double denom = g.norm() * target.norm();
      cosines[i] = denom > 0.0 ? g.dot(target) / denom : 0.0;
      mag_err[i] = target.norm() > 0.0 ? std::abs(g.norm() - target.norm()) / target.norm() : 0.0;
    }
    auto median = [](std::vector<double> v) {
      if (v.empty()) return std::nan("");
      std::sort(v.begin(), v.end());
      const std::size_t h = v.size() / 2;
      return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
    };
    const auto rho = spearman(learned, oracle);
    per_sigma.push_back({{"sigma", sigma},
                         {"spearman", rho ? json(*rho) : json(nullptr)},
                         {"median_gradient_cosine", median(cosines)},
                         {"median_relative_magnitude_error", median(mag_err)}});
    out << "sigma " << fmt(sigma) << ": spearman " << (rho ? fmt(*rho) : "undefined")
        << ", median cosine " << fmt(median(cosines)) << "\n";
  }
  json doc = {{"n_points", n},
              {"per_sigma", per_sigma},
              {"config", {{"spec", o.spec}, {"model", o.model}, {"seed", o.seed.value_or(0)}}}};
  io::write_json(o.out, doc);
  return 0;
}

int do_sweep_sigma(const Options& o, std::ostream& out) {
  const Model m = load_model(o.model);
  const FeatureSet features = load_feature_set(o.features, fs::path(o.index));
  const auto points = sweep_single_sigma(m.net, schedule_of(m.config), m.standardizer, features);
  std::string csv = "sigma,micro_auc\n";
  for (const auto& p : points) {
    csv += fmt(p.sigma) + "," + (p.micro_auc ? fmt(*p.micro_auc) : "nan") + "\n";
  }
  io::atomic_write(o.out, csv);
  out << "swept " << points.size() << " noise scales\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Multiscale log-density anomaly detection", "mulde"};
  app.require_subcommand(1);

  auto seed_opt = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Seed for all randomness"); };
  auto threads_opt = [&](CLI::App* c) {
    c->add_option("--threads", o.threads, "Thread cap")->check(CLI::PositiveNumber);
  };

  auto* train = app.add_subcommand("train", "Train the energy network on normal features");
  train->add_option("--features", o.features)->required();
  train->add_option("--index", o.index);
  train->add_option("--config", o.config);
  train->add_option("--out", o.out, "Model JSON")->required();
  seed_opt(train);
  threads_opt(train);

  auto* fit = app.add_subcommand("fit-gmm", "Fit the mixture over multiscale energies");
  fit->add_option("--model", o.model)->required();
  fit->add_option("--features", o.features)->required();
  fit->add_option("--index", o.index);
  fit->add_option("--k", o.k);
  fit->add_option("--out", o.out)->required();
  seed_opt(fit);
  threads_opt(fit);

  auto* score = app.add_subcommand("score", "Per-frame anomaly scores");
  score->add_option("--model", o.model)->required();
  score->add_option("--gmm", o.gmm)->required();
  score->add_option("--features", o.features)->required();
  score->add_option("--index", o.index)->required();
  score->add_option("--smooth-sigma", o.smooth_sigma);
  score->add_option("--mode", o.mode)->check(CLI::IsMember({"gmm", "max", "avg", "median"}));
  score->add_option("--out", o.out)->required();
  threads_opt(score);

  auto* eval = app.add_subcommand("eval", "Micro and macro AUC of a scores CSV");
  eval->add_option("--features", o.features, "Scores CSV written by score")->required();
  eval->add_option("--index", o.index)->required();
  eval->add_option("--out", o.out)->required();

  auto* synth = app.add_subcommand("synth", "Sample features from a mixture spec");
  synth->add_option("--spec", o.spec)->required();
  synth->add_option("--n", o.n)->required();
  synth->add_option("--out", o.out)->required();
  synth->add_option("--index", o.index);
  seed_opt(synth);

  auto* oracle = app.add_subcommand("oracle-check", "Compare learned energies with the exact mixture");
  oracle->add_option("--spec", o.spec)->required();
  oracle->add_option("--model", o.model)->required();
  oracle->add_option("--out", o.out)->required();
  oracle->add_option("--n", o.n);
  oracle->add_option("--sigma", o.sigma)->check(CLI::PositiveNumber);
  seed_opt(oracle);
  threads_opt(oracle);

  auto* sweep = app.add_subcommand("sweep-sigma", "Single-scale AUC per noise scale");
  sweep->add_option("--model", o.model)->required();
  sweep->add_option("--features", o.features)->required();
  sweep->add_option("--index", o.index)->required();
  sweep->add_option("--out", o.out)->required();
  threads_opt(sweep);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error:" << category_tag(ErrorCategory::kUsage) << ": " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::kUsage);
  }

  Eigen::setNbThreads(o.threads);
  try {
    if (*train) return do_train(o, out);
    if (*fit) return do_fit_gmm(o, out);
    if (*score) return do_score(o, out);
    if (*eval) return do_eval(o, out);
    if (*synth) return do_synth(o, out);
    if (*oracle) return do_oracle_check(o, out);
    if (*sweep) return do_sweep_sigma(o, out);
    throw UsageError("no command");
  } catch (const Error& e) {
    err << "error:" << category_tag(e.category()) << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::bad_alloc&) {
    err << "error:" << category_tag(ErrorCategory::kNumeric) << ": out of memory\n";
    return static_cast<int>(ErrorCategory::kNumeric);
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error:" << category_tag(ErrorCategory::kIo) << ": " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::kIo);
  }
}

}  // namespace mulde::cli
