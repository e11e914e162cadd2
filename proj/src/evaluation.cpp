#include "mulde/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mulde/error.hpp"

namespace mulde {

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw NumericError("roc_auc: NaN score");
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("roc_auc: labels must be 0 or 1");
  }
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double negatives_below = 0.0;
  double pairs = 0.0;  // positive-over-negative wins, ties counted 0.5
  double n_pos = 0.0;
  double n_neg = 0.0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    double group_pos = 0.0;
    double group_neg = 0.0;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) {
      (labels[order[end]] == 1 ? group_pos : group_neg) += 1.0;
      ++end;
    }
    pairs += group_pos * negatives_below + 0.5 * group_pos * group_neg;
    negatives_below += group_neg;
    n_pos += group_pos;
    n_neg += group_neg;
    start = end;
  }
  if (n_pos == 0.0 || n_neg == 0.0) return std::nullopt;
  return pairs / (n_pos * n_neg);
}

std::optional<double> micro_auc(std::span<const LabeledSeries> videos) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& v : videos) {
    if (v.scores.size() != v.labels.size()) {
      throw ShapeError("micro_auc: video '" + v.video_id + "' has mismatched scores and labels");
    }
    scores.insert(scores.end(), v.scores.begin(), v.scores.end());
    labels.insert(labels.end(), v.labels.begin(), v.labels.end());
  }
  return roc_auc(scores, labels);
}

MacroAuc macro_auc(std::span<const LabeledSeries> videos) {
  MacroAuc out;
  double total = 0.0;
  int counted = 0;
  for (const auto& v : videos) {
    const auto auc = roc_auc(v.scores, v.labels);
    out.per_video.emplace_back(v.video_id, auc);
    if (auc) {
      total += *auc;
      ++counted;
    } else {
      out.excluded.push_back(v.video_id);
    }
  }
  if (counted > 0) out.auc = total / counted;
  return out;
}

EvalReport evaluate(std::span<const LabeledSeries> videos) {
  EvalReport report;
  report.micro_auc = micro_auc(videos);
  MacroAuc macro = macro_auc(videos);
  report.macro_auc = macro.auc;
  report.per_video_auc = std::move(macro.per_video);
  report.n_videos_excluded = static_cast<int>(macro.excluded.size());
  return report;
}

nlohmann::json report_to_json(const EvalReport& report) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json per_video = nlohmann::json::array();
  for (const auto& [video, auc] : report.per_video_auc) {
    per_video.push_back({{"video_id", video}, {"auc", opt(auc)}});
  }
  return {{"micro_auc", opt(report.micro_auc)},
          {"macro_auc", opt(report.macro_auc)},
          {"per_video_auc", std::move(per_video)},
          {"n_videos_excluded", report.n_videos_excluded}};
}

std::vector<LabeledSeries> attach_frame_labels(std::span<const ScoreSeries> series,
                                               std::span<const RowIndex> index,
                                               std::size_t* dropped) {
  std::map<std::pair<std::string, std::int64_t>, int> frame_label;
  for (const auto& row : index) {
    if (!row.label) continue;
    auto [it, inserted] = frame_label.try_emplace({row.video_id, row.frame_index}, *row.label);
    if (!inserted) it->second = std::max(it->second, *row.label);
  }
  std::size_t missing = 0;
  std::vector<LabeledSeries> out;
  for (const auto& s : series) {
    LabeledSeries labeled{s.video_id, {}, {}};
    for (std::size_t f = 0; f < s.scores.size(); ++f) {
      const auto it = frame_label.find({s.video_id, static_cast<std::int64_t>(f)});
      if (it == frame_label.end()) {
        ++missing;
        continue;
      }
      labeled.scores.push_back(s.scores[f]);
      labeled.labels.push_back(it->second);
    }
    out.push_back(std::move(labeled));
  }
  if (dropped) *dropped = missing;
  return out;
}

std::vector<SweepPoint> sweep_single_sigma(const EnergyNet& net, const NoiseSchedule& schedule,
                                           const Standardizer& standardizer,
                                           const FeatureSet& features) {
  if (!features.has_index()) throw UsageError("sweep_single_sigma: a labeled index is required");
  const Eigen::MatrixXd energies =
      build_multiscale_vectors(net, standardizer.apply(features), schedule);
  const auto counts = infer_frame_counts(features.index);
  std::vector<SweepPoint> out;
  for (std::size_t j = 0; j < schedule.scales.size(); ++j) {
    const Eigen::VectorXd col = energies.col(static_cast<Eigen::Index>(j));
    const auto frames = pool_objects_to_frames({col.data(), static_cast<std::size_t>(col.size())},
                                               features.index, counts);
    const auto labeled = attach_frame_labels(frames, features.index);
    out.push_back({schedule.scales[j], micro_auc(labeled)});
  }
  return out;
}

}  // namespace mulde

namespace mulde {
namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) return std::nullopt;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace mulde
