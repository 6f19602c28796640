#include "fskt/eval_map.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace fskt {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

PRCurve match_detections(std::span<const DetectionRecord> detections,
                         std::span<const GroundTruth> ground_truths, double min_iou) {
  PRCurve curve;
  curve.ground_truths = ground_truths.size();
  curve.order.resize(detections.size());
  std::iota(curve.order.begin(), curve.order.end(), std::size_t{0});
  std::stable_sort(curve.order.begin(), curve.order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].confidence > detections[b].confidence;
  });

  std::vector<bool> claimed(ground_truths.size(), false);
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < curve.order.size(); ++rank) {
    const DetectionRecord& d = detections[curve.order[rank]];
    double best = -1.0;
    std::size_t best_index = 0;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (claimed[g] || ground_truths[g].image != d.image) continue;
      const double o = iou(d.box, ground_truths[g].box);
      if (o > best) {
        best = o;
        best_index = g;
      }
    }
    const bool hit = best >= min_iou;
    if (hit) {
      claimed[best_index] = true;
      ++tp;
    }
    curve.true_positive.push_back(hit);
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    curve.recall.push_back(curve.ground_truths
                               ? static_cast<double>(tp) / static_cast<double>(curve.ground_truths)
                               : 0.0);
  }
  return curve;
}

std::optional<double> average_precision(const PRCurve& curve) {
  if (curve.ground_truths == 0) return std::nullopt;
  const std::size_t n = curve.precision.size();
  // Envelope: precision at rank r becomes the max over ranks >= r.
  std::vector<double> envelope(curve.precision);
  for (std::size_t i = n; i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (curve.recall[i] > prev_recall) {
      ap += (curve.recall[i] - prev_recall) * envelope[i];
      prev_recall = curve.recall[i];
    }
  }
  return ap;
}

namespace {

std::optional<double> mean_of(const std::vector<std::optional<double>>& ap,
                              const std::vector<std::size_t>& members) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i : members) {
    if (!ap[i]) continue;
    total += *ap[i];
    ++count;
  }
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

}  // namespace

EvalReport mean_ap(std::vector<std::optional<double>> ap, const CategorySet& categories) {
  EvalReport r;
  r.categories = categories;
  r.ap = std::move(ap);
  r.ap.resize(categories.size());
  std::vector<std::size_t> all(categories.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  r.novel_mean = mean_of(r.ap, categories.novel_indices());
  r.base_mean = mean_of(r.ap, categories.base_indices());
  r.overall_mean = mean_of(r.ap, all);
  return r;
}

EvalReport evaluate(std::span<const DetectionRecord> detections,
                    std::span<const GroundTruth> ground_truths, const CategorySet& categories,
                    double min_iou) {
  const std::size_t c = categories.size();
  std::vector<std::vector<DetectionRecord>> dets(c);
  std::vector<std::vector<GroundTruth>> gts(c);
  for (const auto& d : detections)
    if (d.category < c) dets[d.category].push_back(d);
  for (const auto& g : ground_truths)
    if (g.category < c) gts[g.category].push_back(g);
  std::vector<std::optional<double>> ap(c);
  for (std::size_t i = 0; i < c; ++i) ap[i] = average_precision(match_detections(dets[i], gts[i], min_iou));
  return mean_ap(std::move(ap), categories);
}

void write_report_csv(std::ostream& out, const EvalReport& report) {
  out << "category,ap,group\n";
  char buf[32];
  for (std::size_t i = 0; i < report.categories.size(); ++i) {
    out << report.categories.name(i) << ',';
    if (report.ap[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", *report.ap[i]);
      out << buf;
    }
    out << ',' << (report.categories.is_novel(i) ? "novel" : "base") << '\n';
  }
}

std::string summary_line(const EvalReport& report) {
  auto fmt = [](const std::optional<double>& v) {
    if (!v) return std::string("na");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return std::string(buf);
  };
  return "novel=" + fmt(report.novel_mean) + " base=" + fmt(report.base_mean) +
         " all=" + fmt(report.overall_mean);
}

}  // namespace fskt
