#pragma once

// VOC-style detection evaluation: IoU, greedy matching, all-points AP.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fskt/knowledge_graph.hpp"
#include "fskt/types.hpp"

namespace fskt {

// Continuous-area intersection over union.
double iou(const Box& a, const Box& b);

struct DetectionRecord {
  std::size_t image = 0;
  std::size_t category = 0;
  double confidence = 0.0;
  Box box;
};

struct GroundTruth {
  std::size_t image = 0;
  std::size_t category = 0;
  Box box;
};

struct PRCurve {
  std::vector<std::size_t> order;  // detection indices by descending confidence
  std::vector<bool> true_positive; // per rank
  std::vector<double> precision;   // per rank
  std::vector<double> recall;      // per rank
  std::size_t ground_truths = 0;
};

// Detections and ground truths of a single category. Each detection, in
// descending confidence (ties in input order), claims the unclaimed ground
// truth of its image with the highest IoU when that IoU is >= min_iou.
PRCurve match_detections(std::span<const DetectionRecord> detections,
                         std::span<const GroundTruth> ground_truths, double min_iou = 0.5);

// Area under the monotone precision envelope. nullopt without ground truths.
std::optional<double> average_precision(const PRCurve& curve);

struct EvalReport {
  CategorySet categories;
  std::vector<std::optional<double>> ap;
  std::optional<double> novel_mean;
  std::optional<double> base_mean;
  std::optional<double> overall_mean;
};

// Arithmetic means over the present APs of each group.
EvalReport mean_ap(std::vector<std::optional<double>> ap, const CategorySet& categories);

// Per-category matching and AP over detections of any category.
EvalReport evaluate(std::span<const DetectionRecord> detections,
                    std::span<const GroundTruth> ground_truths, const CategorySet& categories,
                    double min_iou = 0.5);

// Rows `category,ap,group`; absent APs are left empty.
void write_report_csv(std::ostream& out, const EvalReport& report);
// `novel=0.1234 base=0.5678 all=0.4567` (`na` for absent means).
std::string summary_line(const EvalReport& report);

}  // namespace fskt
