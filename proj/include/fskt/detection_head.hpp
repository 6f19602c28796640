#pragma once

// Prototype-reweighted predictor heads: one match/background classifier and
// one box regressor shared by every category branch.

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "fskt/tensor.hpp"
#include "fskt/types.hpp"

namespace fskt {

using Deltas = std::array<double, 4>;  // dx, dy, dw, dh

inline constexpr int kBackground = -1;
inline constexpr int kIgnore = -2;

// A batch of RoIs. label >= 0 is a foreground category index, kBackground
// marks background and kIgnore leaves the RoI out of every loss.
struct RoIBatch {
  Tensor features;  // N x F
  std::vector<Box> proposals;
  std::vector<int> labels;
  std::vector<std::optional<Deltas>> targets;

  std::size_t size() const { return labels.size(); }
};

// Concatenates batches row-wise.
RoIBatch concat(std::span<const RoIBatch> parts);

struct PredictorHead {
  Tensor cls_w;  // 2 x F, row 0 = match, row 1 = background
  Tensor cls_b;  // 2 x 1
  Tensor reg_w;  // 4 x F
  Tensor reg_b;  // 4 x 1
  double threshold = 0.5;

  static PredictorHead create(std::size_t f, Rng& rng, double threshold = 0.5);
  std::vector<NamedParameter> parameters() const;
};

// R_i = R (.) p_i for every prototype row; result C x F.
Tensor reweight(Tape& tape, const Tensor& roi, const Tensor& prototypes);

struct HeadOutputs {
  Tensor match;                   // N x C logits
  Tensor background;              // N x C logits
  std::array<Tensor, 4> deltas;   // each N x C
};

// Logits and deltas for every (RoI, category branch) pair.
HeadOutputs head_forward(Tape& tape, const Tensor& features, const Tensor& prototypes,
                         const PredictorHead& head);

struct Prediction {
  std::vector<double> scores;  // C match probabilities
  std::vector<Deltas> deltas;  // C
};

Prediction predict(const std::vector<double>& roi, const Tensor& prototypes,
                   const PredictorHead& head);
// Row n of the result is the prediction for RoI n.
std::vector<Prediction> predict_batch(const Tensor& features, const Tensor& prototypes,
                                      const PredictorHead& head);

// Lowest index among the maxima.
std::size_t argmax_branch(std::span<const double> scores);

// Background (nullopt) when the best branch scores below the threshold.
std::optional<Detection> decide(std::span<const double> scores, std::span<const Deltas> deltas,
                                const Box& proposal, double threshold);

Box apply_deltas(const Box& box, const Deltas& d);
// Inverse of apply_deltas: the deltas taking `from` to `to`.
Deltas encode_deltas(const Box& from, const Box& to);

// Greedy suppression per category at IoU >= iou_threshold; survivors keep
// descending-confidence order, ties in input order.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold = 0.5);

struct LossTerms {
  Tensor cls;
  Tensor box;
  Tensor meta;
  Tensor total;
};

// cls: mean two-way cross-entropy over non-ignored RoIs on the ground-truth
// branch (foreground) or the highest-scoring branch (background).
// box: mean smooth-L1 over foreground RoIs, exactly 0 without any.
// Throws ValidationError for a foreground RoI without target deltas.
LossTerms detection_loss(Tape& tape, const HeadOutputs& out, const RoIBatch& batch,
                         const Tensor& meta_loss_value);

}  // namespace fskt
