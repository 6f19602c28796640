#include "fskt/detection_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fskt/errors.hpp"
#include "fskt/eval_map.hpp"

namespace fskt {

RoIBatch concat(std::span<const RoIBatch> parts) {
  RoIBatch out;
  std::size_t f = 0, n = 0;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    if (f == 0) f = p.features.cols();
    if (p.features.cols() != f) throw DimensionError("concat: RoI batches of different width");
    n += p.size();
  }
  std::vector<double> values;
  values.reserve(n * f);
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    values.insert(values.end(), p.features.values().begin(), p.features.values().end());
    out.proposals.insert(out.proposals.end(), p.proposals.begin(), p.proposals.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.targets.insert(out.targets.end(), p.targets.begin(), p.targets.end());
  }
  out.features = Tensor::matrix(n, f, std::move(values));
  return out;
}

PredictorHead PredictorHead::create(std::size_t f, Rng& rng, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("objectness threshold must lie in (0, 1)");
  }
  PredictorHead h;
  // Glorot over (fan_in F, fan_out k), stored transposed as k x F.
  auto transposed = [&](std::size_t k) {
    Tensor w = glorot_uniform(f, k, rng, false);
    std::vector<double> v(k * f);
    for (std::size_t i = 0; i < f; ++i)
      for (std::size_t j = 0; j < k; ++j) v[j * f + i] = w.at(i, j);
    return Tensor::matrix(k, f, std::move(v), true);
  };
  h.cls_w = transposed(2);
  h.cls_b = Tensor::zeros({2, 1}, true);
  h.reg_w = transposed(4);
  h.reg_b = Tensor::zeros({4, 1}, true);
  h.threshold = threshold;
  return h;
}

std::vector<NamedParameter> PredictorHead::parameters() const {
  return {{"head.cls_w", cls_w}, {"head.cls_b", cls_b}, {"head.reg_w", reg_w}, {"head.reg_b", reg_b}};
}

Tensor reweight(Tape& tape, const Tensor& roi, const Tensor& prototypes) {
  if (roi.rank() != 1 || prototypes.rank() != 2 || roi.size() != prototypes.cols()) {
    throw DimensionError("reweight: RoI " + shape_string(roi.shape()) + " vs prototypes " +
                         shape_string(prototypes.shape()));
  }
  return mul_row_broadcast(tape, prototypes, roi);
}

namespace {

// (R (.) w) p^T + b: the linear map w applied to every reweighted feature.
Tensor branch_linear(Tape& tape, const Tensor& features, const Tensor& prototypes_t,
                     const Tensor& weights, const Tensor& bias, std::size_t out) {
  Tensor w = row(tape, weights, out);
  Tensor b = row(tape, bias, out);
  return add_scalar(tape, matmul(tape, mul_row_broadcast(tape, features, w), prototypes_t), b);
}

}  // namespace

HeadOutputs head_forward(Tape& tape, const Tensor& features, const Tensor& prototypes,
                         const PredictorHead& head) {
  if (features.rank() != 2 || prototypes.rank() != 2 || features.cols() != prototypes.cols() ||
      features.cols() != head.cls_w.cols()) {
    throw DimensionError("head: RoI features " + shape_string(features.shape()) +
                         " vs prototypes " + shape_string(prototypes.shape()));
  }
  Tensor pt = transpose(tape, prototypes);
  HeadOutputs out;
  out.match = branch_linear(tape, features, pt, head.cls_w, head.cls_b, 0);
  out.background = branch_linear(tape, features, pt, head.cls_w, head.cls_b, 1);
  for (std::size_t j = 0; j < 4; ++j)
    out.deltas[j] = branch_linear(tape, features, pt, head.reg_w, head.reg_b, j);
  return out;
}

namespace {

double match_probability(double match_logit, double background_logit) {
  // softmax([m, b])[0], written to avoid overflow for either sign.
  const double z = background_logit - match_logit;
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

}  // namespace

std::vector<Prediction> predict_batch(const Tensor& features, const Tensor& prototypes,
                                      const PredictorHead& head) {
  Tape tape(Tape::Mode::kInference);
  HeadOutputs out = head_forward(tape, features, prototypes, head);
  const std::size_t n = features.rows(), c = prototypes.rows();
  std::vector<Prediction> preds(n);
  for (std::size_t r = 0; r < n; ++r) {
    preds[r].scores.resize(c);
    preds[r].deltas.resize(c);
    for (std::size_t i = 0; i < c; ++i) {
      preds[r].scores[i] = match_probability(out.match.at(r, i), out.background.at(r, i));
      for (std::size_t j = 0; j < 4; ++j) preds[r].deltas[i][j] = out.deltas[j].at(r, i);
    }
  }
  return preds;
}

Prediction predict(const std::vector<double>& roi, const Tensor& prototypes,
                   const PredictorHead& head) {
  return predict_batch(Tensor::matrix(1, roi.size(), roi), prototypes, head).front();
}

std::size_t argmax_branch(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

std::optional<Detection> decide(std::span<const double> scores, std::span<const Deltas> deltas,
                                const Box& proposal, double threshold) {
  if (scores.empty()) return std::nullopt;
  const std::size_t best = argmax_branch(scores);
  if (scores[best] < threshold) return std::nullopt;
  return Detection{apply_deltas(proposal, deltas[best]), best, scores[best]};
}

Box apply_deltas(const Box& box, const Deltas& d) {
  const double w = box.width(), h = box.height();
  const double cx = box.xmin + 0.5 * w + d[0] * w;
  const double cy = box.ymin + 0.5 * h + d[1] * h;
  const double nw = w * std::exp(d[2]);
  const double nh = h * std::exp(d[3]);
  return Box{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
}

Deltas encode_deltas(const Box& from, const Box& to) {
  const double fw = from.width(), fh = from.height();
  const double tw = to.width(), th = to.height();
  return {(to.xmin + 0.5 * tw - (from.xmin + 0.5 * fw)) / fw,
          (to.ymin + 0.5 * th - (from.ymin + 0.5 * fh)) / fh, std::log(tw / fw), std::log(th / fh)};
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const Detection& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.category == d.category && iou(k.box, d.box) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

LossTerms detection_loss(Tape& tape, const HeadOutputs& out, const RoIBatch& batch,
                         const Tensor& meta_loss_value) {
  const std::size_t n = batch.size();
  if (out.match.rows() != n || batch.targets.size() != n) {
    throw DimensionError("detection_loss: " + std::to_string(n) + " labels for head output " +
                         shape_string(out.match.shape()));
  }
  const std::size_t c = out.match.cols();
  std::vector<std::size_t> branch(n, 0);
  std::vector<std::size_t> active, foreground, target_class;
  std::vector<double> box_targets;
  for (std::size_t r = 0; r < n; ++r) {
    const int label = batch.labels[r];
    if (label == kIgnore) continue;
    if (label >= 0) {
      if (static_cast<std::size_t>(label) >= c) {
        throw ValidationError("detection_loss: label " + std::to_string(label) + " outside " +
                              std::to_string(c) + " categories");
      }
      if (!batch.targets[r]) {
        throw ValidationError("detection_loss: foreground RoI " + std::to_string(r) +
                              " has no target deltas");
      }
      branch[r] = static_cast<std::size_t>(label);
      foreground.push_back(r);
      target_class.push_back(0);
      box_targets.insert(box_targets.end(), batch.targets[r]->begin(), batch.targets[r]->end());
    } else if (label == kBackground) {
      // Highest match probability is the highest logit gap.
      std::vector<double> gap(c);
      for (std::size_t i = 0; i < c; ++i) gap[i] = out.match.at(r, i) - out.background.at(r, i);
      branch[r] = argmax_branch(gap);
      target_class.push_back(1);
    } else {
      throw ValidationError("detection_loss: invalid label " + std::to_string(label));
    }
    active.push_back(r);
  }

  LossTerms terms;
  if (active.empty()) {
    terms.cls = Tensor::scalar(0.0);
  } else {
    Tensor pair = stack_columns(tape, {pick(tape, out.match, branch), pick(tape, out.background, branch)});
    terms.cls = mean(tape, cross_entropy_rows(tape, select_rows(tape, pair, active), target_class));
  }
  if (foreground.empty()) {
    terms.box = Tensor::scalar(0.0);
  } else {
    std::vector<Tensor> cols;
    for (std::size_t j = 0; j < 4; ++j) cols.push_back(pick(tape, out.deltas[j], branch));
    Tensor pred = select_rows(tape, stack_columns(tape, cols), foreground);
    Tensor target = Tensor::matrix(foreground.size(), 4, std::move(box_targets));
    terms.box = scale(tape, smooth_l1(tape, pred, target), 1.0 / static_cast<double>(foreground.size()));
  }
  terms.meta = meta_loss_value;
  terms.total = add(tape, add(tape, terms.cls, terms.box), terms.meta);
  return terms;
}

}  // namespace fskt
