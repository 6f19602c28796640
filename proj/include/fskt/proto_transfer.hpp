#pragma once

// Prototype pooling, two-layer graph convolution with a residual path, and
// the meta-classifier shared by the refined and preliminary prototypes.

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fskt/knowledge_graph.hpp"
#include "fskt/tensor.hpp"
#include "fskt/types.hpp"

namespace fskt {

// Mean of the masked cells of a support feature map. Throws
// ValidationError for an empty or malformed mask.
std::vector<double> masked_pool(const SupportEntry& entry);

// Row i = mean over the category-i entries of their pooled vectors. Throws
// ValidationError naming any category without entries.
Tensor pool_support(std::span<const SupportEntry> entries, const CategorySet& categories);

struct GcnLayer {
  Tensor theta;  // S_in x F_out
};

struct PrototypeSet {
  Tensor preliminary;             // C x S
  std::optional<Tensor> refined;  // C x F
};

struct NetInit {
  // Theta = I + scale * Glorot for square layers; plain Glorot otherwise.
  bool identity_centred = true;
  double perturbation = 0.1;
};

class ProtoTransferNet {
 public:
  ProtoTransferNet() = default;
  // S input width, F prototype width, C classifier outputs.
  static ProtoTransferNet create(std::size_t s, std::size_t f, std::size_t c, Rng& rng,
                                 const NetInit& init = {});

  std::size_t input_dim() const { return layer1.theta.rows(); }
  std::size_t output_dim() const { return layer1.theta.cols(); }
  std::size_t num_classes() const { return w_cls.cols(); }

  // Appends Glorot-initialized classifier columns up to `c` outputs.
  void grow_classifier(std::size_t c, Rng& rng);

  // Trainable tensors. The projections are fixed identities when S == F
  // and are then omitted.
  std::vector<NamedParameter> parameters(bool include_skip_projection) const;

  GcnLayer layer1;
  GcnLayer layer2;
  Tensor residual;    // S x F
  Tensor projection;  // S x F, skip path into the classifier
  Tensor w_cls;       // F x C
};

// ReLU(P H Theta).
Tensor gcn_forward(Tape& tape, const Tensor& h, const Tensor& propagation, const GcnLayer& layer);
// P H Theta without the activation.
Tensor gcn_preactivation(Tape& tape, const Tensor& h, const Tensor& propagation,
                         const GcnLayer& layer);

// p = ReLU(P h1 Theta2 + p0 W_res), h1 = ReLU(P p0 Theta1).
Tensor transfer(Tape& tape, const Tensor& p0, const MetaGraph& graph, const ProtoTransferNet& net);
Tensor transfer(Tape& tape, const Tensor& p0, const Tensor& propagation,
                const ProtoTransferNet& net);

// (p W_cls, proj(p0) W_cls). Throws ValidationError without refined
// prototypes.
std::pair<Tensor, Tensor> meta_logits(Tape& tape, const PrototypeSet& protos,
                                      const ProtoTransferNet& net);

// Mean over rows of (CE(refined) + CE(preliminary)) / 2.
Tensor meta_loss(Tape& tape, const Tensor& logits_refined, const Tensor& logits_preliminary,
                 std::span<const std::size_t> labels);
// Skip path removed: mean over rows of CE(refined) / 2.
Tensor meta_loss_refined_only(Tape& tape, const Tensor& logits_refined,
                              std::span<const std::size_t> labels);

}  // namespace fskt
