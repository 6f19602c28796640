#include "fskt/proto_transfer.hpp"

#include "fskt/errors.hpp"

namespace fskt {

std::vector<double> masked_pool(const SupportEntry& entry) {
  const std::size_t cells = entry.grid * entry.grid;
  if (entry.dim == 0 || entry.features.size() != cells * entry.dim || entry.mask.size() != cells) {
    throw ValidationError("support entry: feature map and mask do not match a " +
                          std::to_string(entry.grid) + "x" + std::to_string(entry.grid) +
                          " grid of dimension " + std::to_string(entry.dim));
  }
  std::vector<double> out(entry.dim, 0.0);
  std::size_t count = 0;
  for (std::size_t c = 0; c < cells; ++c) {
    if (entry.mask[c] > 1) throw ValidationError("support entry: mask values must be 0 or 1");
    if (!entry.mask[c]) continue;
    ++count;
    for (std::size_t j = 0; j < entry.dim; ++j) out[j] += entry.features[c * entry.dim + j];
  }
  if (count == 0) throw ValidationError("support entry: empty mask");
  for (double& v : out) v /= static_cast<double>(count);
  return out;
}

Tensor pool_support(std::span<const SupportEntry> entries, const CategorySet& categories) {
  const std::size_t c = categories.size();
  std::size_t dim = 0;
  std::vector<double> sums;
  std::vector<std::size_t> counts(c, 0);
  for (const SupportEntry& e : entries) {
    if (e.category >= c) throw ValidationError("support entry with unknown category index");
    auto pooled = masked_pool(e);
    if (dim == 0) {
      dim = pooled.size();
      sums.assign(c * dim, 0.0);
    } else if (pooled.size() != dim) {
      throw DimensionError("support entries of different feature dimension");
    }
    for (std::size_t j = 0; j < dim; ++j) sums[e.category * dim + j] += pooled[j];
    ++counts[e.category];
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (counts[i] == 0) throw ValidationError("no support entries for category '" + categories.name(i) + "'");
  }
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < dim; ++j) sums[i * dim + j] /= static_cast<double>(counts[i]);
  return Tensor::matrix(c, dim, std::move(sums));
}

namespace {

Tensor init_square_or_glorot(std::size_t in, std::size_t out, Rng& rng, const NetInit& init) {
  Tensor w = glorot_uniform(in, out, rng);
  if (init.identity_centred && in == out) {
    auto v = w.mutable_values();
    for (double& x : v) x *= init.perturbation;
    for (std::size_t i = 0; i < in; ++i) v[i * out + i] += 1.0;
  }
  return w;
}

}  // namespace

ProtoTransferNet ProtoTransferNet::create(std::size_t s, std::size_t f, std::size_t c, Rng& rng,
                                          const NetInit& init) {
  if (s == 0 || f == 0 || c == 0) throw ConfigError("network dimensions must be positive");
  ProtoTransferNet net;
  net.layer1.theta = init_square_or_glorot(s, f, rng, init);
  net.layer2.theta = init_square_or_glorot(f, f, rng, init);
  if (s == f) {
    net.residual = Tensor::identity(s);
    net.projection = Tensor::identity(s);
  } else {
    net.residual = glorot_uniform(s, f, rng);
    net.projection = glorot_uniform(s, f, rng);
  }
  net.w_cls = glorot_uniform(f, c, rng);
  return net;
}

void ProtoTransferNet::grow_classifier(std::size_t c, Rng& rng) {
  const std::size_t f = w_cls.rows(), old = w_cls.cols();
  if (c < old) throw ValidationError("classifier cannot shrink");
  if (c == old) return;
  Tensor extra = glorot_uniform(f, c - old, rng);
  std::vector<double> v(f * c);
  for (std::size_t i = 0; i < f; ++i) {
    for (std::size_t j = 0; j < old; ++j) v[i * c + j] = w_cls.at(i, j);
    for (std::size_t j = old; j < c; ++j) v[i * c + j] = extra.at(i, j - old);
  }
  w_cls = Tensor::matrix(f, c, std::move(v), true);
}

std::vector<NamedParameter> ProtoTransferNet::parameters(bool include_skip_projection) const {
  std::vector<NamedParameter> out = {{"gcn1.theta", layer1.theta}, {"gcn2.theta", layer2.theta}};
  if (residual.requires_grad()) out.push_back({"residual", residual});
  if (include_skip_projection && projection.requires_grad()) out.push_back({"projection", projection});
  out.push_back({"meta.w_cls", w_cls});
  return out;
}

Tensor gcn_preactivation(Tape& tape, const Tensor& h, const Tensor& propagation,
                         const GcnLayer& layer) {
  return matmul(tape, matmul(tape, propagation, h), layer.theta);
}

Tensor gcn_forward(Tape& tape, const Tensor& h, const Tensor& propagation, const GcnLayer& layer) {
  return relu(tape, gcn_preactivation(tape, h, propagation, layer));
}

Tensor transfer(Tape& tape, const Tensor& p0, const Tensor& propagation,
                const ProtoTransferNet& net) {
  Tensor h1 = gcn_forward(tape, p0, propagation, net.layer1);
  Tensor pre = gcn_preactivation(tape, h1, propagation, net.layer2);
  return relu(tape, add(tape, pre, matmul(tape, p0, net.residual)));
}

Tensor transfer(Tape& tape, const Tensor& p0, const MetaGraph& graph, const ProtoTransferNet& net) {
  if (graph.size() != p0.rows()) {
    throw DimensionError("transfer: graph over " + std::to_string(graph.size()) +
                         " categories, prototypes " + shape_string(p0.shape()));
  }
  return transfer(tape, p0, graph.propagation_tensor(), net);
}

std::pair<Tensor, Tensor> meta_logits(Tape& tape, const PrototypeSet& protos,
                                      const ProtoTransferNet& net) {
  if (!protos.refined) throw ValidationError("meta_logits: refined prototypes not computed");
  Tensor refined = matmul(tape, *protos.refined, net.w_cls);
  Tensor preliminary = matmul(tape, matmul(tape, protos.preliminary, net.projection), net.w_cls);
  return {refined, preliminary};
}

Tensor meta_loss(Tape& tape, const Tensor& logits_refined, const Tensor& logits_preliminary,
                 std::span<const std::size_t> labels) {
  Tensor a = mean(tape, cross_entropy_rows(tape, logits_refined, labels));
  Tensor b = mean(tape, cross_entropy_rows(tape, logits_preliminary, labels));
  return scale(tape, add(tape, a, b), 0.5);
}

Tensor meta_loss_refined_only(Tape& tape, const Tensor& logits_refined,
                              std::span<const std::size_t> labels) {
  return scale(tape, mean(tape, cross_entropy_rows(tape, logits_refined, labels)), 0.5);
}

}  // namespace fskt
