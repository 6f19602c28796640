#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fskt/errors.hpp"
#include "fskt/knowledge_graph.hpp"
#include "fskt/proto_transfer.hpp"
#include "helpers.hpp"

using namespace fskt;

namespace {

SupportEntry flat_entry(std::size_t category, std::vector<double> v) {
  SupportEntry e;
  e.category = category;
  e.grid = 1;
  e.dim = v.size();
  e.features = std::move(v);
  e.mask = {1};
  return e;
}

CategorySet named(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("c" + std::to_string(i));
  return CategorySet(names, std::vector<bool>(n, false));
}

ProtoTransferNet scalar_net(double a, double b) {
  ProtoTransferNet net;
  net.layer1.theta = Tensor::matrix(1, 1, {a});
  net.layer2.theta = Tensor::matrix(1, 1, {b});
  net.residual = Tensor::identity(1);
  net.projection = Tensor::identity(1);
  net.w_cls = Tensor::matrix(1, 1, {1});
  return net;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<double> v;
  for (std::size_t i : perm)
    for (std::size_t j = 0; j < x.cols(); ++j) v.push_back(x.at(i, j));
  return Tensor::matrix(x.rows(), x.cols(), v);
}

Tensor permute_both(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<double> v;
  for (std::size_t i : perm)
    for (std::size_t j : perm) v.push_back(x.at(i, j));
  return Tensor::matrix(x.rows(), x.cols(), v);
}

Tensor stochastic(Rng& rng, std::size_t n) {
  std::vector<double> a(n * n);
  for (double& x : a) x = rng.uniform(0.01, 1.0);
  return Tensor::matrix(n, n, row_normalize(a, n));
}

}  // namespace

TEST_SUITE("proto_transfer") {

TEST_CASE("pool support examples") {
  CategorySet cats = named(2);
  std::vector<SupportEntry> one = {flat_entry(0, {1, 2}), flat_entry(1, {3, 4})};
  Tensor p0 = pool_support(one, cats);
  CHECK(std::vector<double>(p0.values().begin(), p0.values().end()) == std::vector<double>{1, 2, 3, 4});

  std::vector<SupportEntry> two = {flat_entry(0, {1, 1}), flat_entry(0, {3, 3}), flat_entry(1, {0, 0})};
  Tensor p = pool_support(two, cats);
  CHECK(p.at(0, 0) == 2.0);
  CHECK(p.at(0, 1) == 2.0);
}

TEST_CASE("pooling K spatial entries matches an explicit loop") {
  Rng rng(21);
  CategorySet cats = named(3);
  std::vector<SupportEntry> entries;
  const std::size_t grid = 4, dim = 5, k = 3;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t s = 0; s < k; ++s) {
      SupportEntry e;
      e.category = c;
      e.grid = grid;
      e.dim = dim;
      e.features = testing::random_values(rng, grid * grid * dim);
      e.mask.assign(grid * grid, 0);
      for (auto& m : e.mask) m = rng.uniform() < 0.5;
      e.mask[rng.index(grid * grid)] = 1;
      entries.push_back(e);
    }
  }
  Tensor p0 = pool_support(entries, cats);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < dim; ++j) {
      double total = 0;
      for (const auto& e : entries) {
        if (e.category != c) continue;
        double cell_sum = 0;
        int cells = 0;
        for (std::size_t q = 0; q < grid * grid; ++q) {
          if (!e.mask[q]) continue;
          cell_sum += e.features[q * dim + j];
          ++cells;
        }
        total += cell_sum / cells;
      }
      CHECK(p0.at(c, j) == doctest::Approx(total / k).epsilon(1e-12));
    }
  }
}

TEST_CASE("pool support names a category without entries") {
  CategorySet cats = named(2);
  std::vector<SupportEntry> only0 = {flat_entry(0, {1, 2})};
  try {
    pool_support(only0, cats);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("c1") != std::string::npos);
  }
  SupportEntry empty_mask = flat_entry(0, {1, 2});
  empty_mask.mask = {0};
  CHECK_THROWS_AS(masked_pool(empty_mask), ValidationError);
}

TEST_CASE("gcn forward examples") {
  Tape tape;
  GcnLayer two{Tensor::matrix(1, 1, {2})};
  CHECK(gcn_forward(tape, Tensor::matrix(1, 1, {1}), Tensor::identity(1), two).item() == 2.0);
  GcnLayer neg{Tensor::matrix(1, 1, {-2})};
  CHECK(gcn_forward(tape, Tensor::matrix(1, 1, {1}), Tensor::identity(1), neg).item() == 0.0);
  GcnLayer id{Tensor::identity(2)};
  Tensor out = gcn_forward(tape, Tensor::matrix(2, 2, {2, 0, 0, 2}), Tensor::matrix(2, 2, {0.5, 0.5, 0.5, 0.5}), id);
  CHECK(std::vector<double>(out.values().begin(), out.values().end()) == std::vector<double>{1, 1, 1, 1});
  CHECK_THROWS_AS(gcn_forward(tape, Tensor::zeros({2, 3}), Tensor::identity(2), id), DimensionError);
}

TEST_CASE("transfer examples") {
  Tape tape;
  ProtoTransferNet zero;
  zero.layer1.theta = Tensor::zeros({3, 3});
  zero.layer2.theta = Tensor::zeros({3, 3});
  zero.residual = Tensor::identity(3);
  Rng rng(4);
  Tensor p0 = testing::random_matrix(rng, 4, 3, false);
  Tensor p = transfer(tape, p0, stochastic(rng, 4), zero);
  for (std::size_t i = 0; i < p0.size(); ++i) CHECK(p[i] == std::max(0.0, p0[i]));

  // Scalar chain: relu(relu(x a) b + x)
  for (auto [x, a, b] : {std::tuple{2.0, 0.5, -1.0}, std::tuple{1.0, 3.0, 2.0}, std::tuple{-1.0, 1.0, 1.0}}) {
    const double expected = std::max(0.0, std::max(0.0, x * a) * b + x);
    CHECK(transfer(tape, Tensor::matrix(1, 1, {x}), Tensor::identity(1), scalar_net(a, b)).item() ==
          doctest::Approx(expected));
  }
}

TEST_CASE("transfer is permutation equivariant") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 3 + rng.index(5), s = 6;
    ProtoTransferNet net = ProtoTransferNet::create(s, s, c, rng);
    Tensor p0 = testing::random_matrix(rng, c, s, false);
    Tensor prop = stochastic(rng, c);
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tape tape;
    Tensor p = transfer(tape, p0, prop, net);
    Tensor q = transfer(tape, permute_rows(p0, perm), permute_both(prop, perm), net);
    Tensor expected = permute_rows(p, perm);
    for (std::size_t i = 0; i < q.size(); ++i) CHECK(std::abs(q[i] - expected[i]) <= 1e-9);
  }
}

TEST_CASE("identity propagation keeps categories separate") {
  Rng rng(31);
  const std::size_t c = 5, s = 4;
  ProtoTransferNet net = ProtoTransferNet::create(s, s, c, rng);
  Tensor p0 = testing::random_matrix(rng, c, s, false);
  Tape tape;
  Tensor p = transfer(tape, p0, Tensor::identity(c), net);
  std::vector<double> changed(p0.values().begin(), p0.values().end());
  for (std::size_t j = 0; j < s; ++j) changed[2 * s + j] += 0.75;
  Tensor q = transfer(tape, Tensor::matrix(c, s, changed), Tensor::identity(c), net);
  for (std::size_t i = 0; i < c; ++i) {
    if (i == 2) continue;
    for (std::size_t j = 0; j < s; ++j) CHECK(q.at(i, j) == p.at(i, j));
  }
}

TEST_CASE("meta logits") {
  Tape tape;
  ProtoTransferNet net;
  net.projection = Tensor::identity(2);
  net.w_cls = Tensor::zeros({2, 2});
  PrototypeSet protos{Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 2, {5, 6, 7, 8})};
  auto [r0, p0] = meta_logits(tape, protos, net);
  for (double v : r0.values()) CHECK(v == 0.0);
  for (double v : p0.values()) CHECK(v == 0.0);

  net.w_cls = Tensor::matrix(2, 2, {1, -1, 2, 0.5});
  auto [r, p] = meta_logits(tape, protos, net);
  // [5 6; 7 8] [1 -1; 2 0.5] and [1 2; 3 4] [1 -1; 2 0.5]
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{17, -2, 23, -3});
  CHECK(std::vector<double>(p.values().begin(), p.values().end()) == std::vector<double>{5, 0, 11, -1});

  PrototypeSet same{Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 2, {1, 2, 3, 4})};
  auto [a, b] = meta_logits(tape, same, net);
  CHECK(std::vector<double>(a.values().begin(), a.values().end()) ==
        std::vector<double>(b.values().begin(), b.values().end()));

  PrototypeSet unrefined{Tensor::matrix(2, 2, {1, 2, 3, 4}), std::nullopt};
  CHECK_THROWS_AS(meta_logits(tape, unrefined, net), ValidationError);
}

TEST_CASE("meta loss examples") {
  Tape tape;
  std::vector<std::size_t> labels = {0, 1, 2, 3, 4};
  Tensor uniform = Tensor::zeros({5, 5});
  std::vector<double> sharp(25, 0.0);
  for (std::size_t i = 0; i < 5; ++i) sharp[i * 5 + i] = 200.0;
  Tensor perfect = Tensor::matrix(5, 5, sharp);
  CHECK(meta_loss(tape, perfect, perfect, labels).item() == doctest::Approx(0.0));
  CHECK(meta_loss(tape, uniform, uniform, labels).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(meta_loss(tape, perfect, uniform, labels).item() == doctest::Approx(std::log(5.0) / 2).epsilon(1e-12));
  CHECK(meta_loss_refined_only(tape, uniform, labels).item() == doctest::Approx(std::log(5.0) / 2).epsilon(1e-12));
  std::vector<std::size_t> bad = {0, 1, 2, 3, 5};
  CHECK_THROWS_AS(meta_loss(tape, uniform, uniform, bad), ValidationError);
}

TEST_CASE("meta loss is shift invariant") {
  Rng rng(77);
  std::vector<std::size_t> labels = {0, 1, 2, 3};
  Tape tape;
  for (int trial = 0; trial < 30; ++trial) {
    auto a = testing::random_values(rng, 16, -2, 2), b = testing::random_values(rng, 16, -2, 2);
    auto as = a, bs = b;
    for (std::size_t r = 0; r < 4; ++r) {
      const double ca = rng.uniform(-20, 20), cb = rng.uniform(-20, 20);
      for (std::size_t j = 0; j < 4; ++j) {
        as[r * 4 + j] += ca;
        bs[r * 4 + j] += cb;
      }
    }
    const double x = meta_loss(tape, Tensor::matrix(4, 4, a), Tensor::matrix(4, 4, b), labels).item();
    const double y = meta_loss(tape, Tensor::matrix(4, 4, as), Tensor::matrix(4, 4, bs), labels).item();
    CHECK(std::abs(x - y) <= 1e-12);
  }
}

TEST_CASE("meta loss gradients match finite differences for every parameter") {
  Rng rng(123);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 2 + rng.index(4), s = 2 + rng.index(3), f = s + 1 + rng.index(2);
    ProtoTransferNet net = ProtoTransferNet::create(s, f, c, rng);
    CHECK(net.residual.requires_grad());
    Tensor p0 = testing::random_matrix(rng, c, s, false);
    Tensor prop = stochastic(rng, c);
    std::vector<std::size_t> labels(c);
    std::iota(labels.begin(), labels.end(), 0);
    std::vector<Tensor> params;
    for (const auto& np : net.parameters(true)) params.push_back(np.tensor);
    CHECK(params.size() == 5);
    auto loss = [&](Tape& tape) {
      PrototypeSet protos{p0, transfer(tape, p0, prop, net)};
      auto [r, p] = meta_logits(tape, protos, net);
      return meta_loss(tape, r, p, labels);
    };
    worst = std::max(worst, grad_check(loss, params));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("square networks use fixed identity skip maps") {
  Rng rng(5);
  ProtoTransferNet net = ProtoTransferNet::create(4, 4, 3, rng);
  CHECK_FALSE(net.residual.requires_grad());
  CHECK_FALSE(net.projection.requires_grad());
  auto params = net.parameters(true);
  CHECK(params.size() == 3);
  // Identity-centred layers stay near the identity.
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(net.layer1.theta.at(i, i) - 1.0) < 0.2);

  Tensor before = net.w_cls.clone_as_leaf();
  net.grow_classifier(5, rng);
  CHECK(net.num_classes() == 5);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(net.w_cls.at(i, j) == before.at(i, j));
  CHECK_THROWS_AS(net.grow_classifier(2, rng), ValidationError);
}

}  // TEST_SUITE
