#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fskt/detection_head.hpp"
#include "fskt/errors.hpp"
#include "fskt/knowledge_graph.hpp"
#include "fskt/proto_transfer.hpp"
#include "helpers.hpp"

using namespace fskt;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

PredictorHead zero_head(std::size_t f) {
  return {Tensor::zeros({2, f}, true), Tensor::zeros({2, 1}, true), Tensor::zeros({4, f}, true),
          Tensor::zeros({4, 1}, true), 0.5};
}

double smooth(double d) { return std::abs(d) < 1 ? 0.5 * d * d : std::abs(d) - 0.5; }

// Independent evaluation of the classification and box terms.
std::pair<double, double> oracle_loss(const RoIBatch& b, const Tensor& protos, const PredictorHead& h) {
  const std::size_t f = protos.cols(), c = protos.rows();
  double cls = 0, box = 0;
  int counted = 0, fg = 0;
  for (std::size_t n = 0; n < b.size(); ++n) {
    if (b.labels[n] == kIgnore) continue;
    std::vector<double> zm(c), zb(c);
    std::vector<std::array<double, 4>> dl(c);
    for (std::size_t i = 0; i < c; ++i) {
      double m = h.cls_b[0], g = h.cls_b[1];
      for (std::size_t j = 0; j < f; ++j) {
        const double r = b.features.at(n, j) * protos.at(i, j);
        m += h.cls_w.at(0, j) * r;
        g += h.cls_w.at(1, j) * r;
        for (std::size_t k = 0; k < 4; ++k) dl[i][k] += h.reg_w.at(k, j) * r;
      }
      for (std::size_t k = 0; k < 4; ++k) dl[i][k] += h.reg_b[k];
      zm[i] = m;
      zb[i] = g;
    }
    ++counted;
    if (b.labels[n] >= 0) {
      const std::size_t i = static_cast<std::size_t>(b.labels[n]);
      cls += std::log(std::exp(zm[i]) + std::exp(zb[i])) - zm[i];
      for (std::size_t k = 0; k < 4; ++k) box += smooth(dl[i][k] - (*b.targets[n])[k]);
      ++fg;
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < c; ++i)
        if (zm[i] - zb[i] > zm[best] - zb[best]) best = i;
      cls += std::log(std::exp(zm[best]) + std::exp(zb[best])) - zb[best];
    }
  }
  return {counted ? cls / counted : 0.0, fg ? box / fg : 0.0};
}

RoIBatch random_batch(Rng& rng, std::size_t n, std::size_t f, std::size_t c) {
  RoIBatch b;
  b.features = testing::random_matrix(rng, n, f, false);
  for (std::size_t i = 0; i < n; ++i) {
    b.proposals.push_back({0, 0, 10, 10});
    const double u = rng.uniform();
    if (u < 0.5) {
      b.labels.push_back(static_cast<int>(rng.index(c)));
      b.targets.push_back(Deltas{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
    } else {
      b.labels.push_back(u < 0.9 ? kBackground : kIgnore);
      b.targets.push_back(std::nullopt);
    }
  }
  return b;
}

}  // namespace

TEST_SUITE("detection_head") {

TEST_CASE("reweight examples") {
  Tape tape;
  Tensor r = Tensor::vector({1, 2});
  CHECK(vals(reweight(tape, r, Tensor::filled({3, 2}, 1.0))) == std::vector<double>{1, 2, 1, 2, 1, 2});
  CHECK(vals(reweight(tape, r, Tensor::matrix(1, 2, {3, 0}))) == std::vector<double>{3, 0});
  CHECK(reweight(tape, Tensor::vector({9, 9}), Tensor::zeros({3, 2})).rows() == 3);
  CHECK_THROWS_AS(reweight(tape, Tensor::vector({1, 2, 3}), Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("predict examples") {
  Rng rng(3);
  PredictorHead zero = zero_head(3);
  Prediction p = predict({1, -2, 3}, testing::random_matrix(rng, 4, 3, false), zero);
  CHECK(p.scores.size() == 4);
  for (double s : p.scores) CHECK(s == 0.5);

  PredictorHead head = PredictorHead::create(3, rng);
  Tensor same = Tensor::matrix(2, 3, {0.3, -1, 2, 0.3, -1, 2});
  Prediction q = predict({0.4, 0.1, -0.7}, same, head);
  CHECK(q.scores[0] == q.scores[1]);
  CHECK(q.deltas[0] == q.deltas[1]);

  // Hand evaluation: F = 2, C = 2.
  PredictorHead toy = zero_head(2);
  toy.cls_w = Tensor::matrix(2, 2, {1, 0, 0, 1});
  toy.cls_b = Tensor::matrix(2, 1, {0.5, 0});
  toy.reg_w = Tensor::matrix(4, 2, {1, 0, 0, 1, 1, 1, 0, 0});
  Prediction t = predict({1, 2}, Tensor::matrix(2, 2, {1, 1, 2, 0}), toy);
  // Branch 0: R = (1,2): match 1.5, background 2. Branch 1: R = (2,0): match 2.5, background 0.
  CHECK(t.scores[0] == doctest::Approx(1.0 / (1.0 + std::exp(0.5))));
  CHECK(t.scores[1] == doctest::Approx(1.0 / (1.0 + std::exp(-2.5))));
  CHECK(t.deltas[0] == Deltas{1, 2, 3, 0});
  CHECK(t.deltas[1] == Deltas{2, 0, 2, 0});
}

TEST_CASE("all-ones prototypes reduce to the raw feature") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    PredictorHead head = PredictorHead::create(5, rng);
    auto roi = testing::random_values(rng, 5);
    Prediction a = predict(roi, Tensor::filled({1, 5}, 1.0), head);
    double m = head.cls_b[0], g = head.cls_b[1];
    for (std::size_t j = 0; j < 5; ++j) {
      m += head.cls_w.at(0, j) * roi[j];
      g += head.cls_w.at(1, j) * roi[j];
    }
    CHECK(a.scores[0] == doctest::Approx(1.0 / (1.0 + std::exp(g - m))).epsilon(1e-12));
  }
}

TEST_CASE("batched prediction matches single prediction") {
  Rng rng(19);
  PredictorHead head = PredictorHead::create(4, rng);
  Tensor protos = testing::random_matrix(rng, 3, 4, false);
  Tensor feats = testing::random_matrix(rng, 6, 4, false);
  auto batch = predict_batch(feats, protos, head);
  for (std::size_t n = 0; n < 6; ++n) {
    std::vector<double> roi;
    for (std::size_t j = 0; j < 4; ++j) roi.push_back(feats.at(n, j));
    Prediction single = predict(roi, protos, head);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(batch[n].scores[i] == doctest::Approx(single.scores[i]).epsilon(1e-14));
      for (std::size_t k = 0; k < 4; ++k) CHECK(batch[n].deltas[i][k] == doctest::Approx(single.deltas[i][k]).epsilon(1e-14));
    }
  }
}

TEST_CASE("decide examples") {
  const Box box{0, 0, 10, 10};
  std::vector<Deltas> d(2, Deltas{0, 0, 0, 0});
  CHECK_FALSE(decide(std::vector<double>{0.1, 0.1}, d, box, 0.5).has_value());
  auto win = decide(std::vector<double>{0.9, 0.2}, d, box, 0.5);
  REQUIRE(win.has_value());
  CHECK(win->category == 0);
  CHECK(win->confidence == 0.9);
  CHECK(win->box == box);
  auto tie = decide(std::vector<double>{0.8, 0.8}, d, box, 0.5);
  REQUIRE(tie.has_value());
  CHECK(tie->category == 0);
  d[1] = Deltas{1, 0, 0, 0};
  auto moved = decide(std::vector<double>{0.2, 0.7}, d, box, 0.5);
  REQUIRE(moved.has_value());
  CHECK(moved->box == Box{10, 0, 20, 10});
}

TEST_CASE("decide is invariant under monotone score transforms") {
  Rng rng(44);
  auto fixes_half = [](double s) { return 0.5 + 4.0 * std::pow(s - 0.5, 3); };
  auto squares = [](double s) { return s * s; };
  std::vector<Deltas> d(6, Deltas{0, 0, 0, 0});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(6), a(6), b(6);
    for (std::size_t i = 0; i < 6; ++i) {
      s[i] = rng.uniform();
      a[i] = fixes_half(s[i]);
      b[i] = squares(s[i]);
    }
    CHECK(argmax_branch(a) == argmax_branch(s));
    CHECK(argmax_branch(b) == argmax_branch(s));
    auto x = decide(s, d, {0, 0, 1, 1}, 0.5);
    auto y = decide(a, d, {0, 0, 1, 1}, 0.5);
    CHECK(x.has_value() == y.has_value());
    if (x && y) CHECK(x->category == y->category);
  }
}

TEST_CASE("apply deltas examples") {
  const Box box{0, 0, 10, 10};
  CHECK(apply_deltas(box, {0, 0, 0, 0}) == box);
  Box wide = apply_deltas(box, {0, 0, std::log(2.0), 0});
  CHECK(wide.width() == doctest::Approx(20.0));
  CHECK((wide.xmin + wide.xmax) / 2 == doctest::Approx(5.0));
  CHECK(wide.height() == doctest::Approx(10.0));
  Box shifted = apply_deltas(box, {1, 0, 0, 0});
  CHECK((shifted.xmin + shifted.xmax) / 2 == doctest::Approx(15.0));
}

TEST_CASE("delta encoding inverts apply_deltas") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
    Box a{x, y, x + rng.uniform(1, 50), y + rng.uniform(1, 50)};
    Box b{x + rng.uniform(-10, 10), y + rng.uniform(-10, 10), 0, 0};
    b.xmax = b.xmin + rng.uniform(1, 60);
    b.ymax = b.ymin + rng.uniform(1, 60);
    Box back = apply_deltas(a, encode_deltas(a, b));
    CHECK(std::abs(back.xmin - b.xmin) <= 1e-9);
    CHECK(std::abs(back.ymin - b.ymin) <= 1e-9);
    CHECK(std::abs(back.xmax - b.xmax) <= 1e-9);
    CHECK(std::abs(back.ymax - b.ymax) <= 1e-9);
  }
}

TEST_CASE("nms keeps the best box per overlapping group and category") {
  std::vector<Detection> dets = {
      {{0, 0, 10, 10}, 0, 0.6}, {{1, 0, 11, 10}, 0, 0.9}, {{50, 50, 60, 60}, 0, 0.5},
      {{0, 0, 10, 10}, 1, 0.4}, {{0, 0, 10, 10}, 0, 0.9}};
  auto kept = nms(dets, 0.5);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].box == Box{1, 0, 11, 10});  // tie at 0.9 keeps input order
  CHECK(kept[1].confidence == 0.5);
  CHECK(kept[2].category == 1);
  // IoU exactly 1/3 stays.
  auto apart = nms({{{0, 0, 10, 10}, 0, 0.9}, {{5, 0, 15, 10}, 0, 0.8}}, 0.5);
  CHECK(apart.size() == 2);
}

TEST_CASE("detection loss examples") {
  Tape tape;
  // Perfect scores and boxes: large match logit on the ground-truth branch.
  PredictorHead head = zero_head(1);
  head.cls_w = Tensor::matrix(2, 1, {50, -50}, true);
  RoIBatch fg;
  fg.features = Tensor::matrix(1, 1, {1});
  fg.proposals = {{0, 0, 10, 10}};
  fg.labels = {0};
  fg.targets = {Deltas{0, 0, 0, 0}};
  LossTerms perfect = detection_loss(tape, head_forward(tape, fg.features, Tensor::matrix(1, 1, {1}), head), fg,
                                     Tensor::scalar(0.0));
  CHECK(perfect.total.item() == doctest::Approx(0.0).epsilon(1e-12));

  RoIBatch bg = fg;
  bg.labels = {kBackground};
  bg.targets = {std::nullopt};
  LossTerms only_bg = detection_loss(tape, head_forward(tape, bg.features, Tensor::matrix(1, 1, {1}), zero_head(1)),
                                     bg, Tensor::scalar(0.25));
  CHECK(only_bg.box.item() == 0.0);
  CHECK(only_bg.cls.item() == doctest::Approx(std::log(2.0)));
  CHECK(only_bg.total.item() == doctest::Approx(std::log(2.0) + 0.25));

  RoIBatch missing = fg;
  missing.targets = {std::nullopt};
  CHECK_THROWS_AS(detection_loss(tape, head_forward(tape, fg.features, Tensor::matrix(1, 1, {1}), head), missing,
                                 Tensor::scalar(0.0)),
                  ValidationError);
}

TEST_CASE("hand-built two-RoI loss is the sum of its terms") {
  PredictorHead head = zero_head(2);
  head.cls_w = Tensor::matrix(2, 2, {1, 0, 0, 1}, true);
  head.reg_w = Tensor::matrix(4, 2, {1, 0, 0, 1, 0.5, 0.5, 0, 0}, true);
  Tensor protos = Tensor::matrix(2, 2, {1, 1, 2, 0});
  RoIBatch b;
  b.features = Tensor::matrix(2, 2, {1, 2, 0.5, 1});
  b.proposals = {{0, 0, 10, 10}, {5, 5, 20, 20}};
  b.labels = {0, kBackground};
  b.targets = {Deltas{0.5, 1, 0, 0}, std::nullopt};
  Tape tape;
  LossTerms t = detection_loss(tape, head_forward(tape, b.features, protos, head), b, Tensor::scalar(0.3));
  // RoI 0, branch 0: R = (1,2): logits (1,2), deltas (1,2,1.5,0) vs (0.5,1,0,0).
  const double cls0 = std::log(std::exp(1.0) + std::exp(2.0)) - 1.0;
  const double box0 = 0.125 + 0.5 + 1.0 + 0.0;
  // RoI 1: branch 0 R = (0.5,1) gap -0.5; branch 1 R = (1,0) gap 1 -> branch 1, background target.
  const double cls1 = std::log(std::exp(1.0) + std::exp(0.0)) - 0.0;
  CHECK(t.cls.item() == doctest::Approx((cls0 + cls1) / 2).epsilon(1e-12));
  CHECK(t.box.item() == doctest::Approx(box0).epsilon(1e-12));
  CHECK(t.total.item() == doctest::Approx((cls0 + cls1) / 2 + box0 + 0.3).epsilon(1e-12));
}

TEST_CASE("detection loss matches an explicit oracle") {
  Rng rng(88);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t f = 2 + rng.index(4), c = 1 + rng.index(4), n = 1 + rng.index(8);
    PredictorHead head = PredictorHead::create(f, rng);
    Tensor protos = testing::random_matrix(rng, c, f, false);
    RoIBatch b = random_batch(rng, n, f, c);
    Tape tape;
    LossTerms t = detection_loss(tape, head_forward(tape, b.features, protos, head), b, Tensor::scalar(0.0));
    auto [cls, box] = oracle_loss(b, protos, head);
    CHECK(t.cls.item() == doctest::Approx(cls).epsilon(1e-12));
    CHECK(t.box.item() == doctest::Approx(box).epsilon(1e-12));
  }
}

TEST_CASE("total loss gradients reach head and transfer parameters") {
  Rng rng(2718);
  double worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t c = 2 + rng.index(3), s = 3, f = 3;
    ProtoTransferNet net = ProtoTransferNet::create(s, f, c, rng);
    PredictorHead head = PredictorHead::create(f, rng);
    Tensor p0 = testing::random_matrix(rng, c, s, false, 0.1, 1.0);
    std::vector<double> a(c * c);
    for (double& x : a) x = rng.uniform(0.1, 1.0);
    Tensor prop = Tensor::matrix(c, c, row_normalize(a, c));
    RoIBatch b = random_batch(rng, 6, f, c);
    std::vector<std::size_t> labels(c);
    std::iota(labels.begin(), labels.end(), 0);
    std::vector<Tensor> params;
    for (const auto& p : net.parameters(true)) params.push_back(p.tensor);
    for (const auto& p : head.parameters()) params.push_back(p.tensor);
    auto loss = [&](Tape& tape) {
      PrototypeSet protos{p0, transfer(tape, p0, prop, net)};
      auto [r, q] = meta_logits(tape, protos, net);
      Tensor meta = meta_loss(tape, r, q, labels);
      return detection_loss(tape, head_forward(tape, b.features, *protos.refined, head), b, meta).total;
    };
    worst = std::max(worst, grad_check(loss, params));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("batches concatenate row-wise") {
  Rng rng(1);
  RoIBatch a = random_batch(rng, 2, 3, 2), b = random_batch(rng, 3, 3, 2);
  std::vector<RoIBatch> parts = {a, b};
  RoIBatch joined = concat(parts);
  CHECK(joined.size() == 5);
  CHECK(joined.features.rows() == 5);
  CHECK(joined.features.at(3, 1) == b.features.at(1, 1));
  CHECK(joined.labels[4] == b.labels[2]);
}

}  // TEST_SUITE
