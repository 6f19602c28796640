#include "fskt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fskt/errors.hpp"

namespace fskt {

std::string graph_name(GraphKind kind) { return kind == GraphKind::kSemantic ? "semantic" : "random"; }

// ---- configuration ---------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument("bad");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected on or off, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void set_config_value(RunConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "seed") c.seed = to_u64(key, v);
  else if (key == "split") c.split = static_cast<int>(to_u64(key, v));
  else if (key == "shots") c.shots = to_u64(key, v);
  else if (key == "support_dim") c.support_dim = to_u64(key, v);
  else if (key == "feature_dim") c.feature_dim = to_u64(key, v);
  else if (key == "sigma_n") c.sigma_n = to_double(key, v);
  else if (key == "support_sigma") c.support_sigma = to_double(key, v);
  else if (key == "threshold") c.threshold = to_double(key, v);
  else if (key == "lr_base") c.lr_base = to_double(key, v);
  else if (key == "lr_finetune") c.lr_finetune = to_double(key, v);
  else if (key == "momentum") c.momentum = to_double(key, v);
  else if (key == "weight_decay") c.weight_decay = to_double(key, v);
  else if (key == "batch_size") c.batch_size = to_u64(key, v);
  else if (key == "base_steps") c.base_steps = to_u64(key, v);
  else if (key == "finetune_steps") c.finetune_steps = to_u64(key, v);
  else if (key == "base_support_shots") c.base_support_shots = to_u64(key, v);
  else if (key == "eval_images") c.eval_images = to_u64(key, v);
  else if (key == "ablation_seeds") c.ablation_seeds = to_u64(key, v);
  else if (key == "skip") c.skip = to_switch(key, v);
  else if (key == "full_batch") c.full_batch = to_switch(key, v);
  else if (key == "identity_init") c.identity_init = to_switch(key, v);
  else if (key == "graph") {
    if (v == "semantic") c.graph = GraphKind::kSemantic;
    else if (v == "random") c.graph = GraphKind::kRandom;
    else throw ConfigError("graph: expected semantic or random, got '" + v + "'");
  } else if (key == "embeddings") c.embeddings = v;
  else if (key == "aliases") c.aliases = v;
  else if (key == "out") c.out = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "voc_dir") c.voc_dir = v;
  else throw ConfigError("unknown configuration key '" + key + "'");
}

void apply_config(RunConfig& config, std::istream& in) {
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", line_no);
    try {
      set_config_value(config, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  RunConfig c;
  apply_config(c, in);
  return c;
}

std::vector<std::string> validate_config(const RunConfig& c) {
  std::vector<std::string> warnings;
  if (c.split < 1 || c.split > 3) throw ConfigError("split must be 1, 2 or 3");
  if (c.shots == 0) throw ConfigError("shots must be positive");
  static const std::set<std::size_t> kGrid = {1, 2, 3, 5, 10};
  if (!kGrid.count(c.shots)) {
    warnings.push_back("shots = " + std::to_string(c.shots) + " is outside the usual grid 1, 2, 3, 5, 10");
  }
  if (c.support_dim == 0 || c.feature_dim == 0) throw ConfigError("dimensions must be positive");
  if (c.support_dim != c.feature_dim) {
    throw ConfigError("the synthetic task needs support_dim == feature_dim (got " +
                      std::to_string(c.support_dim) + " and " + std::to_string(c.feature_dim) + ")");
  }
  if (!(c.lr_base > 0.0) || !(c.lr_finetune > 0.0)) throw ConfigError("learning rates must be positive");
  if (c.momentum < 0.0 || c.weight_decay < 0.0) throw ConfigError("momentum and weight decay must be non-negative");
  if (c.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (c.sigma_n < 0.0 || c.support_sigma < 0.0) throw ConfigError("noise scales must be non-negative");
  if (c.base_support_shots == 0) throw ConfigError("base_support_shots must be positive");
  if (c.eval_images == 0) throw ConfigError("eval_images must be positive");
  return warnings;
}

std::string echo_config(const RunConfig& c) {
  std::ostringstream o;
  o << "seed = " << c.seed << '\n'
    << "split = " << c.split << '\n'
    << "shots = " << c.shots << '\n'
    << "support_dim = " << c.support_dim << '\n'
    << "feature_dim = " << c.feature_dim << '\n'
    << "sigma_n = " << fmt(c.sigma_n) << '\n'
    << "support_sigma = " << fmt(c.support_sigma) << '\n'
    << "threshold = " << fmt(c.threshold) << '\n'
    << "lr_base = " << fmt(c.lr_base) << '\n'
    << "lr_finetune = " << fmt(c.lr_finetune) << '\n'
    << "momentum = " << fmt(c.momentum) << '\n'
    << "weight_decay = " << fmt(c.weight_decay) << '\n'
    << "batch_size = " << c.batch_size << '\n'
    << "base_steps = " << c.base_steps << '\n'
    << "finetune_steps = " << c.finetune_steps << '\n'
    << "base_support_shots = " << c.base_support_shots << '\n'
    << "eval_images = " << c.eval_images << '\n'
    << "ablation_seeds = " << c.ablation_seeds << '\n'
    << "skip = " << (c.skip ? "on" : "off") << '\n'
    << "graph = " << graph_name(c.graph) << '\n'
    << "full_batch = " << (c.full_batch ? "on" : "off") << '\n'
    << "identity_init = " << (c.identity_init ? "on" : "off") << '\n'
    << "embeddings = " << c.embeddings.string() << '\n'
    << "aliases = " << c.aliases.string() << '\n'
    << "out = " << c.out.string() << '\n'
    << "checkpoint = " << c.checkpoint.string() << '\n'
    << "voc_dir = " << c.voc_dir.string() << '\n';
  return o.str();
}

SyntheticTaskSpec task_spec(const RunConfig& c) {
  SyntheticTaskSpec s;
  s.seed = c.seed;
  s.dim = c.feature_dim;
  s.sigma_n = c.sigma_n;
  s.support_sigma = c.support_sigma;
  s.query_images = c.batch_size;
  return s;
}

World make_world(const RunConfig& config) {
  validate_config(config);
  World w;
  w.categories = CategorySet::voc(config.split);
  const AliasTable aliases = AliasTable::load(config.aliases);
  std::set<std::string> tokens;
  for (const auto& n : w.categories.names()) tokens.insert(aliases.token(n));
  const WordEmbeddingTable table = load_embeddings_file(config.embeddings, tokens);
  w.semantic = build_adjacency(table, aliases, w.categories);
  w.graph = config.graph == GraphKind::kSemantic ? w.semantic
                                                 : random_adjacency(w.categories, config.seed);
  w.task = make_synthetic_task(task_spec(config), w.categories, w.semantic.adjacency);
  return w;
}

// ---- training --------------------------------------------------------------

namespace {

std::vector<NamedParameter> trainable(const Model& m, bool skip) {
  auto params = m.net.parameters(skip);
  for (auto& p : m.head.parameters()) params.push_back(p);
  return params;
}

std::vector<std::size_t> row_labels(std::size_t n) {
  std::vector<std::size_t> labels(n);
  std::iota(labels.begin(), labels.end(), std::size_t{0});
  return labels;
}

StepLoss train_step(const Model& model, const Tensor& p0, const Tensor& propagation,
                    const RoIBatch& batch, bool skip, SgdState& sgd, std::size_t step) {
  Tape tape;
  StepLoss rec;
  rec.step = step;
  // Components not reached before a failure print as nan.
  rec.cls = rec.box = rec.meta = rec.total = std::numeric_limits<double>::quiet_NaN();
  try {
    PrototypeSet protos{p0, transfer(tape, p0, propagation, model.net)};
    auto [refined, preliminary] = meta_logits(tape, protos, model.net);
    const auto labels = row_labels(p0.rows());
    Tensor meta = skip ? meta_loss(tape, refined, preliminary, labels)
                       : meta_loss_refined_only(tape, refined, labels);
    rec.meta = meta.item();
    HeadOutputs out = head_forward(tape, batch.features, *protos.refined, model.head);
    LossTerms terms = detection_loss(tape, out, batch, meta);
    rec.cls = terms.cls.item();
    rec.box = terms.box.item();
    rec.total = terms.total.item();
    tape.backward(terms.total);
  } catch (const NumericalError& e) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << " (l_cls=" << rec.cls << " l_box=" << rec.box
        << " l_meta=" << rec.meta << "): " << e.what();
    throw NumericalError(msg.str());
  }
  auto params = trainable(model, skip);
  for (auto& p : params) {
    // A parameter outside this step's graph has an exact zero gradient.
    if (!p.tensor.has_grad()) Tape::accumulate(p.tensor, std::vector<double>(p.tensor.size(), 0.0));
  }
  try {
    sgd_step(params, sgd);
  } catch (const NumericalError& e) {
    throw NumericalError("step " + std::to_string(step) + ": " + e.what());
  }
  return rec;
}

RoIBatch episode_batch(const Episode& ep) {
  std::vector<RoIBatch> parts;
  for (const auto& q : ep.queries) parts.push_back(q.rois);
  return concat(parts);
}

CategorySet label_set(const World& w, const std::vector<std::size_t>& labels) {
  return w.categories.subset(labels);
}

}  // namespace

TrainResult train(const RunConfig& config, const World& world, const TrainOptions& options) {
  validate_config(config);
  TrainResult result;
  Rng init(config.seed, "init");
  Rng sampling(config.seed, "sampling");
  Rng finetune_rng(config.seed, "finetune");

  const auto base = world.categories.base_indices();
  const std::size_t n_all = world.categories.size();
  NetInit net_init;
  net_init.identity_centred = config.identity_init;
  Model& model = result.model;
  model.net = ProtoTransferNet::create(config.support_dim, config.feature_dim, base.size(), init, net_init);
  model.head = PredictorHead::create(config.feature_dim, init, config.threshold);

  // Phase 1: base categories only.
  const Tensor base_prop = world.graph.subgraph(base).propagation_tensor();
  const CategorySet base_set = label_set(world, base);
  SgdState sgd_base(config.lr_base, config.momentum, config.weight_decay);
  std::optional<Episode> fixed;
  if (config.full_batch) fixed = make_base_episode(world.task, config.base_support_shots, sampling);
  std::size_t step = 0;
  for (std::size_t i = 0; i < config.base_steps; ++i) {
    const Episode ep = fixed ? *fixed : make_base_episode(world.task, config.base_support_shots, sampling);
    const Tensor p0 = pool_support(ep.support, base_set);
    result.log.push_back(train_step(model, p0, base_prop, episode_batch(ep), config.skip, sgd_base, ++step));
  }

  // K-shot set over every category, base rows first.
  const Episode ft = make_finetune_episode(world.task, config.shots, finetune_rng);
  model.label_categories = ft.label_categories;
  model.support_p0 = pool_support(ft.support, label_set(world, ft.label_categories));

  if (options.evaluate) {
    std::vector<double> rows(model.support_p0.values().begin(),
                             model.support_p0.values().begin() +
                                 static_cast<std::ptrdiff_t>(base.size() * config.support_dim));
    const Tensor base_p0 = Tensor::matrix(base.size(), config.support_dim, std::move(rows));
    result.base_phase_report = evaluate_prototypes(config, world, model, base_p0, base);
  }

  // Phase 2: fine-tuning on the K-shot images.
  model.net.grow_classifier(n_all, init);
  const Tensor all_prop = world.graph.subgraph(model.label_categories).propagation_tensor();
  SgdState sgd_ft(config.lr_finetune, config.momentum, config.weight_decay);
  std::vector<std::size_t> order(ft.queries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (std::size_t i = 0; i < config.finetune_steps; ++i) {
    std::vector<RoIBatch> parts;
    if (config.full_batch) {
      for (std::size_t q = 0; q < std::min(config.batch_size, order.size()); ++q) parts.push_back(ft.queries[q].rois);
    } else {
      while (parts.size() < std::min(config.batch_size, order.size())) {
        if (cursor == order.size()) {
          sampling.shuffle(order);
          cursor = 0;
        }
        parts.push_back(ft.queries[order[cursor++]].rois);
      }
    }
    result.log.push_back(
        train_step(model, model.support_p0, all_prop, concat(parts), config.skip, sgd_ft, ++step));
  }

  if (options.evaluate) result.final_report = evaluate_model(config, world, model);
  return result;
}

// ---- evaluation ------------------------------------------------------------

EvalReport evaluate_prototypes(const RunConfig& config, const World& world, const Model& model,
                               const Tensor& p0, const std::vector<std::size_t>& label_categories) {
  if (p0.rows() != label_categories.size()) {
    throw DimensionError("evaluation: prototypes " + shape_string(p0.shape()) + " for " +
                         std::to_string(label_categories.size()) + " categories");
  }
  Tape tape(Tape::Mode::kInference);
  const Tensor prop = world.graph.subgraph(label_categories).propagation_tensor();
  const Tensor p = transfer(tape, p0, prop, model.net);

  Rng rng(config.seed, "eval");
  std::vector<std::size_t> all(world.categories.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<bool> evaluated(all.size(), false);
  for (std::size_t c : label_categories) evaluated[c] = true;

  std::vector<DetectionRecord> records;
  std::vector<GroundTruth> truths;
  for (std::size_t i = 0; i < config.eval_images; ++i) {
    const AnnotatedImage img = generate_image(world.task, all, rng, "eval-" + std::to_string(i));
    const RoIBatch rois = image_rois(world.task, img, std::vector<int>(img.instances.size(), kBackground), rng);
    for (const auto& inst : img.instances)
      if (evaluated[inst.category]) truths.push_back(GroundTruth{i, inst.category, inst.box});
    const auto preds = predict_batch(rois.features, p, model.head);
    std::vector<Detection> dets;
    for (std::size_t r = 0; r < preds.size(); ++r) {
      auto d = decide(preds[r].scores, preds[r].deltas, rois.proposals[r], model.head.threshold);
      if (d) dets.push_back(*d);
    }
    for (const auto& d : nms(std::move(dets)))
      records.push_back(DetectionRecord{i, label_categories[d.category], d.confidence, d.box});
  }

  std::vector<std::optional<double>> ap(all.size());
  for (std::size_t c : label_categories) {
    std::vector<DetectionRecord> dc;
    std::vector<GroundTruth> gc;
    for (const auto& d : records)
      if (d.category == c) dc.push_back(d);
    for (const auto& g : truths)
      if (g.category == c) gc.push_back(g);
    ap[c] = average_precision(match_detections(dc, gc));
  }
  return mean_ap(std::move(ap), world.categories);
}

EvalReport evaluate_model(const RunConfig& config, const World& world, const Model& model) {
  return evaluate_prototypes(config, world, model, model.support_p0, model.label_categories);
}

// ---- checkpoints -----------------------------------------------------------

namespace {

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  out << "tensor " << name << ' ' << t.rank();
  for (std::size_t d : t.shape()) out << ' ' << d;
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", t[i]);
    out << (i ? " " : "") << buf;
  }
  out << '\n';
}

}  // namespace

void save_checkpoint(std::ostream& out, const Model& model) {
  out << "fskt-checkpoint 1\n";
  out << "threshold " << fmt(model.head.threshold) << '\n';
  out << "labels " << model.label_categories.size();
  for (std::size_t c : model.label_categories) out << ' ' << c;
  out << '\n';
  write_tensor(out, "gcn1.theta", model.net.layer1.theta);
  write_tensor(out, "gcn2.theta", model.net.layer2.theta);
  write_tensor(out, "residual", model.net.residual);
  write_tensor(out, "projection", model.net.projection);
  write_tensor(out, "meta.w_cls", model.net.w_cls);
  for (const auto& p : model.head.parameters()) write_tensor(out, p.name, p.tensor);
  if (model.support_p0.rank() == 2) write_tensor(out, "support.p0", model.support_p0);
}

Model load_checkpoint(std::istream& in, const RunConfig& config, const World& world) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw ParseError("checkpoint ends early", line_no + 1);
    ++line_no;
    return line;
  };
  if (next_line() != "fskt-checkpoint 1") throw ParseError("not a checkpoint file", line_no);
  Model m;
  double threshold = config.threshold;
  std::map<std::string, Tensor> tensors;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream head(line);
    std::string kind;
    head >> kind;
    if (kind == "threshold") {
      if (!(head >> threshold)) throw ParseError("bad threshold", line_no);
    } else if (kind == "labels") {
      std::size_t n = 0;
      if (!(head >> n)) throw ParseError("bad label list", line_no);
      m.label_categories.resize(n);
      for (auto& c : m.label_categories) {
        if (!(head >> c) || c >= world.categories.size()) throw ParseError("bad label list", line_no);
      }
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rank = 0;
      if (!(head >> name >> rank)) throw ParseError("bad tensor header", line_no);
      Shape shape(rank);
      for (auto& d : shape)
        if (!(head >> d)) throw ParseError("bad tensor shape", line_no);
      const std::size_t header_line = line_no;
      std::istringstream body(next_line());
      std::vector<double> values;
      for (std::string tok; body >> tok;) {
        try {
          values.push_back(std::stod(tok));
        } catch (const std::exception&) {
          throw ParseError("bad value '" + tok + "'", line_no);
        }
      }
      if (values.size() != shape_size(shape)) {
        throw ParseError("tensor '" + name + "' has " + std::to_string(values.size()) + " values for shape " +
                             shape_string(shape),
                         header_line);
      }
      tensors[name] = Tensor(shape, std::move(values), name != "support.p0");
    } else {
      throw ParseError("unknown record '" + kind + "'", line_no);
    }
  }

  auto take = [&](const std::string& name, const Shape& expected) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != expected) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                           ", configuration expects " + shape_string(expected));
    }
    return it->second;
  };
  const std::size_t s = config.support_dim, f = config.feature_dim;
  const std::size_t c = m.label_categories.empty() ? world.categories.base_indices().size()
                                                   : m.label_categories.size();
  m.net.layer1.theta = take("gcn1.theta", {s, f});
  m.net.layer2.theta = take("gcn2.theta", {f, f});
  m.net.residual = take("residual", {s, f});
  m.net.projection = take("projection", {s, f});
  if (s == f) {
    // Fixed identities, not trained.
    m.net.residual = m.net.residual.detach();
    m.net.projection = m.net.projection.detach();
  }
  m.net.w_cls = take("meta.w_cls", {f, c});
  m.head.cls_w = take("head.cls_w", {2, f});
  m.head.cls_b = take("head.cls_b", {2, 1});
  m.head.reg_w = take("head.reg_w", {4, f});
  m.head.reg_b = take("head.reg_b", {4, 1});
  m.head.threshold = threshold;
  if (!m.label_categories.empty()) m.support_p0 = take("support.p0", {c, s});
  return m;
}

// ---- ablation --------------------------------------------------------------

AblationSummary ablate(const RunConfig& config, std::size_t seeds) {
  AblationSummary summary;
  summary.seeds = seeds;
  for (std::size_t k = 0; k < seeds; ++k) {
    double novel[2][2] = {};  // [skip][graph]
    for (int skip = 1; skip >= 0; --skip) {
      for (GraphKind g : {GraphKind::kSemantic, GraphKind::kRandom}) {
        RunConfig c = config;
        c.seed = config.seed + k;
        c.skip = skip == 1;
        c.graph = g;
        const World world = make_world(c);
        const TrainResult r = train(c, world);
        AblationRow row;
        row.seed = c.seed;
        row.skip = c.skip;
        row.graph = g;
        row.novel_map = r.final_report->novel_mean.value_or(0.0);
        row.base_map = r.final_report->base_mean.value_or(0.0);
        row.base_map_before_finetune = r.base_phase_report->base_mean.value_or(0.0);
        novel[skip][g == GraphKind::kSemantic ? 0 : 1] = row.novel_map;
        summary.rows.push_back(row);
      }
    }
    if (novel[1][0] > novel[1][1]) ++summary.semantic_wins;
    if (novel[1][0] >= novel[0][0]) ++summary.skip_wins;
  }
  return summary;
}

// ---- files and commands ----------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

namespace {

std::string hex_hash(const std::string& text) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(stable_hash(text)));
  return buf;
}

std::string loss_csv(const std::vector<StepLoss>& log) {
  std::ostringstream o;
  o << "step,l_cls,l_box,l_meta,total\n";
  for (const auto& s : log) o << s.step << ',' << fmt(s.cls) << ',' << fmt(s.box) << ',' << fmt(s.meta) << ',' << fmt(s.total) << '\n';
  return o.str();
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream o;
  write_report_csv(o, r);
  return o.str();
}

std::filesystem::path checkpoint_path(const RunConfig& c) {
  return c.checkpoint.empty() ? c.out / "checkpoint.txt" : c.checkpoint;
}

// Parses every *.xml under voc_dir; `category,instances,images` rows.
std::string voc_counts(const RunConfig& config, const CategorySet& categories) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(config.voc_dir)) throw IoError("not a directory: " + config.voc_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(config.voc_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".xml") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  const AliasTable aliases = AliasTable::load(config.aliases);
  std::vector<std::size_t> instances(categories.size(), 0), images(categories.size(), 0);
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw IoError("cannot open " + f.string());
    std::stringstream text;
    text << in.rdbuf();
    AnnotatedImage img;
    const std::string where = f.filename().string() + ": ";
    try {
      img = parse_voc_annotation(text.str(), aliases, categories);
    } catch (const ParseError& e) {
      throw ParseError(where + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    } catch (const LookupError& e) {
      throw LookupError(where + e.what());
    }
    std::set<std::size_t> seen;
    for (const auto& inst : img.instances) {
      ++instances[inst.category];
      seen.insert(inst.category);
    }
    for (std::size_t c : seen) ++images[c];
  }
  std::ostringstream o;
  o << "category,instances,images\n";
  for (std::size_t c = 0; c < categories.size(); ++c)
    o << categories.name(c) << ',' << instances[c] << ',' << images[c] << '\n';
  return o.str();
}

}  // namespace

std::string cmd_build_graph(const RunConfig& config) {
  const World world = make_world(config);
  const MetaGraph& g = world.graph;
  std::ostringstream adj, prop;
  write_matrix_csv(adj, g.categories, g.adjacency);
  write_matrix_csv(prop, g.categories, g.propagation);
  const GraphDiagnostics d = diagnose(g);
  std::ostringstream stats;
  stats << "graph=" << graph_name(config.graph) << " categories=" << g.size()
        << " max_asymmetry=" << fmt(d.max_asymmetry) << " max_row_sum_error=" << fmt(d.max_row_sum_error)
        << " min_entry=" << fmt(d.min_entry) << " max_entry=" << fmt(d.max_entry)
        << " max_diagonal_error=" << fmt(d.max_diagonal_error) << '\n';
  write_file_atomic(config.out / "adjacency.csv", adj.str());
  write_file_atomic(config.out / "propagation.csv", prop.str());
  write_file_atomic(config.out / "graph_stats.txt", stats.str());
  if (!config.voc_dir.empty()) write_file_atomic(config.out / "voc_counts.csv", voc_counts(config, g.categories));
  return stats.str();
}

std::string cmd_train(const RunConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  const World world = make_world(config);
  const TrainResult r = train(config, world);
  std::ostringstream ckpt;
  save_checkpoint(ckpt, r.model);
  const std::string losses = loss_csv(r.log);
  const std::string eval = report_csv(*r.final_report);
  const std::string base_eval = report_csv(*r.base_phase_report);
  const std::string echo = echo_config(config);
  write_file_atomic(checkpoint_path(config), ckpt.str());
  write_file_atomic(config.out / "losses.csv", losses);
  write_file_atomic(config.out / "eval.csv", eval);
  write_file_atomic(config.out / "eval_base_phase.csv", base_eval);
  write_file_atomic(config.out / "config.txt", echo);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  nlohmann::json record;
  record["config"] = echo;
  record["threshold"] = config.threshold;
  record["steps"] = r.log.size();
  record["final"] = summary_line(*r.final_report);
  record["base_phase"] = summary_line(*r.base_phase_report);
  record["wall_clock_seconds"] = seconds;
  record["checksums"] = {{"checkpoint", hex_hash(ckpt.str())},
                         {"losses", hex_hash(losses)},
                         {"eval", hex_hash(eval)}};
  write_file_atomic(config.out / "run.json", record.dump(2) + "\n");
  return "after base phase: " + summary_line(*r.base_phase_report) + "\nfinal: " +
         summary_line(*r.final_report) + " threshold=" + fmt(config.threshold) + "\n";
}

std::string cmd_eval(const RunConfig& config) {
  const World world = make_world(config);
  const auto path = checkpoint_path(config);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const Model model = load_checkpoint(in, config, world);
  if (model.label_categories.empty()) throw ValidationError("checkpoint has no fine-tuned support set");
  const EvalReport report = evaluate_model(config, world, model);
  write_file_atomic(config.out / "eval.csv", report_csv(report));
  return summary_line(report) + " threshold=" + fmt(model.head.threshold) + "\n";
}

std::string cmd_ablate(const RunConfig& config) {
  const AblationSummary s = ablate(config, config.ablation_seeds);
  std::ostringstream table;
  table << "seed,skip,graph,novel_map,base_map,base_map_before_finetune\n";
  for (const auto& r : s.rows) {
    table << r.seed << ',' << (r.skip ? "on" : "off") << ',' << graph_name(r.graph) << ',' << fmt(r.novel_map)
          << ',' << fmt(r.base_map) << ',' << fmt(r.base_map_before_finetune) << '\n';
  }
  std::ostringstream summary;
  summary << "condition,novel_map_mean,base_map_mean\n";
  char buf[128];
  for (int skip = 1; skip >= 0; --skip) {
    for (GraphKind g : {GraphKind::kSemantic, GraphKind::kRandom}) {
      double nov = 0.0, base = 0.0;
      std::size_t n = 0;
      for (const auto& r : s.rows) {
        if (r.skip != (skip == 1) || r.graph != g) continue;
        nov += r.novel_map;
        base += r.base_map;
        ++n;
      }
      std::snprintf(buf, sizeof buf, "skip_%s/%s,%.4f,%.4f\n", skip ? "on" : "off", graph_name(g).c_str(),
                    n ? nov / n : 0.0, n ? base / n : 0.0);
      summary << buf;
    }
  }
  std::ostringstream wins;
  wins << "semantic_beats_random=" << s.semantic_wins << '/' << s.seeds << " skip_on_at_least_off=" << s.skip_wins
       << '/' << s.seeds << '\n';
  write_file_atomic(config.out / "ablation.csv", table.str());
  write_file_atomic(config.out / "ablation_summary.csv", summary.str() + wins.str());
  write_file_atomic(config.out / "config.txt", echo_config(config));
  return summary.str() + wins.str();
}

}  // namespace fskt
