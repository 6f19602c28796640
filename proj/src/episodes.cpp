#include "fskt/episodes.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

#include "fskt/errors.hpp"

namespace fskt {

namespace {

std::string box_string(const Box& b) {
  std::ostringstream s;
  s << '(' << b.xmin << ", " << b.ymin << ", " << b.xmax << ", " << b.ymax << ')';
  return s.str();
}

double squared_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

void validate_image(const AnnotatedImage& image) {
  if (!(image.width > 0.0 && image.height > 0.0)) {
    throw ValidationError("image '" + image.id + "' has non-positive size");
  }
  for (const auto& inst : image.instances) {
    const Box& b = inst.box;
    if (!b.well_ordered()) {
      throw ValidationError("image '" + image.id + "': box " + box_string(b) + " is not well-ordered");
    }
    if (b.xmin < 0.0 || b.ymin < 0.0 || b.xmax > image.width || b.ymax > image.height) {
      throw ValidationError("image '" + image.id + "': box " + box_string(b) +
                            " leaves the image");
    }
  }
}

std::vector<std::uint8_t> mask_for(const Box& box, double width, double height, std::size_t grid) {
  if (grid == 0) throw ValidationError("mask grid must be positive");
  const double cw = width / static_cast<double>(grid);
  const double ch = height / static_cast<double>(grid);
  std::vector<std::uint8_t> mask(grid * grid, 0);
  for (std::size_t r = 0; r < grid; ++r) {
    const double y0 = static_cast<double>(r) * ch, y1 = y0 + ch;
    const double oy = std::min(box.ymax, y1) - std::max(box.ymin, y0);
    for (std::size_t c = 0; c < grid; ++c) {
      const double x0 = static_cast<double>(c) * cw, x1 = x0 + cw;
      const double ox = std::min(box.xmax, x1) - std::max(box.xmin, x0);
      if (ox > 0.0 && oy > 0.0) mask[r * grid + c] = 1;
    }
  }
  auto cell = [&](double v, double size) {
    const double k = std::floor(v / size);
    return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(grid - 1)));
  };
  const double cx = 0.5 * (box.xmin + box.xmax), cy = 0.5 * (box.ymin + box.ymax);
  mask[cell(cy, ch) * grid + cell(cx, cw)] = 1;
  return mask;
}

// ---- K-shot sampling -------------------------------------------------------

std::size_t KShotSelection::count(std::size_t category,
                                  const std::vector<AnnotatedImage>& pool) const {
  std::size_t n = 0;
  for (const auto& s : images) {
    const auto& inst = pool.at(s.image).instances;
    for (std::size_t i = 0; i < inst.size(); ++i)
      if (s.selected[i] && inst[i].category == category) ++n;
  }
  return n;
}

KShotSelection sample_kshot(const std::vector<AnnotatedImage>& pool,
                            const std::vector<std::size_t>& categories, std::size_t k, Rng& rng,
                            const CategorySet* names) {
  if (k == 0) throw ValidationError("K must be positive");
  std::map<std::size_t, std::size_t> quota;
  for (std::size_t c : categories) quota[c] = k;

  std::map<std::size_t, std::size_t> available;
  for (const auto& img : pool)
    for (const auto& inst : img.instances)
      if (quota.count(inst.category)) ++available[inst.category];
  std::string shortfall;
  for (const auto& [c, q] : quota) {
    if (available[c] < q) {
      const std::string label = names ? names->name(c) : std::to_string(c);
      shortfall += (shortfall.empty() ? "" : ", ") + label + " " + std::to_string(available[c]) +
                   "/" + std::to_string(q);
    }
  }
  if (!shortfall.empty()) {
    throw ValidationError("not enough instances for " + std::to_string(k) + "-shot sampling: " + shortfall);
  }

  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::size_t remaining = quota.size() * k;
  KShotSelection sel;
  for (std::size_t idx : order) {
    if (remaining == 0) break;
    const auto& inst = pool[idx].instances;
    SelectedImage s{idx, std::vector<bool>(inst.size(), false)};
    bool useful = false;
    for (std::size_t i = 0; i < inst.size(); ++i) {
      auto q = quota.find(inst[i].category);
      if (q == quota.end() || q->second == 0) continue;
      --q->second;
      --remaining;
      s.selected[i] = true;
      useful = true;
    }
    if (useful) sel.images.push_back(std::move(s));
  }
  return sel;
}

// ---- synthetic task --------------------------------------------------------

std::vector<double> mix_prototypes(const std::vector<double>& weights,
                                   const std::vector<std::vector<double>>& base, double norm) {
  if (weights.size() != base.size() || base.empty()) {
    throw DimensionError("mix_prototypes: one weight per base prototype required");
  }
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ValidationError("mix_prototypes: negative weight");
    total += w;
  }
  std::vector<double> out(base.front().size(), 0.0);
  for (std::size_t b = 0; b < base.size(); ++b) {
    const double w = total > 0.0 ? weights[b] : 1.0;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * base[b][j];
  }
  const double n = std::sqrt(squared_norm(out));
  if (n == 0.0) throw NumericalError("mix_prototypes: mixture has zero norm");
  for (double& v : out) v *= norm / n;
  return out;
}

SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec, const CategorySet& categories,
                                  const std::vector<double>& similarity) {
  const std::size_t c = categories.size();
  if (similarity.size() != c * c) throw DimensionError("similarity matrix does not match categories");
  if (spec.dim == 0 || spec.grid == 0 || spec.rois_per_image == 0 || spec.query_images == 0) {
    throw ConfigError("synthetic task sizes must be positive");
  }
  if (spec.min_instances == 0 || spec.min_instances > spec.max_instances) {
    throw ConfigError("instances per image must satisfy 1 <= min <= max");
  }
  if (spec.sigma_n < 0.0 || spec.support_sigma < 0.0 || spec.background_sigma < 0.0 ||
      !(spec.prototype_norm > 0.0)) {
    throw ConfigError("synthetic noise scales must be non-negative and the norm positive");
  }
  if (!(spec.min_box > 0.0 && spec.min_box <= spec.max_box && spec.max_box <= spec.image_size)) {
    throw ConfigError("box sizes must satisfy 0 < min <= max <= image size");
  }

  SyntheticTask task{spec, categories, std::vector<std::vector<double>>(c)};
  Rng rng(spec.seed, "prototypes");
  const auto base = categories.base_indices();
  std::vector<std::vector<double>> base_g;
  for (std::size_t b : base) {
    std::vector<double> g(spec.dim);
    do {
      for (double& v : g) v = std::max(0.0, rng.normal(spec.prototype_shift, 1.0));
    } while (squared_norm(g) == 0.0);
    const double n = std::sqrt(squared_norm(g));
    for (double& v : g) v *= spec.prototype_norm / n;
    for (const auto& other : base_g) {
      double d = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) d += (g[j] - other[j]) * (g[j] - other[j]);
      if (d == 0.0) throw NumericalError("synthetic base prototypes coincide");
    }
    task.prototypes[b] = g;
    base_g.push_back(std::move(g));
  }
  for (std::size_t n : categories.novel_indices()) {
    std::vector<double> w;
    for (std::size_t b : base) w.push_back(similarity[n * c + b]);
    task.prototypes[n] = mix_prototypes(w, base_g, spec.prototype_norm);
  }
  return task;
}

AnnotatedImage generate_image(const SyntheticTask& task, const std::vector<std::size_t>& allowed,
                              Rng& rng, std::string id) {
  if (allowed.empty()) throw ValidationError("generate_image: no categories allowed");
  const auto& s = task.spec;
  AnnotatedImage img;
  img.id = std::move(id);
  img.width = img.height = s.image_size;
  img.source = AnnotatedImage::Source::kSynthetic;
  const std::size_t n = s.min_instances + rng.index(s.max_instances - s.min_instances + 1);
  for (std::size_t i = 0; i < n; ++i) {
    Instance inst;
    inst.category = allowed[rng.index(allowed.size())];
    const double w = rng.uniform(s.min_box, s.max_box);
    const double h = rng.uniform(s.min_box, s.max_box);
    const double x = rng.uniform(0.0, s.image_size - w);
    const double y = rng.uniform(0.0, s.image_size - h);
    inst.box = Box{x, y, x + w, y + h};
    img.instances.push_back(inst);
  }
  return img;
}

namespace {

Box jitter(const Box& b, double amount, Rng& rng) {
  const Deltas d{rng.normal(0.0, amount), rng.normal(0.0, amount), rng.normal(0.0, amount),
                 rng.normal(0.0, amount)};
  return apply_deltas(b, d);
}

}  // namespace

RoIBatch image_rois(const SyntheticTask& task, const AnnotatedImage& image,
                    const std::vector<int>& labels, Rng& rng) {
  const auto& s = task.spec;
  if (labels.size() != image.instances.size()) {
    throw DimensionError("image_rois: one label per instance required");
  }
  RoIBatch batch;
  std::vector<double> values;
  for (std::size_t i = 0; i < image.instances.size(); ++i) {
    const Instance& inst = image.instances[i];
    const auto& g = task.prototypes.at(inst.category);
    for (std::size_t r = 0; r < s.proposals_per_instance; ++r) {
      const Box p = jitter(inst.box, s.proposal_jitter, rng);
      for (std::size_t j = 0; j < s.dim; ++j) values.push_back(g[j] + rng.normal(0.0, s.sigma_n));
      batch.proposals.push_back(p);
      batch.labels.push_back(labels[i]);
      if (labels[i] >= 0)
        batch.targets.emplace_back(encode_deltas(p, inst.box));
      else
        batch.targets.emplace_back(std::nullopt);
    }
  }
  while (batch.labels.size() < s.rois_per_image) {
    const double lo = 0.5 * s.min_box, hi = lo + (s.max_box - s.min_box);
    const double w = rng.uniform(lo, hi);
    const double h = rng.uniform(lo, hi);
    const double x = rng.uniform(0.0, s.image_size - w);
    const double y = rng.uniform(0.0, s.image_size - h);
    for (std::size_t j = 0; j < s.dim; ++j) values.push_back(rng.normal(0.0, s.background_sigma));
    batch.proposals.push_back(Box{x, y, x + w, y + h});
    batch.labels.push_back(kBackground);
    batch.targets.emplace_back(std::nullopt);
  }
  batch.features = Tensor::matrix(batch.labels.size(), s.dim, std::move(values));
  return batch;
}

SupportEntry support_entry(const SyntheticTask& task, const AnnotatedImage& image,
                           std::size_t instance, std::size_t label, Rng& rng) {
  const auto& s = task.spec;
  const Instance& inst = image.instances.at(instance);
  SupportEntry e;
  e.category = label;
  e.grid = s.grid;
  e.dim = s.dim;
  e.mask = mask_for(inst.box, image.width, image.height, s.grid);
  std::size_t m = 0;
  for (auto v : e.mask) m += v;
  const double cell_sigma = s.support_sigma * std::sqrt(static_cast<double>(m));
  const auto& g = task.prototypes.at(inst.category);
  e.features.reserve(e.mask.size() * s.dim);
  for (auto on : e.mask) {
    for (std::size_t j = 0; j < s.dim; ++j) {
      e.features.push_back(on ? g[j] + rng.normal(0.0, cell_sigma)
                              : rng.normal(0.0, s.background_sigma));
    }
  }
  return e;
}

namespace {

std::vector<std::size_t> phase_order(const CategorySet& cats) {
  auto order = cats.base_indices();
  auto novel = cats.novel_indices();
  order.insert(order.end(), novel.begin(), novel.end());
  return order;
}

}  // namespace

Episode make_base_episode(const SyntheticTask& task, std::size_t k, Rng& rng) {
  if (k == 0) throw ValidationError("K must be positive");
  Episode ep;
  ep.phase = Episode::Phase::kBase;
  ep.shots = k;
  ep.label_categories = task.categories.base_indices();
  std::map<std::size_t, int> label_of;
  for (std::size_t i = 0; i < ep.label_categories.size(); ++i)
    label_of[ep.label_categories[i]] = static_cast<int>(i);

  for (std::size_t i = 0; i < ep.label_categories.size(); ++i) {
    for (std::size_t shot = 0; shot < k; ++shot) {
      AnnotatedImage img = generate_image(task, {ep.label_categories[i]}, rng, "support");
      img.instances.resize(1);
      ep.support.push_back(support_entry(task, img, 0, i, rng));
    }
  }
  std::vector<std::size_t> all(task.categories.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  for (std::size_t q = 0; q < task.spec.query_images; ++q) {
    QueryImage query{generate_image(task, all, rng, "base-query-" + std::to_string(q)), {}};
    std::vector<int> labels;
    for (const auto& inst : query.image.instances) {
      auto it = label_of.find(inst.category);
      labels.push_back(it == label_of.end() ? kBackground : it->second);
    }
    query.rois = image_rois(task, query.image, labels, rng);
    ep.queries.push_back(std::move(query));
  }
  return ep;
}

Episode make_finetune_episode(const SyntheticTask& task, std::size_t k, Rng& rng) {
  Episode ep;
  ep.phase = Episode::Phase::kFineTune;
  ep.shots = k;
  ep.label_categories = phase_order(task.categories);
  std::map<std::size_t, int> label_of;
  for (std::size_t i = 0; i < ep.label_categories.size(); ++i)
    label_of[ep.label_categories[i]] = static_cast<int>(i);

  std::vector<std::size_t> all(task.categories.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<AnnotatedImage> pool;
  for (std::size_t i = 0; i < task.spec.finetune_pool; ++i)
    pool.push_back(generate_image(task, all, rng, "pool-" + std::to_string(i)));

  const KShotSelection sel = sample_kshot(pool, all, k, rng, &task.categories);
  for (const auto& s : sel.images) {
    const AnnotatedImage& img = pool[s.image];
    std::vector<int> labels;
    for (std::size_t i = 0; i < img.instances.size(); ++i) {
      if (!s.selected[i]) {
        labels.push_back(kIgnore);
        continue;
      }
      const int label = label_of.at(img.instances[i].category);
      labels.push_back(label);
      ep.support.push_back(support_entry(task, img, i, static_cast<std::size_t>(label), rng));
    }
    ep.queries.push_back(QueryImage{img, image_rois(task, img, labels, rng)});
  }
  return ep;
}

Episode synth_generate(const SyntheticTask& task, Episode::Phase phase, std::size_t k,
                       std::uint64_t seed) {
  Rng rng(seed, phase == Episode::Phase::kBase ? "episode-base" : "episode-finetune");
  return phase == Episode::Phase::kBase ? make_base_episode(task, k, rng)
                                        : make_finetune_episode(task, k, rng);
}

// ---- episode dump ----------------------------------------------------------

namespace {

using nlohmann::json;

json box_json(const Box& b) { return json::array({b.xmin, b.ymin, b.xmax, b.ymax}); }

Box box_from(const json& j) {
  return Box{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
             j.at(3).get<double>()};
}

json spec_json(const SyntheticTaskSpec& s) {
  return json{{"seed", s.seed},
              {"dim", s.dim},
              {"sigma_n", s.sigma_n},
              {"support_sigma", s.support_sigma},
              {"prototype_norm", s.prototype_norm},
              {"prototype_shift", s.prototype_shift},
              {"background_sigma", s.background_sigma},
              {"rois_per_image", s.rois_per_image},
              {"proposals_per_instance", s.proposals_per_instance},
              {"proposal_jitter", s.proposal_jitter},
              {"min_instances", s.min_instances},
              {"max_instances", s.max_instances},
              {"image_size", s.image_size},
              {"min_box", s.min_box},
              {"max_box", s.max_box},
              {"grid", s.grid},
              {"query_images", s.query_images},
              {"finetune_pool", s.finetune_pool}};
}

SyntheticTaskSpec spec_from(const json& j) {
  SyntheticTaskSpec s;
  j.at("seed").get_to(s.seed);
  j.at("dim").get_to(s.dim);
  j.at("sigma_n").get_to(s.sigma_n);
  j.at("support_sigma").get_to(s.support_sigma);
  j.at("prototype_norm").get_to(s.prototype_norm);
  j.at("prototype_shift").get_to(s.prototype_shift);
  j.at("background_sigma").get_to(s.background_sigma);
  j.at("rois_per_image").get_to(s.rois_per_image);
  j.at("proposals_per_instance").get_to(s.proposals_per_instance);
  j.at("proposal_jitter").get_to(s.proposal_jitter);
  j.at("min_instances").get_to(s.min_instances);
  j.at("max_instances").get_to(s.max_instances);
  j.at("image_size").get_to(s.image_size);
  j.at("min_box").get_to(s.min_box);
  j.at("max_box").get_to(s.max_box);
  j.at("grid").get_to(s.grid);
  j.at("query_images").get_to(s.query_images);
  j.at("finetune_pool").get_to(s.finetune_pool);
  return s;
}

}  // namespace

std::string dump_episode(const Episode& episode, const SyntheticTaskSpec& spec, std::uint64_t seed) {
  json j;
  j["format"] = "fskt-episode";
  j["version"] = 1;
  j["seed"] = seed;
  j["spec"] = spec_json(spec);
  j["phase"] = episode.phase == Episode::Phase::kBase ? "base" : "finetune";
  j["shots"] = episode.shots;
  j["label_categories"] = episode.label_categories;
  json support = json::array();
  for (const auto& e : episode.support) {
    support.push_back(json{{"category", e.category},
                           {"grid", e.grid},
                           {"dim", e.dim},
                           {"features", e.features},
                           {"mask", e.mask}});
  }
  j["support"] = std::move(support);
  json queries = json::array();
  for (const auto& q : episode.queries) {
    json inst = json::array();
    for (const auto& i : q.image.instances) inst.push_back(json{{"category", i.category}, {"box", box_json(i.box)}});
    json proposals = json::array();
    for (const auto& p : q.rois.proposals) proposals.push_back(box_json(p));
    json targets = json::array();
    for (const auto& t : q.rois.targets) targets.push_back(t ? json(*t) : json(nullptr));
    const auto fv = q.rois.features.values();
    queries.push_back(json{
        {"image",
         {{"id", q.image.id}, {"width", q.image.width}, {"height", q.image.height}, {"instances", inst}}},
        {"rois",
         {{"rows", q.rois.features.rows()},
          {"cols", q.rois.features.cols()},
          {"features", std::vector<double>(fv.begin(), fv.end())},
          {"proposals", proposals},
          {"labels", q.rois.labels},
          {"targets", targets}}}});
  }
  j["queries"] = std::move(queries);
  return j.dump(1);
}

LoadedEpisode load_episode(const std::string& json_text) {
  try {
    const json j = json::parse(json_text);
    if (j.at("format") != "fskt-episode") throw ParseError("not an episode dump");
    LoadedEpisode out;
    out.seed = j.at("seed").get<std::uint64_t>();
    out.spec = spec_from(j.at("spec"));
    Episode& ep = out.episode;
    const std::string phase = j.at("phase").get<std::string>();
    if (phase != "base" && phase != "finetune") throw ParseError("unknown phase '" + phase + "'");
    ep.phase = phase == "base" ? Episode::Phase::kBase : Episode::Phase::kFineTune;
    ep.shots = j.at("shots").get<std::size_t>();
    ep.label_categories = j.at("label_categories").get<std::vector<std::size_t>>();
    for (const auto& e : j.at("support")) {
      SupportEntry s;
      e.at("category").get_to(s.category);
      e.at("grid").get_to(s.grid);
      e.at("dim").get_to(s.dim);
      e.at("features").get_to(s.features);
      e.at("mask").get_to(s.mask);
      ep.support.push_back(std::move(s));
    }
    for (const auto& q : j.at("queries")) {
      QueryImage query;
      const auto& im = q.at("image");
      query.image.id = im.at("id").get<std::string>();
      query.image.width = im.at("width").get<double>();
      query.image.height = im.at("height").get<double>();
      for (const auto& i : im.at("instances"))
        query.image.instances.push_back(Instance{i.at("category").get<std::size_t>(), box_from(i.at("box"))});
      const auto& r = q.at("rois");
      query.rois.features = Tensor::matrix(r.at("rows").get<std::size_t>(), r.at("cols").get<std::size_t>(),
                                           r.at("features").get<std::vector<double>>());
      for (const auto& p : r.at("proposals")) query.rois.proposals.push_back(box_from(p));
      query.rois.labels = r.at("labels").get<std::vector<int>>();
      for (const auto& t : r.at("targets")) {
        if (t.is_null())
          query.rois.targets.emplace_back(std::nullopt);
        else
          query.rois.targets.emplace_back(t.get<Deltas>());
      }
      if (query.rois.proposals.size() != query.rois.size() ||
          query.rois.targets.size() != query.rois.size() ||
          query.rois.features.rows() != query.rois.size()) {
        throw ParseError("episode dump: RoI arrays of different length");
      }
      ep.queries.push_back(std::move(query));
    }
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("episode dump: ") + e.what());
  }
}

// ---- VOC annotations -------------------------------------------------------

namespace {

namespace pt = boost::property_tree;

const pt::ptree& child(const pt::ptree& node, const std::string& key, const std::string& path) {
  auto c = node.get_child_optional(pt::ptree::path_type(key, '/'));
  if (!c) throw ParseError("missing element '" + path + "'");
  return *c;
}

long parse_int(const pt::ptree& node, const std::string& key, const std::string& path) {
  std::string text = child(node, key, path).get_value<std::string>();
  const auto first = text.find_first_not_of(" \t\r\n");
  const auto last = text.find_last_not_of(" \t\r\n");
  text = first == std::string::npos ? "" : text.substr(first, last - first + 1);
  long value = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ParseError("element '" + path + "' is not an integer: '" + text + "'");
  }
  return value;
}

}  // namespace

AnnotatedImage parse_voc_annotation(const std::string& xml, const AliasTable& aliases,
                                    const CategorySet& categories) {
  pt::ptree tree;
  try {
    std::istringstream in(xml);
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw ParseError("malformed XML: " + e.message(), e.line());
  }
  const pt::ptree& root = child(tree, "annotation", "annotation");
  AnnotatedImage img;
  img.source = AnnotatedImage::Source::kVocXml;
  img.id = root.get<std::string>("filename", "");
  const pt::ptree& size = child(root, "size", "size");
  img.width = static_cast<double>(parse_int(size, "width", "size/width"));
  img.height = static_cast<double>(parse_int(size, "height", "size/height"));
  if (!(img.width > 0.0 && img.height > 0.0)) throw ValidationError("image size must be positive");

  for (const auto& [key, obj] : root) {
    if (key != "object") continue;
    const std::string name = child(obj, "name", "object/name").get_value<std::string>();
    const pt::ptree& bb = child(obj, "bndbox", "object/bndbox");
    Box b;
    b.xmin = static_cast<double>(parse_int(bb, "xmin", "object/bndbox/xmin"));
    b.ymin = static_cast<double>(parse_int(bb, "ymin", "object/bndbox/ymin"));
    b.xmax = static_cast<double>(parse_int(bb, "xmax", "object/bndbox/xmax"));
    b.ymax = static_cast<double>(parse_int(bb, "ymax", "object/bndbox/ymax"));
    if (b.xmin >= b.xmax) throw ValidationError("object '" + name + "': xmin >= xmax in " + box_string(b));
    if (b.ymin >= b.ymax) throw ValidationError("object '" + name + "': ymin >= ymax in " + box_string(b));
    const std::size_t category = categories.index_of(aliases.canonical(name));
    img.instances.push_back(Instance{category, b});
  }
  validate_image(img);
  return img;
}

std::string write_voc_annotation(const AnnotatedImage& image, const CategorySet& categories) {
  auto integral = [](double v, const char* what) {
    if (v != std::floor(v)) throw ValidationError(std::string(what) + " is not an integer");
    return static_cast<long>(v);
  };
  pt::ptree tree;
  pt::ptree& root = tree.add_child("annotation", pt::ptree());
  root.put("filename", image.id);
  root.put("size.width", integral(image.width, "width"));
  root.put("size.height", integral(image.height, "height"));
  root.put("size.depth", 3);
  for (const auto& inst : image.instances) {
    pt::ptree obj;
    obj.put("name", categories.name(inst.category));
    obj.put("bndbox.xmin", integral(inst.box.xmin, "xmin"));
    obj.put("bndbox.ymin", integral(inst.box.ymin, "ymin"));
    obj.put("bndbox.xmax", integral(inst.box.xmax, "xmax"));
    obj.put("bndbox.ymax", integral(inst.box.ymax, "ymax"));
    root.add_child("object", obj);
  }
  std::ostringstream out;
  pt::write_xml(out, tree, pt::xml_writer_make_settings<std::string>(' ', 2));
  return out.str();
}

}  // namespace fskt
