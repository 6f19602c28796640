#pragma once

// Few-shot episodes: instance-wise K-shot sampling, support masks, the
// synthetic feature-level task and VOC annotation files.

#include <cstdint>
#include <string>
#include <vector>

#include "fskt/detection_head.hpp"
#include "fskt/knowledge_graph.hpp"
#include "fskt/rng.hpp"
#include "fskt/types.hpp"

namespace fskt {

struct Instance {
  std::size_t category = 0;  // index into the full category set
  Box box;
};

struct AnnotatedImage {
  enum class Source { kSynthetic, kVocXml };

  std::string id;
  double width = 0.0;
  double height = 0.0;
  std::vector<Instance> instances;
  Source source = Source::kSynthetic;
};

// Throws ValidationError for a box that is not well-ordered or leaves the
// image.
void validate_image(const AnnotatedImage& image);

// grid x grid mask, row-major from the top-left cell. A cell is set when its
// rectangle overlaps the box with positive area; the cell holding the box
// center is always set.
std::vector<std::uint8_t> mask_for(const Box& box, double width, double height, std::size_t grid);

struct SelectedImage {
  std::size_t image = 0;       // index into the pool
  std::vector<bool> selected;  // per instance; false = masked out
};

struct KShotSelection {
  std::vector<SelectedImage> images;  // in draw order
  std::size_t count(std::size_t category, const std::vector<AnnotatedImage>& pool) const;
};

// Draws whole images in random order until every listed category has
// exactly K selected instances; instances beyond a category's quota (or of
// unlisted categories) are masked out. Throws ValidationError with the
// per-category counts when the pool is too small.
KShotSelection sample_kshot(const std::vector<AnnotatedImage>& pool,
                            const std::vector<std::size_t>& categories, std::size_t k, Rng& rng,
                            const CategorySet* names = nullptr);

struct SyntheticTaskSpec {
  std::uint64_t seed = 0;
  std::size_t dim = 32;
  double sigma_n = 0.3;            // RoI feature noise
  double support_sigma = 0.6;      // noise of one pooled support exemplar
  double prototype_norm = 2.0;
  double prototype_shift = -0.5;   // base g = ReLU(N(shift, 1)), rescaled
  double background_sigma = 0.5;
  std::size_t rois_per_image = 20;
  std::size_t proposals_per_instance = 3;
  double proposal_jitter = 0.1;
  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  double image_size = 100.0;
  double min_box = 20.0;
  double max_box = 60.0;
  std::size_t grid = 4;
  std::size_t query_images = 8;
  std::size_t finetune_pool = 300;
};

struct SyntheticTask {
  SyntheticTaskSpec spec;
  CategorySet categories;
  std::vector<std::vector<double>> prototypes;  // generative g, one per category
};

// Normalized mixture sum_b w_b g_b rescaled to `norm`; uniform weights when
// all weights are zero.
std::vector<double> mix_prototypes(const std::vector<double>& weights,
                                   const std::vector<std::vector<double>>& base, double norm);

// Base g drawn independently; each novel g mixes the base g with weights
// given by row `similarity` (C x C, nonnegative) of its category.
SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec, const CategorySet& categories,
                                  const std::vector<double>& similarity);

// An image whose instances draw categories uniformly from `allowed`.
AnnotatedImage generate_image(const SyntheticTask& task, const std::vector<std::size_t>& allowed,
                              Rng& rng, std::string id);

// Proposals and features for an image. labels[i] is the training label of
// instance i (category index in the phase label space, kBackground or
// kIgnore); the remaining RoIs up to rois_per_image are background.
RoIBatch image_rois(const SyntheticTask& task, const AnnotatedImage& image,
                    const std::vector<int>& labels, Rng& rng);

// Support feature map for one instance: masked cells carry g plus noise
// such that their mean has standard deviation support_sigma.
SupportEntry support_entry(const SyntheticTask& task, const AnnotatedImage& image,
                           std::size_t instance, std::size_t label, Rng& rng);

struct QueryImage {
  AnnotatedImage image;
  RoIBatch rois;
};

struct Episode {
  enum class Phase { kBase, kFineTune };

  Phase phase = Phase::kBase;
  std::size_t shots = 0;
  // Label space of the phase: full-set indices, base categories first.
  std::vector<std::size_t> label_categories;
  std::vector<SupportEntry> support;
  std::vector<QueryImage> queries;
};

// Base phase: K fresh single-instance exemplars per base category and
// query_images fresh queries, novel instances labeled background.
Episode make_base_episode(const SyntheticTask& task, std::size_t k, Rng& rng);

// Fine-tuning: a generated pool, an instance-wise K-shot selection over all
// categories, support from the selected instances and the selected images
// as queries, unselected instances ignored.
Episode make_finetune_episode(const SyntheticTask& task, std::size_t k, Rng& rng);

Episode synth_generate(const SyntheticTask& task, Episode::Phase phase, std::size_t k,
                       std::uint64_t seed);

// Self-describing JSON with the task spec, the seed and every payload.
std::string dump_episode(const Episode& episode, const SyntheticTaskSpec& spec, std::uint64_t seed);
struct LoadedEpisode {
  Episode episode;
  SyntheticTaskSpec spec;
  std::uint64_t seed = 0;
};
LoadedEpisode load_episode(const std::string& json_text);

// VOC annotation subset: size/{width,height}, object/name,
// object/bndbox/{xmin,ymin,xmax,ymax}. Names go through the alias table.
// Missing elements raise ParseError naming the path; xmin >= xmax (or
// ymin >= ymax) raises ValidationError.
AnnotatedImage parse_voc_annotation(const std::string& xml, const AliasTable& aliases,
                                    const CategorySet& categories);
std::string write_voc_annotation(const AnnotatedImage& image, const CategorySet& categories);

}  // namespace fskt
