#pragma once

// Two-phase training, evaluation and ablation runs on the synthetic task.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fskt/detection_head.hpp"
#include "fskt/episodes.hpp"
#include "fskt/eval_map.hpp"
#include "fskt/knowledge_graph.hpp"
#include "fskt/proto_transfer.hpp"

namespace fskt {

enum class GraphKind { kSemantic, kRandom };

struct RunConfig {
  std::uint64_t seed = 0;
  int split = 1;
  std::size_t shots = 3;
  std::size_t support_dim = 32;  // S
  std::size_t feature_dim = 32;  // F
  double sigma_n = 0.3;
  double support_sigma = 0.6;
  double threshold = 0.5;
  double lr_base = 0.01;
  double lr_finetune = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.001;
  std::size_t batch_size = 8;
  std::size_t base_steps = 500;
  std::size_t finetune_steps = 200;
  std::size_t base_support_shots = 1;
  std::size_t eval_images = 300;
  std::size_t ablation_seeds = 20;
  bool skip = true;
  GraphKind graph = GraphKind::kSemantic;
  bool full_batch = false;
  bool identity_init = true;
  std::filesystem::path embeddings = "data/embeddings/voc20_wordllama_l2_256.txt";
  std::filesystem::path aliases = "data/category_aliases.txt";
  std::filesystem::path out = "runs/default";
  std::filesystem::path checkpoint;  // empty: <out>/checkpoint.txt
  std::filesystem::path voc_dir;     // optional annotation directory
};

// Sets one key from its text form. Throws ConfigError for unknown keys or
// invalid values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
// Applies `key = value` lines (`#` comments). Throws ParseError with the
// line number for malformed lines and ConfigError for bad values.
void apply_config(RunConfig& config, std::istream& in);
RunConfig load_config(const std::filesystem::path& path);
// Throws ConfigError; returns warnings for permitted but unusual values.
std::vector<std::string> validate_config(const RunConfig& config);
// Every key as `key = value`, in a fixed order.
std::string echo_config(const RunConfig& config);

SyntheticTaskSpec task_spec(const RunConfig& config);

struct StepLoss {
  std::size_t step = 0;  // 1-based, continuing across phases
  double cls = 0.0;
  double box = 0.0;
  double meta = 0.0;
  double total = 0.0;
};

struct Model {
  ProtoTransferNet net;
  PredictorHead head;
  std::vector<std::size_t> label_categories;  // row i of p0 is this category
  Tensor support_p0;                          // pooled K-shot support
};

// Everything a run needs that follows from the configuration alone.
struct World {
  CategorySet categories;
  MetaGraph semantic;
  MetaGraph graph;  // the graph the model propagates over
  SyntheticTask task;
};
World make_world(const RunConfig& config);

struct TrainResult {
  std::vector<StepLoss> log;
  Model model;
  std::optional<EvalReport> base_phase_report;  // base categories after phase 1
  std::optional<EvalReport> final_report;
};

struct TrainOptions {
  bool evaluate = true;
};

// Phase 1 on base categories, then K-shot fine-tuning over all categories.
// Throws NumericalError naming the step on a non-finite loss.
TrainResult train(const RunConfig& config, const World& world, const TrainOptions& options = {});

// Detection on eval_images held-out images (an evaluation stream disjoint
// from training) over the model's label categories.
EvalReport evaluate_model(const RunConfig& config, const World& world, const Model& model);
// The same with an explicit p0 and category rows.
EvalReport evaluate_prototypes(const RunConfig& config, const World& world, const Model& model,
                               const Tensor& p0, const std::vector<std::size_t>& label_categories);

void save_checkpoint(std::ostream& out, const Model& model);
// Throws ParseError for malformed files and DimensionError for tensors
// whose shape disagrees with the configuration.
Model load_checkpoint(std::istream& in, const RunConfig& config, const World& world);

struct AblationRow {
  std::uint64_t seed = 0;
  bool skip = true;
  GraphKind graph = GraphKind::kSemantic;
  double novel_map = 0.0;
  double base_map = 0.0;
  double base_map_before_finetune = 0.0;
};

struct AblationSummary {
  std::vector<AblationRow> rows;
  std::size_t seeds = 0;
  std::size_t semantic_wins = 0;  // semantic > random novel mAP, skip on
  std::size_t skip_wins = 0;      // skip on >= skip off novel mAP, semantic graph
};

// Matched-seed runs of {skip on, off} x {semantic, random} for seeds
// config.seed, config.seed + 1, ...
AblationSummary ablate(const RunConfig& config, std::size_t seeds);

// Writes through a temporary file in the same directory, then renames.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

// Command implementations behind the CLI; each returns the text it prints.
std::string cmd_build_graph(const RunConfig& config);
std::string cmd_train(const RunConfig& config);
std::string cmd_eval(const RunConfig& config);
std::string cmd_ablate(const RunConfig& config);

std::string graph_name(GraphKind kind);

}  // namespace fskt
