// Command-line front end: build-graph, train, eval, ablate.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fskt/errors.hpp"
#include "fskt/harness.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Flags {
  std::string config;
  std::optional<std::string> seed, split, shots, graph, skip, threshold, out;
};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value configuration file");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--split", f.split, "novel split")->check(CLI::IsMember({"1", "2", "3"}));
  cmd->add_option("--shots", f.shots, "K, instances per category");
  cmd->add_option("--graph", f.graph, "meta-graph")->check(CLI::IsMember({"semantic", "random"}));
  cmd->add_option("--skip", f.skip, "skip connection")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--threshold", f.threshold, "objectness threshold");
  cmd->add_option("--out", f.out, "output directory");
}

fskt::RunConfig resolve(const Flags& f) {
  fskt::RunConfig c = f.config.empty() ? fskt::RunConfig{} : fskt::load_config(f.config);
  auto set = [&](const char* key, const std::optional<std::string>& v) {
    if (v) fskt::set_config_value(c, key, *v);
  };
  set("seed", f.seed);
  set("split", f.split);
  set("shots", f.shots);
  set("graph", f.graph);
  set("skip", f.skip);
  set("threshold", f.threshold);
  set("out", f.out);
  for (const auto& w : fskt::validate_config(c)) std::cerr << "warning: " << w << '\n';
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detection with prototype transfer over a category graph"};
  app.require_subcommand(1);
  Flags flags;
  auto* build = app.add_subcommand("build-graph", "write adjacency and propagation matrices");
  auto* train = app.add_subcommand("train", "base training, K-shot fine-tuning, evaluation");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out images");
  auto* ablate = app.add_subcommand("ablate", "skip-connection and graph ablations over seeds");
  for (auto* cmd : {build, train, eval, ablate}) add_flags(cmd, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    const fskt::RunConfig config = resolve(flags);
    std::string text;
    if (build->parsed()) text = fskt::cmd_build_graph(config);
    else if (train->parsed()) text = fskt::cmd_train(config);
    else if (eval->parsed()) text = fskt::cmd_eval(config);
    else text = fskt::cmd_ablate(config);
    std::cout << text;
    return kOk;
  } catch (const fskt::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const fskt::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const fskt::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
}
