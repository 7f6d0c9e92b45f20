#include <filesystem>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "killchain/error.hpp"
#include "killchain/pipeline.hpp"

namespace fs = std::filesystem;
using namespace killchain;

namespace {

struct Options {
  std::string config;
  std::string phase;
  std::optional<double> tau;
  std::optional<std::size_t> k_pred;
  std::optional<std::uint64_t> seed;
  std::string work_dir;
  std::string input;
  std::string out;
  std::string format = "table";
  bool sweep = false;
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Validation:
    case ErrorKind::Io:
      return 1;
    default:
      return 2;
  }
}

std::string read_narrative(const std::string& input) {
  if (input.empty() || input == "-") {
    return {std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>()};
  }
  return read_file(input);
}

Phase parse_phase_arg(const std::string& text) {
  if (!text.empty() && std::all_of(text.begin(), text.end(), ::isdigit)) {
    if (auto p = phase_from_index(std::stoi(text))) return *p;
  }
  if (auto p = phase_from_name(text)) return *p;
  fail(ErrorKind::Config, "--phase: unknown phase '" + text + "'");
}

void print_run(const fs::path& dir, const std::string& format) {
  if (format == "dot") std::cout << read_file(dir / "graph.dot");
  else if (format == "json") std::cout << read_file(dir / "graph.json");
  else std::cout << read_file(dir / "paths.txt");
}

void print_manifest(const RunManifest& m) {
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
  std::cerr << m.command << ": wrote " << m.outputs.size() << " artifact(s)\n";
}

int run(const std::string& command, const Options& opt) {
  PipelineConfig config = PipelineConfig::load(opt.config);
  if (!opt.work_dir.empty()) config.work_dir = fs::absolute(opt.work_dir);
  if (opt.tau) config.tau = *opt.tau;
  if (opt.k_pred) config.k_pred = *opt.k_pred;
  if (opt.seed) config.set_seed(*opt.seed);
  config.validate();

  Pipeline pipeline(config, &std::cerr);
  if (!opt.phase.empty()) pipeline.restrict_to(parse_phase_arg(opt.phase));
  const fs::path run_dir = opt.out.empty() ? pipeline.default_run_dir() : fs::path(opt.out);

  if (command == "ingest") print_manifest(pipeline.ingest());
  else if (command == "split") print_manifest(pipeline.split());
  else if (command == "augment") print_manifest(pipeline.augment());
  else if (command == "train") print_manifest(pipeline.train(opt.sweep));
  else if (command == "evaluate") print_manifest(pipeline.evaluate());
  else if (command == "predict") print_manifest(pipeline.predict(read_narrative(opt.input), run_dir));
  else if (command == "chain") {
    print_manifest(pipeline.chain(run_dir));
    print_run(run_dir, opt.format);
  } else if (command == "narrative") {
    const fs::path out = opt.out.empty() ? config.work_dir / "narrative" : fs::path(opt.out);
    print_manifest(pipeline.narrative(read_narrative(opt.input), out));
    print_run(out, opt.format);
  } else if (command == "verify") {
    VerifyReport r = pipeline.verify();
    for (const auto& d : r.drift) std::cout << "DRIFT " << d << "\n";
    std::cout << (r.ok() ? "OK" : "FAILED") << " " << r.checked << " artifact(s) checked\n";
    return r.ok() ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phase-aware kill-chain inference"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config, "Pipeline configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--phase", opt.phase, "Restrict split/augment/train/evaluate to one phase (name or 1-7)");
  app.add_option("--tau", opt.tau, "Edge similarity threshold in (0, 1]");
  app.add_option("--k-pred", opt.k_pred, "Techniques kept per phase");
  app.add_option("--seed", opt.seed, "Seed for split, augmentation and training");
  app.add_option("--work-dir", opt.work_dir, "Override the configured work directory");
  app.add_option("--format", opt.format, "Output printed by chain/narrative")
      ->check(CLI::IsMember({"table", "dot", "json"}));

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "Parse the bundle, fit TF-IDF and assign phases"},
      {"split", "Stratified train/validation/test split per phase"},
      {"augment", "Add variants for minority labels"},
      {"train", "Train the native scorers"},
      {"evaluate", "Fit ensemble weights and report test metrics"},
      {"predict", "Predict techniques for a narrative"},
      {"chain", "Build the kill-chain graph from predictions"},
      {"narrative", "Run every stage in memory for one narrative"},
      {"verify", "Re-hash recorded artifacts"},
  };
  std::string chosen;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->callback([&chosen, n = name] { chosen = n; });
    if (name == "train") sub->add_flag("--sweep", opt.sweep, "Train one GBDT per num_leaves in the sweep grid");
    if (name == "predict" || name == "narrative") sub->add_option("--input", opt.input, "Narrative file (default stdin)");
    if (name == "predict" || name == "chain" || name == "narrative") sub->add_option("--out", opt.out, "Output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  if (opt.config.empty()) {
    std::cerr << "error: --config is required\n";
    return 2;
  }

  try {
    return run(chosen, opt);
  } catch (const StaleArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error [parse]: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << "\n";
    return 1;
  }
}
