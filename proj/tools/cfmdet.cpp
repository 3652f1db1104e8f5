#ifdef CFMDET_CLI11_PACKAGE
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cfmdet/pipeline.hpp"

namespace {

struct Command {
  const char* name;
  const char* help;
};

const Command kCommands[] = {
    {"channels", "write feature pyramids of a split as CFT1 tensors plus index.jsonl"},
    {"train", "train a boosted forest (seed round only)"},
    {"bootstrap", "train with hard-negative bootstrapping rounds"},
    {"detect", "sliding-window detection with NMS -> detections CSV"},
    {"propose", "calibrated proposals -> proposals CSV and calibration report"},
    {"rescore", "average proposal scores over ensemble members (and external scores)"},
    {"segfuse", "learn the 100x41 weight mask and fuse segmentation scores"},
    {"eval", "log-average miss rate or average precision of a detections CSV"},
    {"heatmap", "per-cell split counts of a forest"},
    {"report", "SVG plot of one or more curve CSVs"},
    {"run", "execute the config's \"stages\" list in order"},
};

const char* kFooter = R"(
Any other --<key> value sets <command>.<key> (for run: the top-level key).
Values are parsed as JSON when possible, otherwise taken as strings.
CFMDET_THREADS caps worker threads.)";

struct Options {
  std::string config;
  std::string seed;
  std::string output_dir;
  std::vector<std::string> sets;
};

// Turns the leftover "--key value" / "--key=value" arguments into overrides.
bool extra_overrides(const std::string& command, const std::vector<std::string>& extras, std::vector<std::string>& out) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) {
      std::cerr << "cfmdet: unexpected argument '" << a << "'\n";
      return false;
    }
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else if (i + 1 < extras.size()) {
      value = extras[++i];
    } else {
      std::cerr << "cfmdet: option --" << key << " needs a value\n";
      return false;
    }
    out.push_back((command == "run" ? key : command + "." + key) + "=" + value);
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  namespace pl = cfmdet::pipeline;
  CLI::App app{"Boosted-forest pedestrian detection toolkit", "cfmdet"};
  app.require_subcommand(1);
  app.footer(kFooter);
  Options opt;
  for (const auto& c : kCommands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config, "JSON config file");
    sub->add_option("--seed", opt.seed, "random seed (required by train and bootstrap)");
    sub->add_option("--output-dir", opt.output_dir, "directory for outputs and the manifest");
    sub->add_option("--set", opt.sets, "override a config value, key.path=value")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->allow_extras();
  }

  if (argc > 1 && argv[1][0] != '-') {
    const std::string first = argv[1];
    if (!pl::is_command(first)) {
      std::cerr << "cfmdet: unknown command '" << first << "'\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  std::vector<std::string> overrides = opt.sets;
  if (!opt.seed.empty()) overrides.push_back("seed=" + opt.seed);
  if (!opt.output_dir.empty()) overrides.push_back("output_dir=" + nlohmann::json(opt.output_dir).dump());
  if (!extra_overrides(command, sub->remaining(), overrides)) {
    std::cerr << sub->help();
    return 2;
  }

  try {
    const bool has_config = !opt.config.empty();
    nlohmann::json config = has_config ? pl::load_config(opt.config) : nlohmann::json::object();
    for (const auto& o : overrides) pl::apply_override(config, o);
    const auto base = has_config ? std::filesystem::absolute(opt.config).parent_path() : std::filesystem::current_path();
    auto ctx = pl::make_context(std::move(config), base);
    pl::execute(ctx, command, has_config ? std::optional<std::filesystem::path>(opt.config) : std::nullopt);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "cfmdet " << command << ": error: " << e.what() << '\n';
    return 1;
  }
}
