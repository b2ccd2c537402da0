// Command-line driver: fit, eval, compare, synth, report.
//
// Exit codes: 0 ok, 1 invalid configuration or arguments, 2 bad or missing
// data, 3 internal error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mmb/error.h"
#include "mmb/ingest.h"
#include "mmb/pipeline.h"
#include "mmb/synth.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

int exit_code(mmb::ErrorKind kind) {
  using mmb::ErrorKind;
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kArgument:
    case ErrorKind::kDomain:
      return kExitValidation;
    case ErrorKind::kFormat:
    case ErrorKind::kIntegrity:
    case ErrorKind::kValidation:
    case ErrorKind::kDimension:
    case ErrorKind::kArity:
    case ErrorKind::kCapacity:
    case ErrorKind::kPath:
      return kExitData;
    case ErrorKind::kShape:
      return kExitInternal;
  }
  return kExitInternal;
}

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t parallel = 1;
  std::string format = "table";
  std::optional<std::string> baseline;
  std::optional<double> alpha;
};

mmb::RunConfig load_config(const Flags& f) {
  auto config = mmb::load_run_config(f.config);
  if (!f.out.empty()) config.output = f.out;
  if (f.seed) config.master_seed = *f.seed;
  if (f.baseline) config.stats.baseline = *f.baseline;
  if (f.alpha) config.stats.alpha = *f.alpha;
  config.validate();
  return config;
}

// A synth config file is either a bare synth config or a run config whose
// data section holds one.
mmb::SynthConfig load_synth_config(const Flags& f) {
  mmb::SynthConfig config;
  if (!f.config.empty()) {
    const std::filesystem::path path(f.config);
    mmb::require(std::filesystem::exists(path), mmb::ErrorKind::kPath, "config '" + f.config + "' not found");
    const auto text = mmb::read_file(path);
    if (text.find("\"data\"") != std::string::npos) {
      const auto run = mmb::run_config_from_json(text, path.parent_path());
      mmb::require(run.data.synth.has_value(), mmb::ErrorKind::kConfig, "config has no data.synth section");
      config = *run.data.synth;
    } else {
      config = mmb::synth_config_from_json(text);
    }
  }
  if (f.seed) config.seed = *f.seed;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-Bayesian prompt ensembles: fit, evaluate and compare judge ensembles"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", f.config, "JSON config file");
    if (config_required) c->required();
    sub->add_option("--out", f.out, "output directory (overrides the config)");
    sub->add_option("--seed", f.seed, "master seed (overrides the config)");
    sub->add_option("--parallel", f.parallel, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--format", f.format, "report format")->check(CLI::IsMember({"table", "csv"}));
  };
  auto* fit = app.add_subcommand("fit", "fit ensemble weights for every method and grid cell");
  auto* eval = app.add_subcommand("eval", "evaluate fitted weights on the test split");
  auto* compare = app.add_subcommand("compare", "paired permutation tests with per-metric BY correction");
  auto* synth = app.add_subcommand("synth", "write a synthetic judge benchmark");
  auto* report = app.add_subcommand("report", "render the summary and comparison tables");
  for (auto* sub : {fit, eval, compare, report}) add_common(sub, true);
  add_common(synth, false);
  synth->get_option("--out")->required();
  compare->add_option("--baseline", f.baseline, "compare against this method instead of the per-metric best");
  compare->add_option("--alpha", f.alpha, "FDR level")->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    mmb::RunOptions options;
    options.threads = f.parallel;
    options.format = mmb::parse_report_format(f.format);
    if (*fit) {
      mmb::cmd_fit(load_config(f), options);
    } else if (*eval) {
      const auto r = mmb::cmd_eval(load_config(f), options);
      for (const auto& c : r.cells) {
        if (!c.ok) std::cerr << "warning: cell " << c.cell << " failed: " << c.message << "\n";
      }
    } else if (*compare) {
      mmb::cmd_compare(load_config(f), options);
    } else if (*synth) {
      mmb::cmd_synth(load_synth_config(f), f.out);
    } else if (*report) {
      std::cout << mmb::cmd_report(load_config(f), options);
    }
  } catch (const mmb::Error& e) {
    std::cerr << "mmb: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "mmb: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitOk;
}
