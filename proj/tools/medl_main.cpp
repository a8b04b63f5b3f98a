#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "medl/errors.hpp"
#include "medl/experiment.hpp"

namespace {

struct CliOverrides {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t draws = 0;
  std::size_t folds = 0;
  std::vector<std::string> backends;
  bool parallel = false;
  bool allow_custom = false;
};

void add_shared_options(CLI::App* sub, CliOverrides& ov) {
  sub->add_option("--config", ov.config_path, "experiment config (JSON)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", ov.seed, "master seed for every random stream");
  sub->add_option("--out", ov.out_dir, "output directory");
}

bool given(const CLI::App* sub, const std::string& name) {
  const CLI::Option* opt = sub->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

medl::ExperimentConfig build_config(const CLI::App* sub, const CliOverrides& ov) {
  medl::ExperimentConfig cfg;
  if (!ov.config_path.empty()) {
    cfg = medl::load_config_file(ov.config_path);
  }
  if (given(sub, "--seed")) {
    cfg.seed = ov.seed;
    cfg.seed_set = true;
  }
  if (given(sub, "--draws")) cfg.draws = ov.draws;
  if (given(sub, "--folds")) cfg.folds = ov.folds;
  if (!ov.backends.empty()) cfg.backends = ov.backends;
  if (ov.parallel) cfg.parallel = true;
  if (ov.allow_custom) cfg.allow_custom = true;
  cfg.out_dir = ov.out_dir;
  return cfg;
}

int cmd_generate(const CLI::App* sub, const CliOverrides& ov) {
  medl::ExperimentConfig cfg = build_config(sub, ov);
  if (!cfg.seed_set) {
    throw medl::ConfigError("a seed is required (--seed or the config 'seed' field)");
  }
  const medl::ClusteredDataset data = medl::resolve_dataset(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  const std::string csv = cfg.out_dir + "/dataset.csv";
  const std::string sidecar = cfg.out_dir + "/dataset.sidecar.json";
  medl::save_csv(data, csv, sidecar);
  std::cout << "wrote " << csv << " (" << data.n_rows() << " rows, "
            << data.n_features() << " features, " << data.n_clusters()
            << " clusters of which " << data.n_seen_clusters << " seen)\n";
  return 0;
}

int cmd_run(const CLI::App* sub, const CliOverrides& ov) {
  const medl::ExperimentConfig cfg = build_config(sub, ov);
  const medl::ExperimentReport report = medl::run_experiment(cfg);
  if (cfg.out_dir.empty()) {
    std::cout << medl::report_json(report);
  } else {
    medl::emit_reports(report, cfg.out_dir);
    std::cout << "wrote reports for " << report.models.size() << " model(s) to "
              << cfg.out_dir << "\n";
  }
  for (const auto& fail : report.failures) {
    std::cerr << "model '" << fail.model << "' failed on fold " << fail.fold << ": "
              << fail.error << "\n";
  }
  return 0;
}

int cmd_report(const CliOverrides& ov) {
  const medl::ExperimentReport report = medl::reemit_from_saved(ov.out_dir);
  medl::emit_reports(report, ov.out_dir);
  std::cout << "re-emitted reports for " << report.models.size() << " model(s) in "
            << ov.out_dir << "\n";
  for (const auto& fail : report.failures) {
    std::cerr << "model '" << fail.model << "' failed on fold " << fail.fold << ": "
              << fail.error << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medl-uq: mixed-effects deep learning with epistemic uncertainty"};
  app.require_subcommand(1);

  CliOverrides ov;

  CLI::App* gen =
      app.add_subcommand("generate", "write a synthetic clustered dataset (CSV + sidecar)");
  add_shared_options(gen, ov);
  gen->get_option("--out")->required();

  CLI::App* run = app.add_subcommand(
      "run", "cross-validated training, uncertainty draws and pooled reports");
  add_shared_options(run, ov);
  run->add_option("--backend", ov.backends,
                  "UQ backend token, repeatable (the baseline always runs)");
  run->add_option("--draws", ov.draws, "posterior draws per backend");
  run->add_option("--folds", ov.folds, "cross-validation folds");
  run->add_flag("--parallel", ov.parallel, "train folds concurrently");
  run->add_flag("--allow-custom", ov.allow_custom,
                "accept backend numerics outside the benchmark grids");

  CLI::App* rep =
      app.add_subcommand("report", "re-emit reports from a saved run directory");
  rep->add_option("--out", ov.out_dir, "run directory with config, dataset and models")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen, ov);
    if (run->parsed()) return cmd_run(run, ov);
    if (rep->parsed()) return cmd_report(ov);
    return 2;
  } catch (const medl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const medl::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const medl::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
