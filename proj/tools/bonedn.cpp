// Command-line front end of the denoising pipeline.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "bonedn/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

}  // namespace

int main(int argc, char** argv) {
  using namespace bonedn;
  CLI::App app{"Goal-driven CT denoising pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  bool verbose = false;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");

  auto* phantom = app.add_subcommand("phantom", "Generate ground-truth phantoms and simulated scans");
  phantom->add_option("--out", out_dir, "Output directory")->required();

  std::string manifest;
  auto* patches = app.add_subcommand("patches", "Calibrate scans and cut the paired patch dataset");
  patches->add_option("--manifest", manifest, "manifest.json from the phantom stage")->required();
  patches->add_option("--out", out_dir, "Output directory")->required();

  std::string dataset, preset_name;
  int fold = -1, jobs = 1;
  auto* train = app.add_subcommand("train", "Cross-validated training");
  train->add_option("--dataset", dataset, "dataset.json from the patches stage")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--preset", preset_name, "Loss preset")->check(CLI::IsMember({"nn_sp", "nn_bmd"}));
  train->add_option("--fold", fold, "Train a single fold");
  train->add_option("--jobs", jobs, "Folds trained in parallel")->check(CLI::PositiveNumber);

  std::string checkpoint, in_path, out_path;
  auto* denoise = app.add_subcommand("denoise", "Filter a whole volume with a trained network");
  denoise->add_option("--checkpoint", checkpoint, "Network checkpoint")->required();
  denoise->add_option("--in", in_path, "Input TVOL volume")->required();
  denoise->add_option("--out", out_path, "Output TVOL volume")->required();

  std::string nn_sp_dir, nn_bmd_dir;
  auto* eval = app.add_subcommand("eval", "Test-cohort statistics of all filters");
  eval->add_option("--dataset", dataset, "dataset.json")->required();
  eval->add_option("--nn-sp", nn_sp_dir, "Training output of the nn_sp preset");
  eval->add_option("--nn-bmd", nn_bmd_dir, "Training output of the nn_bmd preset");
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->add_option("--fold", fold, "Evaluate a single fold");

  std::string eval_dir;
  auto* report = app.add_subcommand("report", "Tables, learning curves and histograms as CSV");
  report->add_option("--eval", eval_dir, "Output directory of the eval stage")->required();
  report->add_option("--nn-sp", nn_sp_dir, "Training output of the nn_sp preset");
  report->add_option("--nn-bmd", nn_bmd_dir, "Training output of the nn_bmd preset");
  report->add_option("--out", out_dir, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  const Log log = [&](const std::string& s) {
    if (verbose) std::cerr << s << std::endl;
  };
  const auto networks = [&] {
    std::map<std::string, fs::path> m;
    if (!nn_sp_dir.empty()) m["nn_sp"] = nn_sp_dir;
    if (!nn_bmd_dir.empty()) m["nn_bmd"] = nn_bmd_dir;
    return m;
  };

  try {
    const RunConfig cfg = load_run_config(config_path);
    std::optional<int> f;
    if (fold >= 0) f = fold;
    if (*phantom) {
      cmd_phantom(cfg, out_dir, log);
    } else if (*patches) {
      cmd_patches(cfg, manifest, out_dir, log);
    } else if (*train) {
      if (!cmd_train(cfg, dataset, preset_name, out_dir, f, jobs, log)) return kNumeric;
    } else if (*denoise) {
      cmd_denoise(checkpoint, in_path, out_path);
    } else if (*eval) {
      cmd_eval(cfg, dataset, networks(), out_dir, log, f);
    } else if (*report) {
      cmd_report(cfg, eval_dir, networks(), out_dir);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
