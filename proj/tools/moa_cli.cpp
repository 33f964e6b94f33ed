// Command-line entry point: train, eval, inspect, gradcheck.
//
// Exit codes: 0 success, 1 verification failure, 2 user/config error,
// 3 numerical abort.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include "moa/cost.hpp"
#include "moa/data.hpp"
#include "moa/errors.hpp"
#include "moa/model.hpp"
#include "moa/run_config.hpp"
#include "moa/train.hpp"
#include "moa/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitNumericAbort = 3;

struct Options {
  std::string config_path;
  std::string preset_name;
  std::string out_dir;
  std::string checkpoint;
  std::string scope = "all";
  uint64_t seed = 42;
  bool seed_set = false;
  int threads = 1;
  bool csv = false;
  bool inject_fault = false;
};

moa::RunConfig resolve_run_config(const Options& opt) {
  moa::RunConfig rc;
  if (!opt.config_path.empty()) rc = moa::RunConfig::parse_file(opt.config_path);
  else if (!opt.preset_name.empty()) {
    rc.preset_name = opt.preset_name;
    rc.model = moa::preset(opt.preset_name);
    if (rc.model.input_size != rc.synth_size) rc.synth_size = rc.model.input_size;
    rc.synth_classes = rc.model.num_classes;
  } else throw moa::ConfigError("provide --config or --preset");
  if (!opt.preset_name.empty() && !opt.config_path.empty())
    throw moa::ConfigError("--config and --preset are mutually exclusive");
  if (opt.seed_set) rc.recipe.seed = opt.seed;
  if (!opt.out_dir.empty()) rc.out_dir = opt.out_dir;
  if (rc.data_dir.empty()) {
    const char* env = std::getenv("MOA_DATA_DIR");
    if (env) rc.data_dir = env;
  }
  return rc;
}

moa::LabeledImageSet load_train_set(const moa::RunConfig& rc) {
  if (rc.data_kind == "synthetic")
    return moa::synth_dataset(rc.synth_classes, rc.synth_per_class, rc.synth_size, rc.synth_size,
                              rc.recipe.seed);
  auto variant = rc.data_kind == "cifar10" ? moa::CifarVariant::Cifar10
                                           : moa::CifarVariant::Cifar100;
  if (rc.data_dir.empty())
    throw moa::ConfigError("cifar: set data.dir or the MOA_DATA_DIR environment variable");
  return moa::load_cifar(rc.data_dir, variant, moa::Split::Train);
}

moa::LabeledImageSet load_eval_set(const moa::RunConfig& rc) {
  // synthetic runs evaluate on the training set itself (overfit probes)
  if (rc.data_kind == "synthetic") return load_train_set(rc);
  auto variant = rc.data_kind == "cifar10" ? moa::CifarVariant::Cifar10
                                           : moa::CifarVariant::Cifar100;
  return moa::load_cifar(rc.data_dir, variant, moa::Split::Test);
}

template <class S>
int run_train(const moa::RunConfig& rc) {
  rc.model.validate();
  moa::LabeledImageSet train_set = load_train_set(rc);
  moa::LabeledImageSet eval_set = load_eval_set(rc);
  if (train_set.height != rc.model.input_size || train_set.num_classes != rc.model.num_classes)
    throw moa::ConfigError("dataset geometry " + std::to_string(train_set.height) + "x" +
                           std::to_string(train_set.width) + "/" +
                           std::to_string(train_set.num_classes) +
                           " classes does not match the model config");
  std::filesystem::create_directories(rc.out_dir);
  moa::Model<S> model(rc.model, rc.recipe.seed);
  std::ofstream log(rc.out_dir + "/metrics.csv");
  if (!log) throw moa::IoError("cannot write " + rc.out_dir + "/metrics.csv");
  moa::train(model, train_set, eval_set, rc.recipe, &log);
  moa::save_checkpoint(model, rc.out_dir + "/checkpoint.bin");
  std::cout << "wrote " << rc.out_dir << "/checkpoint.bin and metrics.csv\n";
  return kExitOk;
}

int cmd_train(const Options& opt) {
  moa::RunConfig rc = resolve_run_config(opt);
  if (rc.precision == "f64") return run_train<double>(rc);
  return run_train<float>(rc);
}

// Shards eval batches over worker threads; parameters are read-only.
template <class S>
double eval_threaded(const moa::Model<S>& model, const moa::LabeledImageSet& set,
                     int64_t batch_size, int threads) {
  auto batches = moa::batch_indices(set.size(), batch_size, false, 0);
  std::vector<int64_t> correct(batches.size(), 0);
  auto worker = [&](size_t begin, size_t stride) {
    for (size_t bi = begin; bi < batches.size(); bi += stride) {
      auto [x, labels] = moa::make_batch<S>(set, batches[bi]);
      moa::Tensor<S> logits = model.forward(x, false, nullptr);
      int64_t k = logits.size(1);
      auto vals = logits.values();
      for (size_t i = 0; i < labels.size(); ++i) {
        const S* row = vals.data() + static_cast<int64_t>(i) * k;
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        if (best == labels[i]) ++correct[bi];
      }
    }
  };
  if (threads <= 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, static_cast<size_t>(t), threads);
    for (auto& th : pool) th.join();
  }
  int64_t total = 0;
  for (int64_t c : correct) total += c;
  return double(total) / double(set.size());
}

int cmd_eval(const Options& opt) {
  if (opt.checkpoint.empty()) throw moa::ConfigError("eval: --checkpoint is required");
  moa::Model<float> model = moa::load_checkpoint<float>(opt.checkpoint);
  moa::RunConfig rc;
  if (!opt.config_path.empty()) {
    rc = moa::RunConfig::parse_file(opt.config_path);
  } else {
    rc.model = model.cfg;
    rc.synth_classes = model.cfg.num_classes;
    rc.synth_size = model.cfg.input_size;
  }
  if (opt.seed_set) rc.recipe.seed = opt.seed;
  if (rc.data_dir.empty()) {
    const char* env = std::getenv("MOA_DATA_DIR");
    if (env) rc.data_dir = env;
  }
  moa::LabeledImageSet set = load_eval_set(rc);
  if (set.height != model.cfg.input_size || set.width != model.cfg.input_size ||
      set.num_classes != model.cfg.num_classes)
    throw moa::ConfigError("eval: dataset " + std::to_string(set.height) + "x" +
                           std::to_string(set.width) + "/" + std::to_string(set.num_classes) +
                           " classes does not match checkpoint config " +
                           std::to_string(model.cfg.input_size) + "/" +
                           std::to_string(model.cfg.num_classes));
  double acc = eval_threaded(model, set, rc.recipe.batch_size, opt.threads);
  std::cout << "top1 " << std::fixed << std::setprecision(4) << acc << "\n";
  return kExitOk;
}

int cmd_inspect(const Options& opt) {
  moa::ModelConfig cfg;
  if (!opt.preset_name.empty() && !opt.config_path.empty())
    throw moa::ConfigError("--config and --preset are mutually exclusive");
  if (!opt.preset_name.empty()) cfg = moa::preset(opt.preset_name);
  else if (!opt.config_path.empty()) cfg = moa::RunConfig::parse_file(opt.config_path).model;
  else throw moa::ConfigError("inspect: provide --preset or --config");
  moa::CostReport report = moa::analyze(cfg);
  std::cout << report.format(opt.csv);
  return kExitOk;
}

int cmd_gradcheck(const Options& opt) {
  moa::inject_backward_fault() = opt.inject_fault;
  auto cases = moa::run_gradcheck(opt.scope, opt.seed);
  bool ok = true;
  for (const auto& c : cases) {
    double worst = c.report.worst();
    std::string worst_param;
    for (const auto& e : c.report.entries)
      if (e.max_rel_error == worst) worst_param = e.name;
    bool pass = c.report.passed();
    ok = ok && pass;
    std::cout << std::left << std::setw(14) << c.scope << (pass ? "pass" : "FAIL")
              << "  max rel err " << std::scientific << std::setprecision(3) << worst << " ("
              << worst_param << ")\n";
  }
  return ok ? kExitOk : kExitVerifyFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MOA vision transformer: local window attention with a global "
               "multi-resolution overlapped attention module between stages"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", opt.config_path, "run configuration file (key = value lines)");
    sub->add_option("--preset", opt.preset_name, "model preset name");
    sub->add_option("--seed", opt.seed, "RNG seed (echoed into the metrics log)")
        ->each([&](const std::string&) { opt.seed_set = true; });
    sub->add_option("--threads", opt.threads, "worker threads for evaluation")
        ->check(CLI::PositiveNumber);
    if (with_out) sub->add_option("--out", opt.out_dir, "output directory");
  };

  CLI::App* train = app.add_subcommand("train", "train a model, write checkpoint + metrics log");
  add_common(train, true);

  CLI::App* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a dataset");
  add_common(eval, false);
  eval->add_option("--checkpoint", opt.checkpoint, "checkpoint file")->required();

  CLI::App* inspect = app.add_subcommand("inspect", "per-layer parameter and FLOP report");
  add_common(inspect, false);
  inspect->add_flag("--csv", opt.csv, "machine-readable comma-separated output");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient verification suite");
  gradcheck->add_option("--scope", opt.scope, "all or one layer scope");
  gradcheck->add_option("--seed", opt.seed, "RNG seed");
  gradcheck->add_flag("--inject-fault", opt.inject_fault,
                      "corrupt one backward rule (harness self-test; must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfigError;
  }

  try {
    if (train->parsed()) return cmd_train(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (inspect->parsed()) return cmd_inspect(opt);
    if (gradcheck->parsed()) return cmd_gradcheck(opt);
  } catch (const moa::NumericsError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumericAbort;
  } catch (const moa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const moa::GeometryError& e) {
    std::cerr << "geometry error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const moa::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const moa::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfigError;
  }
  return kExitOk;
}
