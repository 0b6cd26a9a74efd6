// rethseg: dataset generation, training, evaluation, inference and ablation.
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric
// failure. RETHSEG_PRECISION=f32|f64 selects the scalar type for train and
// ablate; eval and infer follow the precision stored in the checkpoint.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "rethseg/train.hpp"

namespace {

using namespace rethseg;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

TrainConfig load_train_config(const std::string& path) {
  try {
    return TrainConfig::from_keyvalues(KeyValues::load(path));
  } catch (const ShapeError& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const UsageError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

template <class T>
int run_train(const TrainConfig& cfg, const std::string& out, const std::string& resume) {
  std::printf("training %zu epochs in %s\n", cfg.epochs, std::string(precision_name(precision_of<T>())).c_str());
  train_to_dir<T>(cfg, out, resume.empty() ? std::nullopt : std::optional<std::string>(resume),
                  [](const EpochLog& log) {
                    std::printf("epoch %zu lr %.3g loss %.6f val_miou %.4f\n", log.epoch, log.lr, log.train_loss,
                                log.val_miou);
                    std::fflush(stdout);
                  });
  std::printf("checkpoints written to %s\n", out.c_str());
  return kOk;
}

template <class T>
int run_eval(const Checkpoint& ckpt, const std::string& data, const std::string& split, const std::string& csv) {
  const TrainState<T> state = from_checkpoint<T>(ckpt);
  const CoOccurrenceSpec spec = load_dataset_spec(data);
  if (spec.num_classes != state.model.config.num_classes) {
    throw DataError("checkpoint has " + std::to_string(state.model.config.num_classes) + " classes, dataset has " +
                    std::to_string(spec.num_classes));
  }
  const MetricReport report = make_report(evaluate(state.model, load_split(data, split)));
  std::cout << report.to_keyvalues().dump();
  if (!csv.empty()) {
    std::ofstream out(csv);
    if (!out) throw DataError("cannot write '" + csv + "'");
    out << report.to_csv();
  }
  return kOk;
}

template <class T>
int run_infer(const Checkpoint& ckpt, const std::string& in, const std::string& out) {
  const TrainState<T> state = from_checkpoint<T>(ckpt);
  infer(state.model, in, out);
  std::printf("wrote %s_mask.pgm and %s_overlay.ppm\n", out.c_str(), out.c_str());
  return kOk;
}

template <class T>
int run_ablate(const TrainConfig& base, const std::vector<std::string>& variants, std::size_t seeds,
               const std::string& out) {
  std::vector<std::pair<std::string, TrainConfig>> configs;
  for (const auto& v : variants) configs.emplace_back(v, with_variant(base, parse_variant(v)));
  const CoOccurrenceSpec spec = load_dataset_spec(base.dataset_root);
  const auto train = load_split(base.dataset_root, "train");
  const auto test = load_split(base.dataset_root, "test");
  const auto results = ablate<T>(configs, seeds, train, test, [](const std::string& name, std::size_t seed,
                                                                 const EpochLog& log) {
    std::printf("%s seed %zu epoch %zu loss %.6f\n", name.c_str(), seed, log.epoch, log.train_loss);
    std::fflush(stdout);
  });
  const std::vector<int> paired = spec.paired_classes();
  std::string table = ablation_table(results, paired);
  if (!paired.empty()) {
    ConfusionMatrix oracle(spec.num_classes);
    for (const auto& s : test) oracle.accumulate(window_oracle_predict(spec, s.image), s.mask);
    char line[128];
    std::snprintf(line, sizeof line, "9x9 window oracle paired_iou %.4f\n", miou_over(oracle, paired));
    table += line;
  }
  std::cout << table;
  if (!out.empty()) {
    std::ofstream file(out);
    if (!file) throw DataError("cannot write '" + out + "'");
    file << table;
  }
  return kOk;
}

template <template <class> class Fn, class... Args>
int dispatch(Precision p, Args&&... args) {
  return p == Precision::f32 ? Fn<float>{}(std::forward<Args>(args)...) : Fn<double>{}(std::forward<Args>(args)...);
}

template <class T>
struct TrainCmd {
  template <class... A>
  int operator()(A&&... a) const { return run_train<T>(std::forward<A>(a)...); }
};
template <class T>
struct EvalCmd {
  template <class... A>
  int operator()(A&&... a) const { return run_eval<T>(std::forward<A>(a)...); }
};
template <class T>
struct InferCmd {
  template <class... A>
  int operator()(A&&... a) const { return run_infer<T>(std::forward<A>(a)...); }
};
template <class T>
struct AblateCmd {
  template <class... A>
  int operator()(A&&... a) const { return run_ablate<T>(std::forward<A>(a)...); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale semantic segmentation with REthinker blocks"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "generate a co-occurrence dataset");
  std::string spec_path, gen_out;
  SplitCounts counts;
  gen->add_option("--spec", spec_path, "key = value dataset spec")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count-train", counts.train)->capture_default_str();
  gen->add_option("--count-val", counts.val)->capture_default_str();
  gen->add_option("--count-test", counts.test)->capture_default_str();

  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config, train_out, resume;
  train->add_option("--config", train_config)->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, split_name = "test", csv;
  eval->add_option("--ckpt", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--split", split_name)->capture_default_str();
  eval->add_option("--csv", csv, "also write the report as CSV");

  auto* inf = app.add_subcommand("infer", "write a class mask and colour overlay for one image");
  std::string infer_ckpt, infer_in, infer_out;
  inf->add_option("--ckpt", infer_ckpt)->required()->check(CLI::ExistingFile);
  inf->add_option("--in", infer_in, "PPM image")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", infer_out, "output prefix")->required();

  auto* abl = app.add_subcommand("ablate", "train block variants over several seeds and compare test mIoU");
  std::string ablate_config, variants = "baseline_c,rethinker_d,rethinker_e", ablate_out;
  std::size_t seeds = 3;
  abl->add_option("--config", ablate_config)->required()->check(CLI::ExistingFile);
  abl->add_option("--variants", variants)->capture_default_str();
  abl->add_option("--seeds", seeds)->capture_default_str()->check(CLI::PositiveNumber);
  abl->add_option("--out", ablate_out, "also write the table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      CoOccurrenceSpec spec;
      try {
        spec = CoOccurrenceSpec::from_keyvalues(KeyValues::load(spec_path));
      } catch (const DataError& e) {
        throw ConfigError(spec_path + ": " + e.what());
      }
      write_dataset(gen_out, spec, counts);
      std::printf("wrote %zu/%zu/%zu samples to %s\n", counts.train, counts.val, counts.test, gen_out.c_str());
      return kOk;
    }
    if (*train) {
      return dispatch<TrainCmd>(precision_from_env(), load_train_config(train_config), train_out, resume);
    }
    if (*eval) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      return dispatch<EvalCmd>(checkpoint_precision(ckpt), ckpt, eval_data, split_name, csv);
    }
    if (*inf) {
      const Checkpoint ckpt = load_checkpoint(infer_ckpt);
      return dispatch<InferCmd>(checkpoint_precision(ckpt), ckpt, infer_in, infer_out);
    }
    if (*abl) {
      const TrainConfig base = load_train_config(ablate_config);
      if (base.dataset_root.empty()) throw ConfigError("dataset_root is not set in " + ablate_config);
      return dispatch<AblateCmd>(precision_from_env(), base, split(variants, ','), seeds, ablate_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
