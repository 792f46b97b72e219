#include "scenemixer/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include "scenemixer/analyzer.hpp"
#include "scenemixer/data.hpp"
#include "scenemixer/metrics.hpp"
#include "scenemixer/model.hpp"
#include "scenemixer/parallel.hpp"
#include "scenemixer/train.hpp"

namespace scenemixer::cli {

namespace fs = std::filesystem;

namespace {

/// Bad flags, unreadable or invalid configuration: exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ModelConfig config_from_file(const std::string& path) {
  if (path.empty()) return eurosat_config();
  try {
    return load_config_file(path);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

void print_config(std::ostream& out, const ModelConfig& config) {
  out << "# model config\n" << format_config(config);
}

DatasetManifest split_dataset(const std::string& data, const std::string& manifest_path, std::uint64_t seed) {
  DatasetManifest manifest = load_dataset(data);
  if (!manifest_path.empty()) return apply_manifest_csv(std::move(manifest), read_text(manifest_path));
  SplitSpec spec;
  spec.seed = seed;
  return stratified_split(std::move(manifest), spec);
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string config;
  std::string csv;
  bool trainable_only = false;
  bool no_bias_flops = false;
};

int run_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const ModelConfig config = config_from_file(a.config);
  print_config(out, config);
  const auto convention = a.no_bias_flops ? FlopConvention::macs_only : FlopConvention::macs_plus_bias;
  const CostReport report = analyze(config, convention, a.trainable_only);
  out << format_report(config, report);
  if (!a.csv.empty()) write_text(a.csv, report_csv(report));
  return 0;
}

struct SynthArgs {
  std::string out_dir;
  std::size_t classes = 4;
  std::size_t per_class = 250;
  std::size_t side = 64;
  std::uint64_t seed = 42;
  double noise = 10.0;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  SynthOptions opt;
  opt.classes = a.classes;
  opt.per_class = a.per_class;
  opt.side = a.side;
  opt.seed = a.seed;
  opt.noise_sigma = a.noise / 255.0;
  out << fmt::format("# synth\nout={}\nclasses={}\nper_class={}\nside={}\nseed={}\nnoise={}\n", a.out_dir, a.classes,
                     a.per_class, a.side, a.seed, a.noise);
  if (a.classes < 2 || a.classes > synth_patterns().size()) {
    throw UsageError(fmt::format("--classes must lie in [2, {}]", synth_patterns().size()));
  }
  const DatasetManifest m = synth_generate(opt);
  write_dataset(m, a.out_dir);
  out << fmt::format("wrote {} images in {} classes to {}\n", m.samples.size(), m.class_names.size(), a.out_dir);
  return 0;
}

struct SplitArgs {
  std::string data;
  std::string out_csv;
  std::uint64_t seed = 42;
  double val = 0.15;
  double test = 0.15;
};

int run_split(const SplitArgs& a, std::ostream& out) {
  out << fmt::format("# split\ndata={}\nseed={}\nval_fraction={}\ntest_fraction={}\n", a.data, a.seed, a.val, a.test);
  SplitSpec spec{a.val, a.test, a.seed};
  const DatasetManifest m = stratified_split(load_dataset(a.data), spec);
  write_text(a.out_csv, manifest_csv(m));
  const auto train = m.class_counts(Split::train);
  const auto val = m.class_counts(Split::val);
  const auto test = m.class_counts(Split::test);
  out << "class,train,val,test\n";
  for (std::size_t c = 0; c < m.class_names.size(); ++c) {
    out << fmt::format("{},{},{},{}\n", m.class_names[c], train[c], val[c], test[c]);
  }
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string manifest;
  std::string out_model;
  std::string history;
  TrainConfig train;
  std::uint64_t seed = 42;
};

int run_train(TrainArgs a, std::ostream& out) {
  DatasetManifest manifest = split_dataset(a.data, a.manifest, a.seed);
  ModelConfig config = config_from_file(a.config);
  if (a.config.empty()) config.num_classes = manifest.class_names.size();
  if (config.num_classes != manifest.class_names.size()) {
    throw UsageError(fmt::format("config has {} classes but {} holds {}", config.num_classes, a.data,
                                 manifest.class_names.size()));
  }
  config.class_names = manifest.class_names;
  a.train.shuffle_seed = a.seed;
  try {
    config.validate();
    a.train.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  print_config(out, config);
  out << fmt::format("# train config\nepochs={}\nbatch={}\nlr_init={}\nlr_factor={}\nlr_patience={}\nlr_min={}\n"
                     "seed={}\nthreads={}\n",
                     a.train.epochs, a.train.batch_size, a.train.lr_init, a.train.lr_factor, a.train.lr_patience,
                     a.train.lr_min, a.seed, thread_count());

  const LabeledImages train = gather(manifest, Split::train, config.input_h, config.input_w);
  const LabeledImages val = gather(manifest, Split::val, config.input_h, config.input_w);
  out << fmt::format("train samples={} val samples={}\n", train.size(), val.size());

  const auto report = [&out](const EpochRecord& r) {
    out << fmt::format("epoch {:>3}  loss {:.4f}  oa {:.4f}  val_loss {:.4f}  val_oa {:.4f}  lr {:.3g}\n", r.epoch,
                       r.train_loss, r.train_oa, r.val_loss, r.val_oa, r.lr)
        << std::flush;
  };
  FitResult result = fit(build<float>(config, a.seed), train, val, a.train, report);

  save_model(result.model, a.out_model);
  if (!a.history.empty()) write_text(a.history, result.history.csv());
  const auto& best = result.history.epochs[result.history.best_epoch - 1];
  out << fmt::format("best epoch {} with val_oa {:.4f}; saved {}\n", best.epoch, best.val_oa, a.out_model);
  return 0;
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string manifest;
  std::string split = "test";
  std::string confusion;
  std::string metrics;
  std::uint64_t seed = 42;
};

int run_eval(const EvalArgs& a, std::ostream& out) {
  const Model model = load_model(a.model);
  print_config(out, model.config);
  out << fmt::format("# eval\ndata={}\nsplit={}\nseed={}\n", a.data, a.split, a.seed);
  Split split;
  try {
    split = parse_split(a.split);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const DatasetManifest manifest = split_dataset(a.data, a.manifest, a.seed);
  if (manifest.class_names.size() != model.config.num_classes) {
    throw Error(fmt::format("model predicts {} classes but {} holds {}", model.config.num_classes, a.data,
                            manifest.class_names.size()));
  }
  if (!model.config.class_names.empty() && model.config.class_names != manifest.class_names) {
    throw Error("class folders of " + a.data + " differ from the classes the model was trained on");
  }
  const LabeledImages data = gather(manifest, split, model.config.input_h, model.config.input_w);
  const Evaluation ev = evaluate(model, data);
  ConfusionMatrix cm = confusion(data.labels, ev.predictions, model.config.num_classes);
  cm.set_class_names(manifest.class_names);
  const MetricsSummary s = summarize(cm);

  const std::string metrics = metrics_csv(s);
  out << metrics;
  if (!a.metrics.empty()) write_text(a.metrics, metrics);
  if (!a.confusion.empty()) write_text(a.confusion, confusion_csv(cm));
  return 0;
}

struct PredictArgs {
  std::string model;
  std::string image;
};

int run_predict(const PredictArgs& a, std::ostream& out) {
  const Model model = load_model(a.model);
  const ModelConfig& c = model.config;
  const Tensor img = normalize(resize_bilinear(read_ppm(a.image), c.input_h, c.input_w));
  if (c.input_c != img.dim(2)) throw Error(fmt::format("model expects {} channels, image has 3", c.input_c));
  const auto label = predict(model, img.reshaped(Shape{1, c.input_h, c.input_w, c.input_c})).front();
  out << (c.class_names.empty() ? std::to_string(label) : c.class_names[label]) << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"SceneMixer: convolutional-mixer scene classifier"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads (results do not depend on this)")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}));

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "Closed-form parameter / MAC / FLOP report");
  analyze_cmd->add_option("--config", analyze_args.config, "Model config file (default: 64x64x3, 10 classes)")
      ->check(CLI::ExistingFile);
  analyze_cmd->add_option("--csv", analyze_args.csv, "Also write layer,params,macs,flops CSV here");
  analyze_cmd->add_flag("--trainable-only", analyze_args.trainable_only, "Exclude batch-norm running statistics");
  analyze_cmd->add_flag("--no-bias-flops", analyze_args.no_bias_flops, "Count FLOPs as exactly 2*MACs");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic PPM scene dataset");
  synth_cmd->add_option("--out", synth_args.out_dir, "Output directory")->required();
  synth_cmd->add_option("--classes", synth_args.classes, "Number of pattern classes (2-6)");
  synth_cmd->add_option("--per-class", synth_args.per_class, "Images per class")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--side", synth_args.side, "Image side in pixels")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth_args.seed, "Generator seed");
  synth_cmd->add_option("--noise", synth_args.noise, "Gaussian pixel noise sigma in 0-255 units")
      ->check(CLI::NonNegativeNumber);

  SplitArgs split_args;
  auto* split_cmd = app.add_subcommand("split", "Stratified 70/15/15 split manifest");
  split_cmd->add_option("--data", split_args.data, "Dataset root (one folder per class)")->required();
  split_cmd->add_option("--seed", split_args.seed, "Split seed");
  split_cmd->add_option("--out", split_args.out_csv, "Manifest CSV (path,class,split)")->required();
  split_cmd->add_option("--val", split_args.val, "Validation fraction");
  split_cmd->add_option("--test", split_args.test, "Test fraction");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train and keep the best-validation checkpoint");
  train_cmd->add_option("--data", train_args.data, "Dataset root")->required();
  train_cmd->add_option("--config", train_args.config, "Model config file (default: dataset class count)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--manifest", train_args.manifest, "Split manifest CSV (default: split with --seed)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--epochs", train_args.train.epochs, "Epochs");
  train_cmd->add_option("--batch", train_args.train.batch_size, "Batch size");
  train_cmd->add_option("--lr", train_args.train.lr_init, "Initial learning rate");
  train_cmd->add_option("--lr-factor", train_args.train.lr_factor, "Plateau reduction factor");
  train_cmd->add_option("--lr-patience", train_args.train.lr_patience, "Plateau patience in epochs");
  train_cmd->add_option("--lr-min", train_args.train.lr_min, "Learning-rate floor");
  train_cmd->add_option("--seed", train_args.seed, "Seed for split, initialization and shuffling");
  train_cmd->add_option("--out", train_args.out_model, "Checkpoint path")->required();
  train_cmd->add_option("--history", train_args.history, "History CSV path");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "OA / AA / kappa on one split");
  eval_cmd->add_option("--model", eval_args.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_args.data, "Dataset root")->required();
  eval_cmd->add_option("--manifest", eval_args.manifest, "Split manifest CSV (default: split with --seed)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", eval_args.split, "train, val or test");
  eval_cmd->add_option("--seed", eval_args.seed, "Split seed when no manifest is given");
  eval_cmd->add_option("--confusion", eval_args.confusion, "Confusion matrix CSV path");
  eval_cmd->add_option("--metrics", eval_args.metrics, "Metrics CSV path");

  PredictArgs predict_args;
  auto* predict_cmd = app.add_subcommand("predict", "Print the predicted class of one image");
  predict_cmd->add_option("--model", predict_args.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--image", predict_args.image, "Binary PPM image")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 1;
  }

  set_thread_count(threads);
  try {
    if (*analyze_cmd) return run_analyze(analyze_args, out);
    if (*synth_cmd) return run_synth(synth_args, out);
    if (*split_cmd) return run_split(split_args, out);
    if (*train_cmd) return run_train(train_args, out);
    if (*eval_cmd) return run_eval(eval_args, out);
    if (*predict_cmd) return run_predict(predict_args, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace scenemixer::cli
