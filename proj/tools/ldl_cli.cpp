// ldl: command-line front end for synthesis, training, evaluation, prediction
// and gradient checking.
//
// Exit codes: 0 success, 1 usage, 2 file, 3 format/validation,
// 4 configuration/dimension, 5 numerical or gradient-check failure,
// 6 undefined correlation.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ldl/ldl.hpp"

namespace fs = std::filesystem;
using namespace ldl;

namespace {

enum Exit { kOk = 0, kUsage = 1, kFile = 2, kFormat = 3, kConfig = 4, kNumerical = 5, kUndefined = 6 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SplitOptions {
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

struct Options {
  // synth
  SynthConfig synth;
  // data / checkpoint paths
  std::string data, out, checkpoint, metrics, image, crop, input, predictions;
  std::string on = "test";
  SplitOptions split;
  // train
  TrainConfig train = TrainConfig::desk_default();
  std::string loss = "euclidean";
  std::string blocks = "1,1,1,1";
  std::string widths = "8,16,32,64";
  std::string block_kind = "basic";
  std::string head = "distribution";
  bool skip = true;
  std::size_t input_size = 32;
  std::size_t stem_width = 8;
  // gradcheck
  std::size_t seeds = 50;
  std::uint64_t first_seed = 1;

  bool train_count_given() const { return split.train_count > 0 || split.test_count > 0; }
};

std::array<std::size_t, 4> parse_four(const std::string& text, const std::string& flag) {
  std::array<std::size_t, 4> v{};
  std::stringstream ss(text);
  std::string tok;
  std::size_t k = 0;
  while (std::getline(ss, tok, ',')) {
    if (k == 4) throw UsageError(flag + " expects 4 comma-separated integers, got '" + text + "'");
    try {
      std::size_t used = 0;
      v[k++] = std::stoul(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(flag + ": cannot parse '" + tok + "'");
    }
  }
  if (k != 4) throw UsageError(flag + " expects 4 comma-separated integers, got '" + text + "'");
  return v;
}

CropBox parse_crop(const std::string& text) {
  const auto v = parse_four([&] {
    std::string t = text;
    std::replace(t.begin(), t.end(), ';', ',');
    return t;
  }(), "--crop");
  return CropBox{v[0], v[1], v[2], v[3]};
}

NetworkSpec build_spec(const Options& o) {
  NetworkSpec s;
  s.block_counts = parse_four(o.blocks, "--blocks");
  s.stage_widths = parse_four(o.widths, "--widths");
  s.block_kind = o.block_kind == "bottleneck" ? BlockKind::bottleneck : BlockKind::basic;
  s.head = o.head == "scalar" ? HeadKind::scalar : HeadKind::distribution;
  s.skip_connections = o.skip;
  s.input_size = o.input_size;
  s.stem_width = o.stem_width;
  return s;
}

Dataset load_split(const Options& o, std::size_t image_size) {
  const Dataset all = load_csv(o.data, image_size);
  if (o.train_count_given()) return split(all, o.split.train_count, o.split.test_count, o.split.split_seed);
  return split_fraction(all, o.split.train_fraction, o.split.split_seed);
}

// Reads `key=value` lines ('#' comments, blank lines allowed) into `--key value` arguments.
std::vector<std::string> config_arguments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config file '" + path.string() + "'");
  std::vector<std::string> args;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(row) + ": expected key=value, got '" + line + "'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    args.push_back("--" + trim(line.substr(0, eq)));
    args.push_back(trim(line.substr(eq + 1)));
  }
  return args;
}

void print_resolved(const CLI::App& sub) {
  std::cout << "# resolved configuration\n";
  std::cout << "verb=" << sub.get_name() << "\n";
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    std::string value = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
    std::cout << name << "=" << value << "\n";
  }
  std::cout << std::flush;
}

void print_record(const Evaluation& ev) {
  std::cout << std::setprecision(6) << "pc=";
  if (ev.pc) std::cout << *ev.pc;
  else std::cout << "nan";
  std::cout << " kl=" << ev.mean_kl << " chebyshev=" << ev.mean_chebyshev << " loss=" << ev.mean_loss
            << " n=" << ev.predictions.size() << "\n";
}

int run_synth(const Options& o) {
  const Dataset ds = synth_dataset(o.synth);
  const fs::path index = o.out;
  if (!index.parent_path().empty()) fs::create_directories(index.parent_path());
  write_csv(ds, index);
  const fs::path latent_path = index.parent_path() / "latent.csv";
  std::ofstream latent(latent_path);
  if (!latent) throw FileError("cannot write '" + latent_path.string() + "'");
  latent << "path,latent,mean_score\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    latent << "images/face_" << std::setw(5) << std::setfill('0') << i << std::setfill(' ') << ".ppm,"
           << *ds.samples[i].latent << "," << ds.samples[i].mean_score << "\n";
  }
  std::cout << "wrote " << ds.size() << " samples to " << index.string() << "\n";
  return kOk;
}

int run_train(Options o) {
  o.train.loss = parse_loss_kind(o.loss);
  const NetworkSpec spec = build_spec(o);
  spec.validate();
  o.train.validate();
  std::cout << "# network\n" << spec.encode();
  const Dataset ds = load_split(o, spec.input_size);
  std::cout << "train=" << ds.train.size() << " test=" << ds.test.size() << "\n";
  const auto result = train(ds, spec, o.train, [](const EvalRecord& r) {
    std::cout << "iter " << r.iteration << " train_loss " << r.train_loss << " test_loss " << r.test_loss << " pc ";
    if (r.test_pc) std::cout << *r.test_pc;
    else std::cout << "nan";
    std::cout << " kl " << r.test_kl << " chebyshev " << r.test_chebyshev << std::endl;
  });
  save_checkpoint(result.checkpoint, o.out);
  const std::string metrics = o.metrics.empty() ? o.out + ".metrics.csv" : o.metrics;
  result.log.write_csv(metrics);
  std::cout << "checkpoint " << o.out << "\nmetrics " << metrics << "\n";
  return kOk;
}

int run_eval(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  auto net = network_from_checkpoint<float>(ckpt);
  const Dataset ds = load_split(o, ckpt.spec.input_size);
  std::vector<std::size_t> indices;
  if (o.on == "train") indices = ds.train;
  else if (o.on == "test") indices = ds.test;
  else {
    indices.resize(ds.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }
  const Evaluation ev = evaluate(net, ds, indices, parse_loss_kind(o.loss));
  const std::string out = o.predictions.empty() ? o.checkpoint + ".eval.csv" : o.predictions;
  std::ofstream csv(out);
  if (!csv) throw FileError("cannot write '" + out + "'");
  csv << "path,true_mean,pred_mean";
  for (std::size_t j = 0; j < ds.scale.size(); ++j) csv << ",pred_" << ds.scale.labels()[j];
  csv << "\n" << std::setprecision(9);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& p = ev.predictions[k];
    csv << ds.samples[indices[k]].source << "," << p.true_mean << "," << p.pred_mean;
    for (double v : p.pred_distribution.degrees()) csv << "," << v;
    csv << "\n";
  }
  print_record(ev);
  std::cout << "predictions " << out << "\n";
  if (!ev.pc) {
    std::cerr << "error: " << ev.pc_error << "\n";
    return kUndefined;
  }
  return kOk;
}

int run_predict(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  auto net = network_from_checkpoint<float>(ckpt);
  std::optional<CropBox> box;
  if (!o.crop.empty()) box = parse_crop(o.crop);
  const Image img = normalize_image(read_ppm(o.image), box, ckpt.spec.input_size);
  Tensor<float> batch({1, 3, ckpt.spec.input_size, ckpt.spec.input_size}, img.vec());
  auto g = net.graph();
  const auto out = net.forward(g, batch, Mode::eval);
  const ScoreScale scale;
  std::cout << std::setprecision(6);
  if (ckpt.spec.head == HeadKind::scalar) {
    const double score = g.value(out.logits)[0];
    std::cout << "score " << score << "\n";
    return kOk;
  }
  const auto& f = g.value(out.distribution);
  const auto dist = ScoreDistribution::renormalized(std::vector<double>(f.data().begin(), f.data().end()), 1e-3);
  std::cout << "distribution";
  for (double v : dist.degrees()) std::cout << " " << v;
  std::cout << "\nweighted_mean " << weighted_mean(dist, scale) << "\n";
  return kOk;
}

int run_gradcheck(const Options& o) {
  std::size_t failures = 0, cases = 0;
  double worst_op = 0, worst_net = 0;
  for (std::uint64_t seed = o.first_seed; seed < o.first_seed + o.seeds; ++seed) {
    for (const auto& c : run_gradient_suite(seed)) {
      ++cases;
      (c.tolerance == kNetworkGradTolerance ? worst_net : worst_op) =
          std::max(c.tolerance == kNetworkGradTolerance ? worst_net : worst_op, c.report.max_rel_error);
      if (!c.passed()) {
        ++failures;
        std::cout << "FAIL seed " << seed << " " << c.name << " rel " << c.report.max_rel_error << " at "
                  << c.report.worst_param << "[" << c.report.worst_index << "]";
        if (!c.report.numerical_failure.empty()) std::cout << " (" << c.report.numerical_failure << ")";
        std::cout << "\n";
      }
    }
  }
  std::cout << cases << " checks over " << o.seeds << " seeds, " << failures << " failed; max rel. error ops "
            << worst_op << " (tol " << kOpGradTolerance << "), network " << worst_net << " (tol "
            << kNetworkGradTolerance << ")\n";
  return failures == 0 ? kOk : kNumerical;
}

int run_export(const Options& o) {
  std::ifstream in(o.input, std::ios::binary);
  if (!in) throw FileError("cannot open '" + o.input + "'");
  char magic[4] = {};
  in.read(magic, 4);
  const bool is_checkpoint = in.gcount() == 4 && std::equal(magic, magic + 4, kCheckpointMagic);
  in.close();
  if (is_checkpoint) {
    const auto c = load_checkpoint(o.input);
    save_checkpoint(c, o.out);
    std::cout << "checkpoint version " << kCheckpointVersion << " written to " << o.out << "\n";
  } else {
    const auto ds = load_csv(o.input);
    const fs::path out = o.out;
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
    write_csv(ds, out);
    std::cout << "dataset of " << ds.size() << " samples written to " << o.out << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Label distribution learning for facial beauty prediction"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  std::string config;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config, "key=value file; flags take precedence"); };
  auto add_split = [&](CLI::App* sub) {
    sub->add_option("--train-fraction", o.split.train_fraction, "train share when counts are not given");
    sub->add_option("--train-count", o.split.train_count, "train samples (with --test-count)");
    sub->add_option("--test-count", o.split.test_count, "test samples (with --train-count)");
    sub->add_option("--split-seed", o.split.split_seed, "seed of the train/test split");
  };
  const std::vector<std::string> losses{"euclidean", "euclidean_sq", "kl"};

  auto* synth = app.add_subcommand("synth", "write a synthetic rated-face dataset");
  add_config(synth);
  synth->add_option("--n", o.synth.n, "number of faces");
  synth->add_option("--raters", o.synth.raters, "ratings per face");
  synth->add_option("--noise-sd", o.synth.noise_sd, "rater noise standard deviation");
  synth->add_option("--bimodal-fraction", o.synth.bimodal_fraction, "share of controversial faces");
  synth->add_option("--image-size", o.synth.image_size, "rendered image side");
  synth->add_option("--seed", o.synth.seed, "generator seed");
  synth->add_option("--out", o.out, "dataset index path")->required();

  auto* tr = app.add_subcommand("train", "train a network on a dataset index");
  add_config(tr);
  tr->add_option("--data", o.data, "dataset index")->required();
  tr->add_option("--out", o.out, "checkpoint path")->required();
  tr->add_option("--metrics", o.metrics, "metrics CSV (default <out>.metrics.csv)");
  tr->add_option("--loss", o.loss, "euclidean | euclidean_sq | kl")->check(CLI::IsMember(losses));
  tr->add_option("--seed", o.train.seed, "initialization and shuffling seed");
  tr->add_option("--batch-size", o.train.batch_size);
  tr->add_option("--base-lr", o.train.base_lr);
  tr->add_option("--lr-step", o.train.lr_step);
  tr->add_option("--lr-factor", o.train.lr_factor);
  tr->add_option("--max-iter", o.train.max_iter);
  tr->add_option("--weight-decay", o.train.weight_decay);
  tr->add_option("--last-layer-lr-mult", o.train.last_layer_lr_mult);
  tr->add_option("--last-layer-decay-mult", o.train.last_layer_decay_mult);
  tr->add_option("--momentum", o.train.momentum);
  tr->add_option("--augment", o.train.augmentation_factor, "training-set expansion factor");
  tr->add_option("--eval-every", o.train.eval_every);
  tr->add_option("--blocks", o.blocks, "repeats per stage, e.g. 2,3,5,2");
  tr->add_option("--widths", o.widths, "stage widths");
  tr->add_option("--block-kind", o.block_kind)->check(CLI::IsMember({"basic", "bottleneck"}));
  tr->add_option("--head", o.head)->check(CLI::IsMember({"distribution", "scalar"}));
  tr->add_option("--skip", o.skip, "residual shortcuts (0 = plain network)");
  tr->add_option("--input-size", o.input_size);
  tr->add_option("--stem-width", o.stem_width);
  add_split(tr);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_config(ev);
  ev->add_option("--checkpoint", o.checkpoint)->required();
  ev->add_option("--data", o.data)->required();
  ev->add_option("--on", o.on, "train | test | all")->check(CLI::IsMember({"train", "test", "all"}));
  ev->add_option("--loss", o.loss)->check(CLI::IsMember(losses));
  ev->add_option("--predictions", o.predictions, "per-sample CSV (default <checkpoint>.eval.csv)");
  add_split(ev);

  auto* pr = app.add_subcommand("predict", "predict the score distribution of one image");
  add_config(pr);
  pr->add_option("--checkpoint", o.checkpoint)->required();
  pr->add_option("--image", o.image, "PPM image")->required();
  pr->add_option("--crop", o.crop, "face box x0;y0;x1;y1");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and a toy network");
  add_config(gc);
  gc->add_option("--seeds", o.seeds, "number of seeds");
  gc->add_option("--first-seed", o.first_seed);

  auto* ex = app.add_subcommand("export", "re-encode a checkpoint or dataset index at the current version");
  add_config(ex);
  ex->add_option("--in", o.input)->required();
  ex->add_option("--out", o.out)->required();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // Config-file pairs go right after the verb so that later command-line flags win.
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] == "--config") {
        auto extra = config_arguments(args[i + 1]);
        args.insert(args.begin() + 1, extra.begin(), extra.end());
        break;
      }
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FileError& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kFile;
  }

  CLI::App* sub = app.get_subcommands().front();
  print_resolved(*sub);
  try {
    if (sub == synth) return run_synth(o);
    if (sub == tr) return run_train(o);
    if (sub == ev) return run_eval(o);
    if (sub == pr) return run_predict(o);
    if (sub == gc) return run_gradcheck(o);
    return run_export(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FileError& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kFile;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kFormat;
  } catch (const UndefinedCorrelationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUndefined;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
}
