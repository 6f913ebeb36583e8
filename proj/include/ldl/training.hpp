#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ldl/autodiff.hpp"
#include "ldl/checkpoint.hpp"
#include "ldl/data.hpp"
#include "ldl/distribution.hpp"
#include "ldl/network.hpp"

namespace ldl {

struct TrainConfig {
  std::size_t batch_size = 32;
  double base_lr = 0.001;
  std::size_t lr_step = 4000;
  double lr_factor = 0.1;
  std::size_t max_iter = 17000;
  double weight_decay = 0.0005;
  double last_layer_lr_mult = 10.0;
  double last_layer_decay_mult = 100.0;
  double momentum = 0.9;
  LossKind loss = LossKind::euclidean;
  std::size_t augmentation_factor = 1;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1000;
  /// Start the dense head at zero so the initial prediction is uniform.
  bool zero_init_head = false;

  /// Schedule used for desk-scale runs: the published multipliers, decay,
  /// momentum and batch size with a shortened, faster step schedule.
  static TrainConfig desk_default() {
    TrainConfig c;
    c.base_lr = 0.01;
    c.lr_step = 150;
    c.max_iter = 400;
    c.eval_every = 100;
    return c;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigurationError("batch_size must be positive");
    if (!(base_lr > 0)) throw ConfigurationError("base_lr must be positive");
    if (lr_step < 1) throw ConfigurationError("lr_step must be positive");
    if (!(lr_factor > 0 && lr_factor < 1)) throw ConfigurationError("lr_factor must lie in (0,1)");
    if (max_iter < 1) throw ConfigurationError("max_iter must be positive");
    if (!(weight_decay >= 0)) throw ConfigurationError("weight_decay must be non-negative");
    if (!(last_layer_lr_mult > 0) || !(last_layer_decay_mult >= 0)) {
      throw ConfigurationError("last-layer multipliers must be positive");
    }
    if (!(momentum >= 0 && momentum < 1)) throw ConfigurationError("momentum must lie in [0,1)");
    if (augmentation_factor < 1) throw ConfigurationError("augmentation factor must be >= 1");
    if (eval_every < 1) throw ConfigurationError("eval_every must be positive");
  }
};

/// Step schedule: base_lr * lr_factor^floor(iter / lr_step).
inline double lr_at(const TrainConfig& c, std::size_t iter) {
  if (iter >= c.max_iter) {
    throw ConfigurationError("iteration " + std::to_string(iter) + " outside schedule of " +
                             std::to_string(c.max_iter) + " iterations");
  }
  return c.base_lr * std::pow(c.lr_factor, static_cast<double>(iter / c.lr_step));
}

inline bool is_last_layer(ParamRole role) { return role == ParamRole::dense_weight || role == ParamRole::dense_bias; }
inline bool is_batch_norm(ParamRole role) { return role == ParamRole::bn_gamma || role == ParamRole::bn_beta; }

inline double effective_lr(const TrainConfig& c, ParamRole role, std::size_t iter) {
  return lr_at(c, iter) * (is_last_layer(role) ? c.last_layer_lr_mult : 1.0);
}

inline double effective_decay(const TrainConfig& c, ParamRole role) {
  if (is_batch_norm(role)) return 0.0;
  return c.weight_decay * (is_last_layer(role) ? c.last_layer_decay_mult : 1.0);
}

/// Momentum SGD: v <- mu v - lr (g + wd w); w <- w + v.
template <typename T>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const ParameterStore<T>& store) {
    for (std::size_t i = 0; i < store.size(); ++i) velocity_.emplace_back(store[i].value.shape());
  }

  void step(ParameterStore<T>& store, const TrainConfig& c, std::size_t iter) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (!store[i].grad.all_finite()) {
        throw NumericalError("iteration " + std::to_string(iter) + ": non-finite gradient in parameter '" +
                             store[i].name + "'");
      }
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      const double lr = effective_lr(c, p.role, iter);
      const double wd = effective_decay(c, p.role);
      auto& v = velocity_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = static_cast<double>(p.grad[k]) + wd * static_cast<double>(p.value[k]);
        v[k] = static_cast<T>(c.momentum * static_cast<double>(v[k]) - lr * g);
        p.value[k] += v[k];
      }
    }
  }

 private:
  std::vector<Tensor<T>> velocity_;
};

/// One evaluation point of a training run.
struct EvalRecord {
  std::size_t iteration = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  std::optional<double> test_pc;
  double test_kl = 0.0;
  double test_chebyshev = 0.0;
};

struct MetricsLog {
  std::vector<EvalRecord> records;

  void append(const EvalRecord& r) {
    if (!records.empty() && r.iteration <= records.back().iteration) {
      throw ConfigurationError("metrics log iterations must be strictly increasing");
    }
    records.push_back(r);
  }

  static constexpr const char* kHeader = "iter,train_loss,test_loss,test_pc,test_kl,test_chebyshev";

  std::string to_csv() const {
    std::ostringstream os;
    os << kHeader << "\n";
    os << std::setprecision(9);
    for (const auto& r : records) {
      os << r.iteration << "," << r.train_loss << "," << r.test_loss << ",";
      if (r.test_pc) os << *r.test_pc;
      else os << "nan";
      os << "," << r.test_kl << "," << r.test_chebyshev << "\n";
    }
    return os.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileError("cannot write metrics '" + path.string() + "'");
    out << to_csv();
  }
};

struct SamplePrediction {
  double true_mean = 0.0;
  double pred_mean = 0.0;
  ScoreDistribution pred_distribution;
  ScoreDistribution target;
  /// Value of the training objective for this sample.
  double loss = 0.0;
};

struct Evaluation {
  std::optional<double> pc;
  std::string pc_error;
  double mean_loss = 0.0;
  double mean_kl = 0.0;
  double mean_chebyshev = 0.0;
  std::vector<SamplePrediction> predictions;
};

/// Per-sample loss between a prediction and its target, as optimized during training.
inline double sample_loss(LossKind kind, const ScoreDistribution& pred, const ScoreDistribution& target) {
  switch (kind) {
    case LossKind::euclidean: return euclidean_loss(pred, target, false).value;
    case LossKind::euclidean_sq: return euclidean_loss(pred, target, true).value;
    case LossKind::kl: return kl_loss(target, pred).value;
  }
  return 0.0;
}

/// Split metrics from per-sample predictions. An undefined PC is reported in pc_error.
inline Evaluation summarize(std::vector<SamplePrediction> predictions) {
  if (predictions.empty()) throw EmptyInputError("summarize: no predictions");
  Evaluation ev;
  std::vector<double> pred, truth;
  for (const auto& p : predictions) {
    ev.mean_loss += p.loss;
    ev.mean_kl += kl_loss(p.target, p.pred_distribution).value;
    ev.mean_chebyshev += chebyshev(p.pred_distribution, p.target);
    pred.push_back(p.pred_mean);
    truth.push_back(p.true_mean);
  }
  const double n = static_cast<double>(predictions.size());
  ev.mean_loss /= n;
  ev.mean_kl /= n;
  ev.mean_chebyshev /= n;
  try {
    ev.pc = pearson(pred, truth);
  } catch (const UndefinedCorrelationError& e) {
    ev.pc_error = e.what();
  }
  ev.predictions = std::move(predictions);
  return ev;
}

namespace detail {

inline void require_images(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t size) {
  for (auto i : idx) {
    const auto& s = ds.samples.at(i).image.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] != size || s[2] != size) {
      throw DimensionError("sample " + std::to_string(i) + " has image " + shape_string(s) +
                           ", network expects [3," + std::to_string(size) + "," + std::to_string(size) + "]");
    }
  }
}

template <typename T>
Tensor<T> stack_images(const Dataset& ds, std::span<const std::size_t> idx) {
  const auto& s0 = ds.samples.at(idx[0]).image.shape();
  const std::size_t per = shape_size(s0);
  Tensor<T> out({idx.size(), s0[0], s0[1], s0[2]});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = ds.samples[idx[b]].image;
    std::copy(img.data().begin(), img.data().end(), out.raw() + b * per);
  }
  return out;
}

}  // namespace detail

/// Eval-mode pass over `indices`: PC between decoded and true mean scores, mean
/// KL and Chebyshev between predicted and target distributions. A scalar head's
/// prediction is decoded as a point mass on the nearest label.
template <typename T>
Evaluation evaluate(Network<T>& net, const Dataset& ds, const std::vector<std::size_t>& indices,
                    LossKind loss = LossKind::euclidean, std::size_t batch = 64) {
  if (indices.empty()) throw ConfigurationError("evaluate: empty split");
  const auto& spec = net.spec();
  detail::require_images(ds, indices, spec.input_size);
  std::vector<SamplePrediction> predictions;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::size_t end = std::min(indices.size(), start + batch);
    std::span<const std::size_t> idx(indices.data() + start, end - start);
    auto g = net.graph();
    const auto out = net.forward(g, detail::stack_images<T>(ds, idx), Mode::eval);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Sample& s = ds.samples[idx[b]];
      SamplePrediction p;
      p.true_mean = s.mean_score;
      p.target = s.distribution;
      if (spec.head == HeadKind::distribution) {
        const auto& f = g.value(out.distribution);
        const std::size_t c = spec.num_labels;
        std::vector<double> d(f.raw() + b * c, f.raw() + (b + 1) * c);
        p.pred_distribution = ScoreDistribution::renormalized(std::move(d), 1e-3);
        p.pred_mean = weighted_mean(p.pred_distribution, ds.scale);
        p.loss = sample_loss(loss, p.pred_distribution, s.distribution);
      } else {
        p.pred_mean = g.value(out.logits)[b];
        p.pred_distribution = ScoreDistribution::point_mass(ds.scale.size(), ds.scale.nearest(p.pred_mean));
        const double diff = p.pred_mean - s.mean_score;
        p.loss = loss == LossKind::euclidean_sq ? 0.5 * diff * diff : std::abs(diff);
      }
      predictions.push_back(std::move(p));
    }
  }
  return summarize(std::move(predictions));
}

inline Evaluation evaluate(const Checkpoint& ckpt, const Dataset& ds, const std::vector<std::size_t>& indices,
                           LossKind loss = LossKind::euclidean) {
  auto net = network_from_checkpoint<float>(ckpt);
  return evaluate(net, ds, indices, loss);
}

struct TrainResult {
  Checkpoint checkpoint;
  MetricsLog log;
};

using EvalCallback = std::function<void(const EvalRecord&)>;

/// Mini-batch SGD over the train split for max_iter iterations, reshuffling
/// each epoch. The optimized objective is the batch-mean of the per-sample loss.
inline TrainResult train(const Dataset& dataset, const NetworkSpec& spec, const TrainConfig& config,
                         const EvalCallback& on_eval = {}) {
  config.validate();
  spec.validate();
  if (dataset.train.empty() || dataset.test.empty()) {
    throw ConfigurationError("training needs non-empty train and test splits");
  }
  if (spec.head == HeadKind::distribution && spec.num_labels != dataset.scale.size()) {
    throw DimensionError("network predicts " + std::to_string(spec.num_labels) + " labels, score scale has " +
                         std::to_string(dataset.scale.size()));
  }
  if (spec.head == HeadKind::scalar && config.loss == LossKind::kl) {
    throw ConfigurationError("kl loss needs a distribution head");
  }
  detail::require_images(dataset, dataset.train, spec.input_size);
  detail::require_images(dataset, dataset.test, spec.input_size);

  const Dataset expanded = config.augmentation_factor > 1
                               ? expand(dataset, config.augmentation_factor, mix_seed(config.seed, 0xa0))
                               : Dataset{};
  const Dataset& ds = config.augmentation_factor > 1 ? expanded : dataset;

  Network<float> net(spec);
  net.init_weights(config.seed);
  if (config.zero_init_head) {
    net.parameters().at("fc.weight").value.fill(0.0f);
    net.parameters().at("fc.bias").value.fill(0.0f);
  }
  auto& store = net.parameters();
  SgdOptimizer<float> opt(store);

  const std::size_t batch = std::min(config.batch_size, ds.train.size());
  if (batch < 2) throw BatchSizeError("training batch must hold at least 2 samples for batch normalization");
  const std::size_t out_dim = spec.output_size();

  std::mt19937_64 rng(mix_seed(config.seed, 0x5b));
  std::vector<std::size_t> order = ds.train;
  std::size_t cursor = order.size();

  TrainResult result;
  double window_loss = 0;
  std::size_t window_count = 0;
  for (std::size_t iter = 0; iter < config.max_iter; ++iter) {
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    std::span<const std::size_t> idx(order.data() + cursor, batch);
    cursor += batch;

    Tensor<float> target({batch, out_dim});
    for (std::size_t b = 0; b < batch; ++b) {
      const Sample& s = ds.samples[idx[b]];
      if (spec.head == HeadKind::distribution) {
        for (std::size_t j = 0; j < out_dim; ++j) target[b * out_dim + j] = static_cast<float>(s.distribution[j]);
      } else {
        target[b] = static_cast<float>(s.mean_score);
      }
    }

    store.zero_grad();
    auto g = net.graph();
    const auto out = net.forward(g, detail::stack_images<float>(ds, idx), Mode::train);
    const Var pred = spec.head == HeadKind::distribution ? out.distribution : out.logits;
    Var loss;
    switch (config.loss) {
      case LossKind::euclidean: loss = ad::euclidean_loss(g, pred, target, false); break;
      case LossKind::euclidean_sq: loss = ad::euclidean_loss(g, pred, target, true); break;
      case LossKind::kl: loss = ad::kl_loss(g, pred, target); break;
    }
    const Var mean_loss = ad::scale(g, loss, 1.0f / static_cast<float>(batch));
    window_loss += g.value(mean_loss)[0];
    ++window_count;
    g.backward(mean_loss);
    opt.step(store, config, iter);

    const std::size_t done = iter + 1;
    if (done % config.eval_every == 0 || done == config.max_iter) {
      const auto ev = evaluate(net, ds, ds.test, config.loss);
      EvalRecord r;
      r.iteration = done;
      r.train_loss = window_loss / static_cast<double>(window_count);
      r.test_loss = ev.mean_loss;
      r.test_pc = ev.pc;
      r.test_kl = ev.mean_kl;
      r.test_chebyshev = ev.mean_chebyshev;
      result.log.append(r);
      if (on_eval) on_eval(r);
      window_loss = 0;
      window_count = 0;
    }
  }
  result.checkpoint = make_checkpoint(net, config.max_iter);
  return result;
}

}  // namespace ldl
