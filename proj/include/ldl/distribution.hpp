#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ldl/error.hpp"

namespace ldl {

/// Ordered score labels y_1 < ... < y_c.
class ScoreScale {
 public:
  ScoreScale() : labels_{1, 2, 3, 4, 5} {}

  explicit ScoreScale(std::vector<double> labels) : labels_(std::move(labels)) {
    if (labels_.size() < 2) throw ConfigurationError("score scale needs at least 2 labels");
    for (std::size_t i = 1; i < labels_.size(); ++i) {
      if (!(labels_[i] > labels_[i - 1])) throw ConfigurationError("score scale labels must be strictly increasing");
    }
  }

  std::size_t size() const { return labels_.size(); }
  const std::vector<double>& labels() const { return labels_; }
  double operator[](std::size_t i) const { return labels_[i]; }
  double lowest() const { return labels_.front(); }
  double highest() const { return labels_.back(); }

  /// Index of the label closest to `score`; halfway ties go to the lower label.
  std::size_t nearest(double score) const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < labels_.size(); ++j) {
      if (std::abs(score - labels_[j]) < std::abs(score - labels_[best])) best = j;
    }
    return best;
  }

  friend bool operator==(const ScoreScale&, const ScoreScale&) = default;

 private:
  std::vector<double> labels_;
};

/// Description degrees over the labels of a scale: non-negative, summing to one.
class ScoreDistribution {
 public:
  static constexpr double kSumTolerance = 1e-6;

  ScoreDistribution() = default;

  explicit ScoreDistribution(std::vector<double> degrees) : degrees_(std::move(degrees)) {
    if (degrees_.empty()) throw EmptyInputError("score distribution has no degrees");
    double sum = 0;
    for (double d : degrees_) {
      if (!(d >= 0.0 && d <= 1.0)) {
        throw ValidationError("description degree " + format(d) + " is outside [0,1]");
      }
      sum += d;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) {
      throw ValidationError("description degrees sum to " + format(sum) + ", expected 1");
    }
  }

  /// Rescales `raw` to sum to one when its sum is within `max_drift` of 1.
  static ScoreDistribution renormalized(std::vector<double> raw, double max_drift) {
    double sum = 0;
    for (double d : raw) {
      if (!(d >= 0.0)) throw ValidationError("description degree " + format(d) + " is negative");
      sum += d;
    }
    if (raw.empty() || std::abs(sum - 1.0) > max_drift) {
      throw ValidationError("description degrees sum to " + format(sum) + ", beyond allowed drift " +
                            format(max_drift));
    }
    for (double& d : raw) d /= sum;
    return ScoreDistribution(std::move(raw));
  }

  /// Point mass on label `index`.
  static ScoreDistribution point_mass(std::size_t size, std::size_t index) {
    std::vector<double> d(size, 0.0);
    d.at(index) = 1.0;
    return ScoreDistribution(std::move(d));
  }

  std::size_t size() const { return degrees_.size(); }
  const std::vector<double>& degrees() const { return degrees_; }
  double operator[](std::size_t i) const { return degrees_[i]; }

  friend bool operator==(const ScoreDistribution&, const ScoreDistribution&) = default;

 private:
  static std::string format(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
  }

  std::vector<double> degrees_;
};

enum class LossKind { euclidean, euclidean_sq, kl };

inline std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::euclidean: return "euclidean";
    case LossKind::euclidean_sq: return "euclidean_sq";
    case LossKind::kl: return "kl";
  }
  return "unknown";
}

inline LossKind parse_loss_kind(const std::string& name) {
  if (name == "euclidean") return LossKind::euclidean;
  if (name == "euclidean_sq") return LossKind::euclidean_sq;
  if (name == "kl") return LossKind::kl;
  throw ConfigurationError("unknown loss kind '" + name + "'");
}

struct LossValue {
  double value = 0.0;
  LossKind kind = LossKind::euclidean;
};

namespace detail {
inline void require_same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": lengths " + std::to_string(a) + " and " + std::to_string(b) +
                         " differ");
  }
}
}  // namespace detail

/// Normalized histogram of rater scores over the scale, nearest-label binning.
inline ScoreDistribution distribution_from_ratings(std::span<const double> ratings, const ScoreScale& scale) {
  if (ratings.empty()) throw EmptyInputError("no ratings given");
  std::vector<double> counts(scale.size(), 0.0);
  for (double r : ratings) {
    if (!(r >= scale.lowest() && r <= scale.highest())) {
      std::ostringstream os;
      os << "rating " << r << " outside score range [" << scale.lowest() << ", " << scale.highest() << "]";
      throw RangeError(os.str());
    }
    counts[scale.nearest(r)] += 1.0;
  }
  const double n = static_cast<double>(ratings.size());
  for (double& c : counts) c /= n;
  return ScoreDistribution(std::move(counts));
}

/// Decoded score: dot product of the degrees with the label values.
inline double weighted_mean(const ScoreDistribution& dist, const ScoreScale& scale) {
  detail::require_same_length(dist.size(), scale.size(), "weighted_mean");
  double s = 0;
  for (std::size_t j = 0; j < dist.size(); ++j) s += dist[j] * scale[j];
  return std::clamp(s, scale.lowest(), scale.highest());
}

/// ||d - f||_2, or 0.5 ||d - f||_2^2 when `squared`.
inline LossValue euclidean_loss(const ScoreDistribution& pred, const ScoreDistribution& target, bool squared) {
  detail::require_same_length(pred.size(), target.size(), "euclidean_loss");
  double sq = 0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const double d = target[j] - pred[j];
    sq += d * d;
  }
  return squared ? LossValue{0.5 * sq, LossKind::euclidean_sq} : LossValue{std::sqrt(sq), LossKind::euclidean};
}

/// sum_j d_j ln(d_j / max(f_j, clamp)), with 0 ln(0/q) = 0.
inline LossValue kl_loss(const ScoreDistribution& target, const ScoreDistribution& pred, double clamp = 1e-7) {
  detail::require_same_length(pred.size(), target.size(), "kl_loss");
  double s = 0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    if (target[j] <= 0) continue;
    s += target[j] * std::log(target[j] / std::max(pred[j], clamp));
  }
  return LossValue{s, LossKind::kl};
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0;
  for (double& v : out) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

/// Gradient of kl_loss(d, softmax(z)) with respect to z: softmax(z) - d.
inline std::vector<double> kl_logit_gradient(const ScoreDistribution& target, std::span<const double> logits) {
  detail::require_same_length(logits.size(), target.size(), "kl_logit_gradient");
  auto g = softmax(logits);
  for (std::size_t j = 0; j < g.size(); ++j) g[j] -= target[j];
  return g;
}

/// Sample Pearson correlation. Throws UndefinedCorrelationError when either side is constant.
inline double pearson(std::span<const double> pred, std::span<const double> truth) {
  detail::require_same_length(pred.size(), truth.size(), "pearson");
  if (pred.size() < 2) throw UndefinedCorrelationError("pearson: need at least 2 pairs");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(pred)) throw UndefinedCorrelationError("pearson: predicted scores are constant");
  if (constant(truth)) throw UndefinedCorrelationError("pearson: true scores are constant");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mt = std::accumulate(truth.begin(), truth.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = truth[i] - mt;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double chebyshev(const ScoreDistribution& pred, const ScoreDistribution& target) {
  detail::require_same_length(pred.size(), target.size(), "chebyshev");
  double m = 0;
  for (std::size_t j = 0; j < pred.size(); ++j) m = std::max(m, std::abs(pred[j] - target[j]));
  return m;
}

}  // namespace ldl
