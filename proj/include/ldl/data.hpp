#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ldl/distribution.hpp"
#include "ldl/error.hpp"
#include "ldl/image.hpp"

namespace ldl {

/// One rated face: image in [0,1], raw ratings, their score distribution and mean.
struct Sample {
  Image image;
  std::vector<double> ratings;
  ScoreDistribution distribution;
  double mean_score = 0.0;
  /// Image path relative to the dataset index, when known.
  std::string source;
  std::optional<CropBox> crop;
  /// Generator's latent attractiveness (synthetic samples only).
  std::optional<double> latent;
};

inline Sample make_sample(Image image, std::vector<double> ratings, const ScoreScale& scale) {
  Sample s;
  s.image = std::move(image);
  s.distribution = distribution_from_ratings(ratings, scale);
  s.ratings = std::move(ratings);
  s.mean_score = weighted_mean(s.distribution, scale);
  return s;
}

inline Sample make_sample(Image image, ScoreDistribution dist, const ScoreScale& scale) {
  Sample s;
  s.image = std::move(image);
  s.mean_score = weighted_mean(dist, scale);
  s.distribution = std::move(dist);
  return s;
}

/// Samples plus a disjoint, covering train/test partition of their indices.
struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  ScoreScale scale;

  std::size_t size() const { return samples.size(); }

  /// Puts every sample in the training split.
  void reset_split() {
    train.resize(samples.size());
    std::iota(train.begin(), train.end(), std::size_t{0});
    test.clear();
  }
};

/// Mixes a base seed with indices into an independent 64-bit seed (splitmix64).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto step = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return step(step(step(seed) ^ a) ^ b);
}

// ---------------------------------------------------------------------------
// Synthetic rated faces

struct SynthConfig {
  std::size_t n = 500;
  std::size_t raters = 70;
  double noise_sd = 0.4;
  double bimodal_fraction = 0.1;
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
};

/// Geometry of one face card, all coordinates relative to the canvas side.
struct FaceParams {
  double symmetry = 1.0;   // 1 = perfectly symmetric
  double spacing = 0.5;    // 0..1, eye separation; 0.5 is ideal
  double smile = 0.5;      // 0 = frown, 1 = smile
  double asym_sign = 1.0;  // direction of the asymmetry
  double offset_x = 0.0, offset_y = 0.0;
  std::array<double, 3> background{0.2, 0.2, 0.2};
  double skin = 0.8;
};

/// Latent attractiveness in [1,5]: rises with symmetry and smile, peaks at ideal eye spacing.
inline double face_latent(const FaceParams& p) {
  const double u = 2.0 * p.spacing - 1.0;
  const double spacing_quality = 1.0 - u * u;
  const double score = 0.45 * p.symmetry + 0.35 * spacing_quality + 0.2 * p.smile;
  return 1.0 + 4.0 * std::clamp(score, 0.0, 1.0);
}

/// Renders a grayscale face (two eye disks, nose line, mouth arc) on a tinted card.
inline Image render_face(const FaceParams& p, std::size_t size) {
  Image img({3, size, size});
  const double s = static_cast<double>(size);
  const double px = 1.0 / s;
  // soft coverage of a shape at signed distance d (negative inside), ~1px ramp
  auto coverage = [px](double d) { return std::clamp(0.5 - d / px, 0.0, 1.0); };

  const double asym = (1.0 - p.symmetry) * 0.14 * p.asym_sign;
  const double half_sep = 0.11 + 0.16 * p.spacing;
  const double eye_y = 0.38 + p.offset_y;
  const double cx = 0.5 + p.offset_x;
  const double eye_r = 0.075;
  const double r_left = eye_r * (1.0 + (1.0 - p.symmetry) * 0.35 * p.asym_sign);
  const double r_right = eye_r * (1.0 - (1.0 - p.symmetry) * 0.35 * p.asym_sign);
  const double curve = (p.smile - 0.5) * 2.0 * 0.9;  // mouth parabola coefficient
  const double mouth_y = 0.72 + p.offset_y;
  const double mouth_half = 0.17;
  const double ink = 0.08;

  for (std::size_t yi = 0; yi < size; ++yi)
    for (std::size_t xi = 0; xi < size; ++xi) {
      const double x = (static_cast<double>(xi) + 0.5) / s, y = (static_cast<double>(yi) + 0.5) / s;
      // face ellipse
      const double ex = (x - cx) / 0.42, ey = (y - 0.52 - p.offset_y) / 0.47;
      const double face_d = (std::sqrt(ex * ex + ey * ey) - 1.0) * 0.42;
      const double face = coverage(face_d);
      double feature = 0.0;
      const double dl = std::hypot(x - (cx - half_sep), y - (eye_y - asym / 2)) - r_left;
      const double dr = std::hypot(x - (cx + half_sep), y - (eye_y + asym / 2)) - r_right;
      feature = std::max({feature, coverage(dl), coverage(dr)});
      // nose: vertical segment
      if (y > 0.45 + p.offset_y && y < 0.60 + p.offset_y) feature = std::max(feature, coverage(std::abs(x - cx) - 0.02));
      // mouth: y = mouth_y - curve * (x - cx)^2 + curve * mouth_half^2 / 2, thickness 0.035
      if (std::abs(x - cx) < mouth_half) {
        const double t = x - cx;
        const double my = mouth_y - curve * (t * t - mouth_half * mouth_half / 2.0);
        feature = std::max(feature, coverage(std::abs(y - my) - 0.035));
      }
      const double gray = p.skin * (1.0 - feature) + ink * feature;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = p.background[c] * (1.0 - face) + gray * face;
        img[(c * size + yi) * size + xi] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

/// Rated synthetic faces. Each rater scores round(N(t, noise_sd)) clamped to the
/// scale; a bimodal_fraction of faces are rated from an even mixture of
/// N(t-1, noise_sd) and N(t+1, noise_sd). All samples start in the train split.
inline Dataset synth_dataset(const SynthConfig& cfg, const ScoreScale& scale = ScoreScale{}) {
  if (cfg.n < 2) throw ConfigurationError("synth: n must be >= 2");
  if (cfg.raters < 1) throw ConfigurationError("synth: raters must be >= 1");
  if (cfg.image_size < 16) throw ConfigurationError("synth: image_size must be >= 16");
  if (!(cfg.noise_sd >= 0.0) || !std::isfinite(cfg.noise_sd)) throw ConfigurationError("synth: noise_sd must be >= 0");
  if (!(cfg.bimodal_fraction >= 0.0 && cfg.bimodal_fraction <= 1.0)) {
    throw ConfigurationError("synth: bimodal_fraction must lie in [0,1]");
  }
  Dataset ds;
  ds.scale = scale;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    FaceParams p;
    p.symmetry = unit(rng);
    p.spacing = unit(rng);
    p.smile = unit(rng);
    p.asym_sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    p.offset_x = (unit(rng) - 0.5) * 0.06;
    p.offset_y = (unit(rng) - 0.5) * 0.06;
    for (auto& b : p.background) b = 0.1 + 0.25 * unit(rng);
    p.skin = 0.7 + 0.2 * unit(rng);
    const double t = face_latent(p);
    const bool bimodal = unit(rng) < cfg.bimodal_fraction;
    std::vector<double> ratings(cfg.raters);
    for (auto& r : ratings) {
      double centre = t;
      if (bimodal) centre += unit(rng) < 0.5 ? -1.0 : 1.0;
      const double draw = centre + cfg.noise_sd * gauss(rng);
      r = std::clamp(std::round(draw), scale.lowest(), scale.highest());
    }
    Sample s = make_sample(render_face(p, cfg.image_size), std::move(ratings), scale);
    s.latent = t;
    ds.samples.push_back(std::move(s));
  }
  ds.reset_split();
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentKind { color, rotation, contrast };

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::color: return "color";
    case AugmentKind::rotation: return "rotation";
    case AugmentKind::contrast: return "contrast";
  }
  return "unknown";
}

struct AugmentRanges {
  double color_sd = 0.1;
  double max_rotation_deg = 15.0;
  double contrast_low = 0.8;
  double contrast_high = 1.25;
};

/// Returns a copy of `sample` with an augmented image; label fields are copied unchanged.
inline Sample augment(const Sample& sample, AugmentKind kind, std::uint64_t seed, const ColorPca& pca,
                      const AugmentRanges& ranges = {}) {
  std::mt19937_64 rng(seed);
  Sample out = sample;
  switch (kind) {
    case AugmentKind::color: {
      std::normal_distribution<double> alpha(0.0, ranges.color_sd);
      std::array<double, 3> a{};
      for (auto& v : a) v = alpha(rng);
      out.image = color_jitter(sample.image, pca, a);
      break;
    }
    case AugmentKind::rotation: {
      std::uniform_real_distribution<double> angle(-ranges.max_rotation_deg, ranges.max_rotation_deg);
      out.image = rotate(sample.image, angle(rng));
      break;
    }
    case AugmentKind::contrast: {
      std::uniform_real_distribution<double> factor(ranges.contrast_low, ranges.contrast_high);
      out.image = adjust_contrast(sample.image, factor(rng));
      break;
    }
  }
  return out;
}

inline ColorPca train_color_pca(const Dataset& ds) {
  std::vector<const Image*> images;
  for (auto i : ds.train) images.push_back(&ds.samples[i].image);
  return compute_color_pca(images);
}

/// Each train sample contributes itself plus factor-1 augmented copies, cycling
/// color, rotation, contrast. The test split is carried over untouched.
inline Dataset expand(const Dataset& ds, std::size_t factor, std::uint64_t seed) {
  if (factor < 1) throw ConfigurationError("expand: factor must be >= 1");
  if (factor == 1) return ds;
  const ColorPca pca = train_color_pca(ds);
  constexpr std::array<AugmentKind, 3> kinds{AugmentKind::color, AugmentKind::rotation, AugmentKind::contrast};
  Dataset out;
  out.scale = ds.scale;
  out.samples.reserve(ds.train.size() * factor + ds.test.size());
  for (auto i : ds.train) {
    const Sample& s = ds.samples[i];
    out.train.push_back(out.samples.size());
    out.samples.push_back(s);
    for (std::size_t k = 1; k < factor; ++k) {
      out.train.push_back(out.samples.size());
      out.samples.push_back(augment(s, kinds[(k - 1) % kinds.size()], mix_seed(seed, i, k), pca));
    }
  }
  for (auto i : ds.test) {
    out.test.push_back(out.samples.size());
    out.samples.push_back(ds.samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

/// Uniform random partition into train_count + test_count samples. When the
/// counts do not cover the dataset, the unselected samples are dropped.
inline Dataset split(const Dataset& ds, std::size_t train_count, std::size_t test_count, std::uint64_t seed) {
  if (train_count + test_count > ds.size()) {
    throw ConfigurationError("split: " + std::to_string(train_count) + "+" + std::to_string(test_count) +
                             " samples requested from a dataset of " + std::to_string(ds.size()));
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Dataset out;
  out.scale = ds.scale;
  if (train_count + test_count == ds.size()) {
    out.samples = ds.samples;
    out.train.assign(order.begin(), order.begin() + static_cast<long>(train_count));
    out.test.assign(order.begin() + static_cast<long>(train_count), order.end());
  } else {
    for (std::size_t k = 0; k < train_count + test_count; ++k) {
      (k < train_count ? out.train : out.test).push_back(out.samples.size());
      out.samples.push_back(ds.samples[order[k]]);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

inline Dataset split_fraction(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigurationError("split: train fraction must lie in (0,1)");
  }
  const auto train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ds.size())));
  return split(ds, train, ds.size() - train, seed);
}

// ---------------------------------------------------------------------------
// Dataset index files
//
//   path[,crop=x0;y0;x1;y1],ratings:r1;r2;...
//   path[,crop=x0;y0;x1;y1],dist:p1;p2;...;pc
//
// Paths are relative to the index file. Blank lines and '#' comments are skipped.

inline constexpr double kDistributionDrift = 1e-3;

namespace detail {

inline std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& tok, std::size_t row) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("row " + std::to_string(row) + ": cannot parse number '" + tok + "'");
  }
}

}  // namespace detail

/// Loads images (PPM) and labels listed in an index file. Images are cropped,
/// padded and resized to image_size; image_size 0 keeps the padded native size.
inline Dataset load_csv(const std::filesystem::path& index_path, std::size_t image_size = 0,
                        const ScoreScale& scale = ScoreScale{}) {
  std::ifstream in(index_path);
  if (!in) throw FileError("cannot open dataset index '" + index_path.string() + "'");
  const auto base = index_path.parent_path();
  Dataset ds;
  ds.scale = scale;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto fields = detail::split_on(line, ',');
    if (fields.size() < 2) throw ValidationError("row " + std::to_string(row) + ": expected path and labels");
    Sample s;
    s.source = detail::trim(fields[0]);
    std::optional<std::vector<double>> ratings;
    std::optional<std::vector<double>> degrees;
    for (std::size_t f = 1; f < fields.size(); ++f) {
      const std::string field = detail::trim(fields[f]);
      auto values = [&](std::size_t skip) {
        std::vector<double> v;
        for (const auto& tok : detail::split_on(field.substr(skip), ';'))
          v.push_back(detail::parse_number(detail::trim(tok), row));
        return v;
      };
      if (field.starts_with("crop=")) {
        const auto v = values(5);
        if (v.size() != 4) throw ValidationError("row " + std::to_string(row) + ": crop needs 4 integers");
        for (double c : v)
          if (c < 0 || c != std::floor(c)) throw ValidationError("row " + std::to_string(row) + ": bad crop value");
        s.crop = CropBox{static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]),
                         static_cast<std::size_t>(v[2]), static_cast<std::size_t>(v[3])};
      } else if (field.starts_with("ratings:")) {
        ratings = values(8);
      } else if (field.starts_with("dist:")) {
        degrees = values(5);
      } else {
        throw ValidationError("row " + std::to_string(row) + ": unknown field '" + field + "'");
      }
    }
    if (ratings.has_value() == degrees.has_value()) {
      throw ValidationError("row " + std::to_string(row) + ": exactly one of ratings: or dist: is required");
    }
    Image raw;
    const auto image_path = base / s.source;
    try {
      raw = read_ppm(image_path);
    } catch (const FileError& e) {
      throw FileError("row " + std::to_string(row) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("row " + std::to_string(row) + ": " + e.what());
    }
    Image img;
    try {
      std::size_t target = image_size;
      if (target == 0) {
        const Image cropped = s.crop ? crop(raw, *s.crop) : raw;
        target = std::max(cropped.dim(1), cropped.dim(2));
      }
      img = normalize_image(raw, s.crop, target);
    } catch (const DegenerateInputError& e) {
      throw DegenerateInputError("row " + std::to_string(row) + ": " + e.what());
    } catch (const RangeError& e) {
      throw RangeError("row " + std::to_string(row) + ": " + e.what());
    }
    try {
      Sample built;
      if (ratings) {
        built = make_sample(std::move(img), std::move(*ratings), scale);
      } else {
        if (degrees->size() != scale.size()) {
          throw ValidationError("expected " + std::to_string(scale.size()) + " degrees, got " +
                                std::to_string(degrees->size()));
        }
        built = make_sample(std::move(img), ScoreDistribution::renormalized(std::move(*degrees), kDistributionDrift),
                            scale);
      }
      built.source = s.source;
      built.crop = s.crop;
      ds.samples.push_back(std::move(built));
    } catch (const RangeError& e) {
      throw RangeError("row " + std::to_string(row) + ": " + e.what());
    } catch (const Error& e) {
      throw ValidationError("row " + std::to_string(row) + ": " + e.what());
    }
  }
  ds.reset_split();
  return ds;
}

/// Writes every sample's image as PPM under `image_dir` (relative to the index)
/// and one index row per sample. Ratings are written when present, otherwise
/// the distribution at full precision.
inline void write_csv(const Dataset& ds, const std::filesystem::path& index_path,
                      const std::string& image_dir = "images") {
  const auto base = index_path.parent_path();
  std::filesystem::create_directories(base / image_dir);
  std::ofstream out(index_path, std::ios::trunc);
  if (!out) throw FileError("cannot write dataset index '" + index_path.string() + "'");
  out << std::setprecision(17);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    std::ostringstream name;
    name << image_dir << "/face_" << std::setw(5) << std::setfill('0') << i << ".ppm";
    write_ppm(base / name.str(), s.image);
    out << name.str();
    if (!s.ratings.empty()) {
      out << ",ratings:";
      for (std::size_t k = 0; k < s.ratings.size(); ++k) out << (k ? ";" : "") << s.ratings[k];
    } else {
      out << ",dist:";
      for (std::size_t k = 0; k < s.distribution.size(); ++k) out << (k ? ";" : "") << s.distribution[k];
    }
    out << "\n";
  }
  if (!out) throw FileError("failed writing dataset index '" + index_path.string() + "'");
}

}  // namespace ldl
