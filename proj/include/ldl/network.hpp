#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ldl/autodiff.hpp"
#include "ldl/error.hpp"

namespace ldl {

enum class BlockKind { basic, bottleneck };

/// distribution: fc(c) followed by softmax. scalar: fc(1) regressing the mean score directly.
enum class HeadKind { distribution, scalar };

inline std::string to_string(BlockKind k) { return k == BlockKind::basic ? "basic" : "bottleneck"; }
inline std::string to_string(HeadKind k) { return k == HeadKind::distribution ? "distribution" : "scalar"; }

/// Architecture description. Stage i holds block_counts[i] + 1 residual blocks:
/// one leading (possibly downsampling) block plus block_counts[i] repeats.
struct NetworkSpec {
  std::array<std::size_t, 4> block_counts{1, 1, 1, 1};
  std::array<std::size_t, 4> stage_widths{8, 16, 32, 64};
  BlockKind block_kind = BlockKind::basic;
  bool skip_connections = true;
  std::size_t input_size = 32;
  std::size_t num_labels = 5;
  HeadKind head = HeadKind::distribution;
  std::size_t stem_width = 8;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 1;
  std::size_t pool_window = 2;
  std::size_t pool_stride = 2;

  /// 32x32 basic-block network used for all desk-scale experiments.
  static NetworkSpec desk_default() { return NetworkSpec{}; }

  static NetworkSpec resnet(std::array<std::size_t, 4> counts) {
    NetworkSpec s;
    s.block_counts = counts;
    s.stage_widths = {256, 512, 1024, 2048};
    s.block_kind = BlockKind::bottleneck;
    s.input_size = 224;
    s.stem_width = 64;
    s.stem_kernel = 7;
    s.stem_stride = 2;
    s.pool_window = 3;
    s.pool_stride = 2;
    return s;
  }
  /// 50-layer configuration {2,3,5,2}.
  static NetworkSpec resnet50() { return resnet({2, 3, 5, 2}); }
  /// 101-layer configuration {2,3,22,2}.
  static NetworkSpec resnet101() { return resnet({2, 3, 22, 2}); }

  std::size_t stem_pad() const { return stem_kernel / 2; }
  std::size_t output_size() const { return head == HeadKind::distribution ? num_labels : 1; }

  std::size_t stem_output_size() const {
    const std::size_t padded = input_size + 2 * stem_pad();
    return padded < stem_kernel ? 0 : (padded - stem_kernel) / stem_stride + 1;
  }

  /// Spatial size entering each stage.
  std::array<std::size_t, 4> stage_input_sizes() const {
    std::array<std::size_t, 4> sizes{};
    const std::size_t stem = stem_output_size();
    std::size_t s = stem < pool_window ? 0 : (stem - pool_window) / pool_stride + 1;
    for (std::size_t i = 0; i < 4; ++i) {
      sizes[i] = s;
      if (i < 3) s = s == 0 ? 0 : (s - 1) / 2 + 1;
    }
    return sizes;
  }

  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      if (block_counts[i] < 1) throw ConfigurationError("block count of stage " + std::to_string(i + 1) + " must be >= 1");
      if (stage_widths[i] < 1) throw ConfigurationError("width of stage " + std::to_string(i + 1) + " must be >= 1");
      if (block_kind == BlockKind::bottleneck && stage_widths[i] < 4) {
        throw ConfigurationError("bottleneck stage " + std::to_string(i + 1) + " needs width >= 4");
      }
    }
    if (stem_width < 1 || stem_kernel < 1 || stem_stride < 1 || pool_window < 1 || pool_stride < 1) {
      throw ConfigurationError("stem parameters must be positive");
    }
    if (num_labels < 2) throw ConfigurationError("num_labels must be >= 2");
    if (input_size < 1) throw ConfigurationError("input_size must be positive");
    if (stem_output_size() == 0) {
      throw ConfigurationError("spatial collapse at stem: input " + std::to_string(input_size) +
                               " is smaller than the stem kernel");
    }
    if (stem_output_size() < pool_window) {
      throw ConfigurationError("spatial collapse at max-pool: stem output " + std::to_string(stem_output_size()) +
                               " is smaller than the pooling window " + std::to_string(pool_window));
    }
    const auto sizes = stage_input_sizes();
    for (std::size_t i = 0; i < 4; ++i) {
      if (sizes[i] == 0) throw ConfigurationError("spatial collapse at stage " + std::to_string(i + 1));
    }
  }

  /// Text encoding, one key=value per line.
  std::string encode() const {
    std::ostringstream os;
    auto join = [](const std::array<std::size_t, 4>& a) {
      return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," +
             std::to_string(a[3]);
    };
    os << "block_counts=" << join(block_counts) << "\n"
       << "stage_widths=" << join(stage_widths) << "\n"
       << "block_kind=" << to_string(block_kind) << "\n"
       << "skip_connections=" << (skip_connections ? 1 : 0) << "\n"
       << "input_size=" << input_size << "\n"
       << "num_labels=" << num_labels << "\n"
       << "head=" << to_string(head) << "\n"
       << "stem_width=" << stem_width << "\n"
       << "stem_kernel=" << stem_kernel << "\n"
       << "stem_stride=" << stem_stride << "\n"
       << "pool_window=" << pool_window << "\n"
       << "pool_stride=" << pool_stride << "\n";
    return os.str();
  }

  static NetworkSpec decode(const std::string& text) {
    NetworkSpec s;
    std::istringstream is(text);
    std::string line;
    auto number = [](const std::string& key, const std::string& v) -> std::size_t {
      try {
        std::size_t pos = 0;
        const auto n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::size_t>(n);
      } catch (const std::exception&) {
        throw FormatError("network spec: bad value '" + v + "' for " + key);
      }
    };
    auto quad = [&](const std::string& key, const std::string& v) {
      std::array<std::size_t, 4> a{};
      std::istringstream vs(v);
      std::string item;
      std::size_t i = 0;
      while (std::getline(vs, item, ',')) {
        if (i >= 4) throw FormatError("network spec: " + key + " needs 4 values");
        a[i++] = number(key, item);
      }
      if (i != 4) throw FormatError("network spec: " + key + " needs 4 values");
      return a;
    };
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("network spec: malformed line '" + line + "'");
      const std::string key = line.substr(0, eq), v = line.substr(eq + 1);
      if (key == "block_counts") s.block_counts = quad(key, v);
      else if (key == "stage_widths") s.stage_widths = quad(key, v);
      else if (key == "block_kind") {
        if (v == "basic") s.block_kind = BlockKind::basic;
        else if (v == "bottleneck") s.block_kind = BlockKind::bottleneck;
        else throw FormatError("network spec: unknown block kind '" + v + "'");
      } else if (key == "skip_connections") s.skip_connections = number(key, v) != 0;
      else if (key == "input_size") s.input_size = number(key, v);
      else if (key == "num_labels") s.num_labels = number(key, v);
      else if (key == "head") {
        if (v == "distribution") s.head = HeadKind::distribution;
        else if (v == "scalar") s.head = HeadKind::scalar;
        else throw FormatError("network spec: unknown head '" + v + "'");
      } else if (key == "stem_width") s.stem_width = number(key, v);
      else if (key == "stem_kernel") s.stem_kernel = number(key, v);
      else if (key == "stem_stride") s.stem_stride = number(key, v);
      else if (key == "pool_window") s.pool_window = number(key, v);
      else if (key == "pool_stride") s.pool_stride = number(key, v);
      else throw FormatError("network spec: unknown key '" + key + "'");
    }
    return s;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct NetworkOutput {
  Var logits;
  /// softmax(logits); invalid for a scalar head.
  Var distribution;
  /// Post-average-pool representation feeding the final dense layer.
  Var features;
};

/// Residual (or plain) convolutional network: stem conv, BN, ReLU, max-pool,
/// four block groups, global average pool, dense head.
template <typename T>
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    allocate();
  }

  const NetworkSpec& spec() const { return spec_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

  Graph<T> graph() { return Graph<T>(&params_); }

  std::size_t blocks_in_stage(std::size_t stage) const { return spec_.block_counts.at(stage) + 1; }

  /// Number of weighted layers on the main path: every convolution outside
  /// projection shortcuts, plus the dense head.
  std::size_t weighted_layer_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto role = params_[i].role;
      if (role == ParamRole::conv_weight || role == ParamRole::dense_weight) ++n;
    }
    return n;
  }

  std::size_t feature_size() const { return spec_.stage_widths[3]; }

  /// He-normal conv/dense weights, zero biases, unit BN scale, zero BN shift,
  /// running statistics reset to (0, 1).
  void init_weights(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      switch (p.role) {
        case ParamRole::conv_weight:
        case ParamRole::shortcut_weight:
        case ParamRole::dense_weight: {
          const auto& s = p.value.shape();
          const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
          std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
          for (auto& v : p.value.data()) v = static_cast<T>(dist(rng));
          break;
        }
        case ParamRole::bn_gamma: p.value.fill(T{1}); break;
        default: p.value.fill(T{0}); break;
      }
      p.grad.fill(T{0});
    }
    for (std::size_t i = 0; i < params_.buffer_count(); ++i) {
      auto& b = params_.buffer_at(i);
      b.value.fill(b.name.ends_with("running_var") ? T{1} : T{0});
    }
  }

  /// Runs the network on batch[N,3,S,S]. The graph must be bound to parameters().
  NetworkOutput forward(Graph<T>& g, const Tensor<T>& batch, Mode mode) {
    if (&g.store() != &params_) throw ConfigurationError("graph is not bound to this network's parameters");
    const auto& s = batch.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != spec_.input_size || s[3] != spec_.input_size) {
      throw DimensionError("network expects input [N,3," + std::to_string(spec_.input_size) + "," +
                           std::to_string(spec_.input_size) + "], got " + shape_string(s));
    }
    Var h = g.constant(batch, "input");
    h = ad::conv2d(g, h, g.param("stem.conv.weight"), spec_.stem_stride, spec_.stem_pad());
    h = bn(g, h, "stem.bn", mode);
    h = ad::relu(g, h);
    h = ad::pool(g, h, ad::PoolMode::max, spec_.pool_window, spec_.pool_stride);
    for (std::size_t stage = 0; stage < 4; ++stage)
      for (std::size_t block = 0; block < blocks_in_stage(stage); ++block) h = forward_block(g, h, stage, block, mode);
    const auto& hs = g.value(h).shape();
    h = ad::pool(g, h, ad::PoolMode::avg, hs[2], 1);
    NetworkOutput out;
    out.features = ad::reshape(g, h, {hs[0], hs[1]});
    out.logits = ad::dense(g, out.features, g.param("fc.weight"), g.param("fc.bias"));
    if (spec_.head == HeadKind::distribution) out.distribution = ad::softmax(g, out.logits);
    return out;
  }

  /// One residual block. Output = relu(branch(x) + shortcut(x)), or relu(branch(x)) without skips.
  Var forward_block(Graph<T>& g, Var x, std::size_t stage, std::size_t block, Mode mode) {
    const std::string name = block_name(stage, block);
    const std::size_t stride = block_stride(stage, block);
    Var h = x;
    if (spec_.block_kind == BlockKind::basic) {
      h = ad::conv2d(g, h, g.param(name + ".conv1.weight"), stride, 1);
      h = ad::relu(g, bn(g, h, name + ".bn1", mode));
      h = ad::conv2d(g, h, g.param(name + ".conv2.weight"), 1, 1);
      h = bn(g, h, name + ".bn2", mode);
    } else {
      h = ad::conv2d(g, h, g.param(name + ".conv1.weight"), 1, 0);
      h = ad::relu(g, bn(g, h, name + ".bn1", mode));
      h = ad::conv2d(g, h, g.param(name + ".conv2.weight"), stride, 1);
      h = ad::relu(g, bn(g, h, name + ".bn2", mode));
      h = ad::conv2d(g, h, g.param(name + ".conv3.weight"), 1, 0);
      h = bn(g, h, name + ".bn3", mode);
    }
    if (spec_.skip_connections) {
      Var shortcut = x;
      if (has_projection(stage, block)) {
        shortcut = ad::conv2d(g, x, g.param(name + ".shortcut.conv.weight"), stride, 0);
        shortcut = bn(g, shortcut, name + ".shortcut.bn", mode);
      }
      h = ad::add(g, h, shortcut);
    }
    return ad::relu(g, h);
  }

  static std::string block_name(std::size_t stage, std::size_t block) {
    return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block + 1);
  }

  std::size_t block_stride(std::size_t stage, std::size_t block) const { return stage > 0 && block == 0 ? 2 : 1; }

  std::size_t block_input_width(std::size_t stage, std::size_t block) const {
    if (block > 0) return spec_.stage_widths[stage];
    return stage == 0 ? spec_.stem_width : spec_.stage_widths[stage - 1];
  }

  bool has_projection(std::size_t stage, std::size_t block) const {
    return spec_.skip_connections &&
           (block_stride(stage, block) != 1 || block_input_width(stage, block) != spec_.stage_widths[stage]);
  }

 private:
  Var bn(Graph<T>& g, Var x, const std::string& prefix, Mode mode) {
    return ad::batch_norm(g, x, g.param(prefix + ".gamma"), g.param(prefix + ".beta"),
                          params_.buffer(prefix + ".running_mean"), params_.buffer(prefix + ".running_var"), mode);
  }

  void add_conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, ParamRole role) {
    params_.add(name, Tensor<T>({out, in, k, k}), role);
  }

  void add_bn(const std::string& prefix, std::size_t channels) {
    params_.add(prefix + ".gamma", Tensor<T>({channels}, T{1}), ParamRole::bn_gamma);
    params_.add(prefix + ".beta", Tensor<T>({channels}), ParamRole::bn_beta);
    params_.add_buffer(prefix + ".running_mean", Tensor<T>({channels}));
    params_.add_buffer(prefix + ".running_var", Tensor<T>({channels}, T{1}));
  }

  void allocate() {
    add_conv("stem.conv.weight", spec_.stem_width, 3, spec_.stem_kernel, ParamRole::conv_weight);
    add_bn("stem.bn", spec_.stem_width);
    for (std::size_t stage = 0; stage < 4; ++stage) {
      const std::size_t out = spec_.stage_widths[stage];
      for (std::size_t block = 0; block < blocks_in_stage(stage); ++block) {
        const std::string name = block_name(stage, block);
        const std::size_t in = block_input_width(stage, block);
        if (spec_.block_kind == BlockKind::basic) {
          add_conv(name + ".conv1.weight", out, in, 3, ParamRole::conv_weight);
          add_bn(name + ".bn1", out);
          add_conv(name + ".conv2.weight", out, out, 3, ParamRole::conv_weight);
          add_bn(name + ".bn2", out);
        } else {
          const std::size_t inner = out / 4;
          add_conv(name + ".conv1.weight", inner, in, 1, ParamRole::conv_weight);
          add_bn(name + ".bn1", inner);
          add_conv(name + ".conv2.weight", inner, inner, 3, ParamRole::conv_weight);
          add_bn(name + ".bn2", inner);
          add_conv(name + ".conv3.weight", out, inner, 1, ParamRole::conv_weight);
          add_bn(name + ".bn3", out);
        }
        if (has_projection(stage, block)) {
          add_conv(name + ".shortcut.conv.weight", out, in, 1, ParamRole::shortcut_weight);
          add_bn(name + ".shortcut.bn", out);
        }
      }
    }
    params_.add("fc.weight", Tensor<T>({feature_size(), spec_.output_size()}), ParamRole::dense_weight);
    params_.add("fc.bias", Tensor<T>({spec_.output_size()}), ParamRole::dense_bias);
  }

  NetworkSpec spec_;
  ParameterStore<T> params_;
};

}  // namespace ldl
