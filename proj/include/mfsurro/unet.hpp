#pragma once

// U-Net backbone with swappable fidelity heads.
//
// Backbone: zero-pad 50 -> 64, five encoder blocks (2x2 pooling between
// them, width doubling from base_width), four decoder levels (nearest x2,
// conv-BN-ReLU halving the width, concat with the skip, conv block), crop
// back to 50. Every conv is 3x3 with padding 1; a block is two
// conv-BN-ReLU layers.
//
// LF head: one 3x3 conv to 1 channel (50 x 50 out).
// HF head: nearest x2 twice, a block at head_width, 3x3 conv to 1 channel
// (200 x 200 out).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mfsurro/autodiff.hpp"
#include "mfsurro/checkpoint.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/field.hpp"
#include "mfsurro/tensor.hpp"

namespace mfsurro {

enum class HeadKind { lf, hf };
enum class PoolKind { max, avg };

inline std::string to_string(HeadKind h) { return h == HeadKind::lf ? "lf" : "hf"; }
inline HeadKind head_from_string(const std::string& s) {
  if (s == "lf") return HeadKind::lf;
  if (s == "hf") return HeadKind::hf;
  throw ConfigError("unknown head kind '" + s + "'");
}
inline std::string to_string(PoolKind p) { return p == PoolKind::max ? "max" : "avg"; }
inline PoolKind pool_from_string(const std::string& s) {
  if (s == "max") return PoolKind::max;
  if (s == "avg") return PoolKind::avg;
  throw ConfigError("unknown pooling '" + s + "'");
}

struct UNetConfig {
  static constexpr int kEncoderBlocks = 5;
  static constexpr int kDecoderBlocks = 4;

  int base_width = 32;
  int head_width = 0;     // HF head block width; 0 means base_width / 2
  int input_size = 50;    // LF raster side
  int padded_size = 64;   // must be divisible by 2^4
  PoolKind pool = PoolKind::max;
  double norm_eps = 1e-5;
  double norm_momentum = 0.1;

  int effective_head_width() const { return head_width > 0 ? head_width : std::max(1, base_width / 2); }

  void validate() const {
    if (base_width < 1) throw ConfigError("base_width must be positive");
    if (head_width < 0) throw ConfigError("head_width must be non-negative");
    if (input_size < 1) throw ConfigError("input_size must be positive");
    if (padded_size % 16 != 0)
      throw ConfigError("padded_size " + std::to_string(padded_size) + " is not divisible by 16");
    if (padded_size < input_size) throw ConfigError("padded_size is smaller than input_size");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
    if (!(norm_momentum > 0.0 && norm_momentum <= 1.0)) throw ConfigError("norm_momentum must be in (0, 1]");
  }

  std::map<std::string, std::string> to_meta() const {
    return {{"unet.base_width", std::to_string(base_width)},
            {"unet.head_width", std::to_string(head_width)},
            {"unet.input_size", std::to_string(input_size)},
            {"unet.padded_size", std::to_string(padded_size)},
            {"unet.pool", to_string(pool)},
            {"unet.norm_eps", detail::format_double(norm_eps)},
            {"unet.norm_momentum", detail::format_double(norm_momentum)}};
  }

  static UNetConfig from_meta(const std::map<std::string, std::string>& m) {
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = m.find(k);
      if (it == m.end()) throw FormatError("checkpoint metadata lacks '" + k + "'");
      return it->second;
    };
    UNetConfig c;
    c.base_width = std::stoi(get("unet.base_width"));
    c.head_width = std::stoi(get("unet.head_width"));
    c.input_size = std::stoi(get("unet.input_size"));
    c.padded_size = std::stoi(get("unet.padded_size"));
    c.pool = pool_from_string(get("unet.pool"));
    c.norm_eps = std::stod(get("unet.norm_eps"));
    c.norm_momentum = std::stod(get("unet.norm_momentum"));
    c.validate();
    return c;
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Kaiming normal (fan-in, ReLU gain): std = sqrt(2 / fan_in).
template <class T>
Tensor<T> kaiming_normal(Shape s, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(s.c) * s.h * s.w;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor<T> t(s);
  for (T& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
class Network {
 public:
  Network(const UNetConfig& cfg, HeadKind head, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    const int b = cfg_.base_width;
    int c_in = 1;
    for (int i = 0; i < UNetConfig::kEncoderBlocks; ++i) {
      const int c = b << i;
      enc_.push_back(make_block("backbone.enc" + std::to_string(i), c_in, c, rng));
      c_in = c;
    }
    for (int j = 0; j < UNetConfig::kDecoderBlocks; ++j) {
      const int c = b << (UNetConfig::kDecoderBlocks - 1 - j);  // output width of this level
      Level lvl;
      const std::string name = "backbone.dec" + std::to_string(j);
      lvl.up = make_cbr(name + ".up", 2 * c, c, rng);
      lvl.block = make_block(name, 2 * c, c, rng);
      dec_.push_back(std::move(lvl));
    }
    build_head(head, rng);
  }

  const UNetConfig& config() const { return cfg_; }
  HeadKind head_kind() const { return head_kind_; }

  /// x: (b, 1, input_size, input_size). Returns the head output.
  Var forward(Tape<T>& tape, Var x, NormMode mode) {
    const Shape s = tape.value(x).shape;
    if (s.c != 1 || s.h != cfg_.input_size || s.w != cfg_.input_size)
      throw ShapeError("network input must be (b,1," + std::to_string(cfg_.input_size) + "," +
                       std::to_string(cfg_.input_size) + "), got " + to_string(s));
    if (s.n < 1) throw ShapeError("network input batch is empty");
    const int pad = cfg_.padded_size - cfg_.input_size;
    const int top = pad / 2;
    Var h = pad2d(tape, x, top, pad - top, top, pad - top);
    std::vector<Var> skips;
    for (int i = 0; i < UNetConfig::kEncoderBlocks; ++i) {
      if (i > 0) h = cfg_.pool == PoolKind::max ? maxpool2(tape, h) : avgpool2(tape, h);
      h = run_block(tape, enc_[i], h, mode);
      skips.push_back(h);
    }
    for (int j = 0; j < UNetConfig::kDecoderBlocks; ++j) {
      h = upsample_nearest2(tape, h);
      h = run_cbr(tape, dec_[j].up, h, mode);
      h = concat_channels(tape, skips[UNetConfig::kDecoderBlocks - 1 - j], h);
      h = run_block(tape, dec_[j].block, h, mode);
    }
    h = crop2d(tape, h, top, top, cfg_.input_size, cfg_.input_size);
    if (head_kind_ == HeadKind::hf) {
      h = upsample_nearest2(tape, h);
      h = upsample_nearest2(tape, h);
      h = run_block(tape, *head_block_, h, mode);
    }
    return run_conv(tape, head_out_, h);
  }

  /// Eval-mode forward without gradients.
  Tensor<T> predict(const Tensor<T>& x) {
    Tape<T> tape;
    const Var out = forward(tape, tape.constant(x), NormMode::eval);
    return tape.value(out);
  }

  int output_size() const {
    return head_kind_ == HeadKind::lf ? cfg_.input_size : cfg_.input_size * 4;
  }

  /// Replaces the head with a freshly initialized one; the backbone is untouched.
  void swap_head(HeadKind kind, std::mt19937_64& rng) { build_head(kind, rng); }

  std::vector<Parameter<T>*> backbone_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& b : enc_) collect(b, out);
    for (auto& l : dec_) {
      collect(l.up, out);
      collect(l.block, out);
    }
    return out;
  }

  std::vector<Parameter<T>*> head_parameters() {
    std::vector<Parameter<T>*> out;
    if (head_block_) collect(*head_block_, out);
    out.push_back(&head_out_.w);
    out.push_back(&head_out_.b);
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    auto out = backbone_parameters();
    for (auto* p : head_parameters()) out.push_back(p);
    return out;
  }

  std::vector<BatchNormState<T>*> norm_states(bool backbone_only = false) {
    std::vector<BatchNormState<T>*> out;
    auto add = [&](Block& b) {
      out.push_back(&b.a.bn);
      out.push_back(&b.b.bn);
    };
    for (auto& b : enc_) add(b);
    for (auto& l : dec_) {
      out.push_back(&l.up.bn);
      add(l.block);
    }
    if (!backbone_only && head_block_) add(*head_block_);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  void reset_norm_stats() {
    for (auto* s : norm_states()) s->reset();
  }

  std::size_t parameter_count(bool backbone_only = false) {
    std::size_t n = 0;
    for (auto* p : backbone_only ? backbone_parameters() : parameters()) n += p->value.size();
    return n;
  }

  /// Parameters and normalization statistics as named f32 arrays.
  std::vector<NamedArray> state_arrays(bool backbone_only = false) {
    std::vector<NamedArray> out;
    for (auto* p : backbone_only ? backbone_parameters() : parameters())
      out.push_back({p->name, p->value.template cast<float>()});
    auto stats = norm_states(backbone_only);
    auto names = norm_names(backbone_only);
    for (std::size_t i = 0; i < stats.size(); ++i) {
      const int c = static_cast<int>(stats[i]->running_mean.size());
      Tensor<float> m({1, c, 1, 1}), v({1, c, 1, 1});
      for (int k = 0; k < c; ++k) {
        m.data[k] = static_cast<float>(stats[i]->running_mean[k]);
        v.data[k] = static_cast<float>(stats[i]->running_var[k]);
      }
      out.push_back({names[i] + ".running_mean", std::move(m)});
      out.push_back({names[i] + ".running_var", std::move(v)});
    }
    return out;
  }

  /// CRC32 over the backbone parameters and statistics.
  std::uint32_t backbone_hash() { return arrays_hash(state_arrays(true)); }

  Checkpoint to_checkpoint(std::map<std::string, std::string> extra = {}) {
    Checkpoint ck;
    ck.meta = cfg_.to_meta();
    ck.meta["head"] = to_string(head_kind_);
    for (auto& [k, v] : extra) ck.meta[k] = v;
    ck.arrays = state_arrays();
    return ck;
  }

  /// Rebuilds a network from a checkpoint; every array must be present.
  static Network from_checkpoint(const Checkpoint& ck) {
    const UNetConfig cfg = UNetConfig::from_meta(ck.meta);
    auto it = ck.meta.find("head");
    if (it == ck.meta.end()) throw FormatError("checkpoint metadata lacks 'head'");
    std::mt19937_64 rng(0);
    Network net(cfg, head_from_string(it->second), rng);
    net.load_arrays(ck, false);
    return net;
  }

  /// Copies matching arrays from `ck`. With backbone_only the head is left
  /// as is and head arrays in `ck` are ignored.
  void load_arrays(const Checkpoint& ck, bool backbone_only) {
    auto fetch = [&](const std::string& name, Shape s) -> const Tensor<float>& {
      const NamedArray* a = ck.find(name);
      if (!a) throw FormatError("checkpoint lacks array '" + name + "'");
      if (!(a->value.shape == s))
        throw ShapeError("checkpoint array '" + name + "' has shape " + to_string(a->value.shape) +
                         ", expected " + to_string(s));
      return a->value;
    };
    for (auto* p : backbone_only ? backbone_parameters() : parameters())
      p->value = fetch(p->name, p->value.shape).template cast<T>();
    auto stats = norm_states(backbone_only);
    auto names = norm_names(backbone_only);
    for (std::size_t i = 0; i < stats.size(); ++i) {
      const int c = static_cast<int>(stats[i]->running_mean.size());
      const auto& m = fetch(names[i] + ".running_mean", {1, c, 1, 1});
      const auto& v = fetch(names[i] + ".running_var", {1, c, 1, 1});
      for (int k = 0; k < c; ++k) {
        stats[i]->running_mean[k] = static_cast<T>(m.data[k]);
        stats[i]->running_var[k] = static_cast<T>(v.data[k]);
      }
    }
  }

 private:
  struct Conv {
    Parameter<T> w, b;
  };
  struct ConvBNRelu {
    std::string name;
    Parameter<T> w, gamma, beta;
    BatchNormState<T> bn;
    Tensor<T> zero_bias;  // conv bias is redundant before batchnorm
  };
  struct Block {
    ConvBNRelu a, b;
  };
  struct Level {
    ConvBNRelu up;
    Block block;
  };

  static Conv make_conv(const std::string& name, int cin, int cout, std::mt19937_64& rng) {
    return {Parameter<T>(name + ".w", kaiming_normal<T>({cout, cin, 3, 3}, rng)),
            Parameter<T>(name + ".b", Tensor<T>({1, cout, 1, 1}))};
  }

  static ConvBNRelu make_cbr(const std::string& name, int cin, int cout, std::mt19937_64& rng) {
    ConvBNRelu l;
    l.name = name;
    l.w = Parameter<T>(name + ".w", kaiming_normal<T>({cout, cin, 3, 3}, rng));
    l.gamma = Parameter<T>(name + ".gamma", Tensor<T>({1, cout, 1, 1}, T(1)));
    l.beta = Parameter<T>(name + ".beta", Tensor<T>({1, cout, 1, 1}));
    l.bn = BatchNormState<T>(cout);
    l.zero_bias = Tensor<T>({1, cout, 1, 1});
    return l;
  }

  static Block make_block(const std::string& name, int cin, int cout, std::mt19937_64& rng) {
    Block b;
    b.a = make_cbr(name + ".conv0", cin, cout, rng);
    b.b = make_cbr(name + ".conv1", cout, cout, rng);
    return b;
  }

  void build_head(HeadKind kind, std::mt19937_64& rng) {
    head_kind_ = kind;
    const int b = cfg_.base_width;
    if (kind == HeadKind::hf) {
      const int hw = cfg_.effective_head_width();
      head_block_ = make_block("head.hf.block", b, hw, rng);
      head_out_ = make_conv("head.hf.out", hw, 1, rng);
    } else {
      head_block_.reset();
      head_out_ = make_conv("head.lf.out", b, 1, rng);
    }
  }

  Var run_conv(Tape<T>& tape, Conv& c, Var x) {
    return conv2d(tape, x, tape.param(c.w), tape.param(c.b), 1, 1);
  }

  Var run_cbr(Tape<T>& tape, ConvBNRelu& l, Var x, NormMode mode) {
    Var h = conv2d(tape, x, tape.param(l.w), tape.constant(l.zero_bias), 1, 1);
    h = batchnorm2d(tape, h, tape.param(l.gamma), tape.param(l.beta), l.bn, mode, cfg_.norm_eps,
                    cfg_.norm_momentum);
    return relu(tape, h);
  }

  Var run_block(Tape<T>& tape, Block& b, Var x, NormMode mode) {
    return run_cbr(tape, b.b, run_cbr(tape, b.a, x, mode), mode);
  }

  static void collect(ConvBNRelu& l, std::vector<Parameter<T>*>& out) {
    out.push_back(&l.w);
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  static void collect(Block& b, std::vector<Parameter<T>*>& out) {
    collect(b.a, out);
    collect(b.b, out);
  }

  std::vector<std::string> norm_names(bool backbone_only) {
    std::vector<std::string> out;
    auto add = [&](Block& b) {
      out.push_back(b.a.name);
      out.push_back(b.b.name);
    };
    for (auto& b : enc_) add(b);
    for (auto& l : dec_) {
      out.push_back(l.up.name);
      add(l.block);
    }
    if (!backbone_only && head_block_) add(*head_block_);
    return out;
  }

  UNetConfig cfg_;
  HeadKind head_kind_ = HeadKind::lf;
  std::vector<Block> enc_;
  std::vector<Level> dec_;
  std::optional<Block> head_block_;
  Conv head_out_;
};

}  // namespace mfsurro
