#pragma once

// Compact U-Net: `depth` encoder stages of [conv3x3+ReLU, conv3x3+ReLU,
// dropout, maxpool2], a bottleneck block, mirrored decoder stages of
// [nearest-upsample x2, conv3x3, concat skip, conv3x3+ReLU, dropout] and a
// final 1x1 classifier. Backpropagation is written out by hand.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/parallel.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/core/rng.hpp"

namespace fieldshift {

enum class DropoutKind { Standard, Spatial };

/// Which blocks carry a dropout layer.
enum class DropoutPlacement { AllBlocks, EncoderOnly, DecoderOnly, BottleneckOnly };

inline std::string to_string(DropoutKind k) { return k == DropoutKind::Spatial ? "spatial" : "standard"; }

inline DropoutKind parse_dropout_kind(const std::string& s) {
  if (s == "spatial") return DropoutKind::Spatial;
  if (s == "standard") return DropoutKind::Standard;
  throw ConfigError("unknown dropout kind '" + s + "'");
}

inline std::string to_string(DropoutPlacement p) {
  switch (p) {
    case DropoutPlacement::AllBlocks: return "all";
    case DropoutPlacement::EncoderOnly: return "encoder";
    case DropoutPlacement::DecoderOnly: return "decoder";
    case DropoutPlacement::BottleneckOnly: return "bottleneck";
  }
  return "?";
}

inline DropoutPlacement parse_dropout_placement(const std::string& s) {
  if (s == "all") return DropoutPlacement::AllBlocks;
  if (s == "encoder") return DropoutPlacement::EncoderOnly;
  if (s == "decoder") return DropoutPlacement::DecoderOnly;
  if (s == "bottleneck") return DropoutPlacement::BottleneckOnly;
  throw ConfigError("unknown dropout placement '" + s + "'");
}

struct ArchSpec {
  int depth = 3;
  int base_width = 8;
  int in_bands = 4;
  int classes = 3;
  double dropout_rate_train = 0.15;
  DropoutKind dropout_kind = DropoutKind::Spatial;
  DropoutPlacement dropout_placement = DropoutPlacement::AllBlocks;

  int downsample_factor() const noexcept { return 1 << depth; }
  /// Channels at encoder stage s; s == depth is the bottleneck.
  int width(int stage) const noexcept { return base_width << stage; }

  bool operator==(const ArchSpec&) const = default;
};

inline void validate(const ArchSpec& a) {
  if (a.depth < 1 || a.depth > 8) throw ConfigError("arch.depth must lie in [1,8]");
  if (a.base_width < 1) throw ConfigError("arch.base_width must be positive");
  if (a.in_bands < 1 || a.classes < 2) throw ConfigError("arch needs in_bands >= 1 and classes >= 2");
  if (!(a.dropout_rate_train >= 0.0 && a.dropout_rate_train < 1.0)) throw ConfigError("arch.dropout_rate_train must lie in [0,1)");
}

/// Shape of one convolution in declared parameter order.
struct LayerShape {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;

  std::size_t weight_count() const noexcept {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
  std::size_t bias_count() const noexcept { return static_cast<std::size_t>(out_channels); }
};

/// Layer order: enc{s}.conv1, enc{s}.conv2 for s = 0..depth-1,
/// bottleneck.conv1, bottleneck.conv2, then dec{s}.up, dec{s}.conv for
/// s = depth-1..0, and the 1x1 head.
inline std::vector<LayerShape> layer_table(const ArchSpec& a) {
  std::vector<LayerShape> t;
  std::size_t offset = 0;
  auto add = [&](std::string name, int cin, int cout, int k) {
    LayerShape l{std::move(name), cin, cout, k, 0, 0};
    l.weight_offset = offset;
    offset += l.weight_count();
    l.bias_offset = offset;
    offset += l.bias_count();
    t.push_back(std::move(l));
  };
  int cin = a.in_bands;
  for (int s = 0; s < a.depth; ++s) {
    add("enc" + std::to_string(s) + ".conv1", cin, a.width(s), 3);
    add("enc" + std::to_string(s) + ".conv2", a.width(s), a.width(s), 3);
    cin = a.width(s);
  }
  add("bottleneck.conv1", cin, a.width(a.depth), 3);
  add("bottleneck.conv2", a.width(a.depth), a.width(a.depth), 3);
  for (int s = a.depth - 1; s >= 0; --s) {
    add("dec" + std::to_string(s) + ".up", a.width(s + 1), a.width(s), 3);
    add("dec" + std::to_string(s) + ".conv", 2 * a.width(s), a.width(s), 3);
  }
  add("head", a.width(0), a.classes, 1);
  return t;
}

inline std::size_t parameter_count(const ArchSpec& a) {
  const auto t = layer_table(a);
  return t.back().bias_offset + t.back().bias_count();
}

template <typename T>
struct NetworkParams {
  ArchSpec arch;
  std::vector<LayerShape> layers;
  std::vector<T> values;  // weights then bias of each layer, in layer order

  std::span<T> weight(std::size_t l) { return {values.data() + layers[l].weight_offset, layers[l].weight_count()}; }
  std::span<const T> weight(std::size_t l) const {
    return {values.data() + layers[l].weight_offset, layers[l].weight_count()};
  }
  std::span<T> bias(std::size_t l) { return {values.data() + layers[l].bias_offset, layers[l].bias_count()}; }
  std::span<const T> bias(std::size_t l) const { return {values.data() + layers[l].bias_offset, layers[l].bias_count()}; }

  /// Layer name owning a flat parameter index.
  std::string locate(std::size_t index) const {
    for (const auto& l : layers)
      if (index >= l.weight_offset && index < l.bias_offset + l.bias_count())
        return l.name + (index < l.bias_offset ? ".weight" : ".bias");
    return "?";
  }

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out{arch, layers, {}};
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

/// He-style initialization: N(0, 2/fan_in) kernels, zero biases.
template <typename T = float>
NetworkParams<T> init_params(const ArchSpec& arch, std::uint64_t seed) {
  validate(arch);
  NetworkParams<T> p{arch, layer_table(arch), {}};
  p.values.assign(parameter_count(arch), T{0});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& shape = p.layers[l];
    const double fan_in = static_cast<double>(shape.in_channels) * shape.kernel * shape.kernel;
    Rng rng = make_rng(seed, {stream_tag("init"), l});
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
    for (T& w : p.weight(l)) w = static_cast<T>(nd(rng));
  }
  return p;
}

enum class ForwardMode { Train, Eval, MonteCarlo };

template <typename T>
using TensorBatch = std::vector<Tensor<T>>;

namespace nn {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 3x3 same-padding patch matrix: row (c*9 + ky*3 + kx), column y*W + x.
template <typename T>
void im2col3(const T* in, int C, int H, int W, T* col) {
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    const T* plane = in + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          T* dst = row + static_cast<std::size_t>(y) * W;
          if (sy < 0 || sy >= H) {
            std::fill(dst, dst + W, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int x = 0; x < x0; ++x) dst[x] = T{0};
          for (int x = x0; x < x1; ++x) dst[x] = src[x + dx];
          for (int x = x1; x < W; ++x) dst[x] = T{0};
        }
      }
    }
  }
}

/// Adjoint of im2col3: scatters patch gradients back onto the input.
template <typename T>
void col2im3(const T* col, int C, int H, int W, T* out) {
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  std::fill(out, out + C * hw, T{0});
  for (int c = 0; c < C; ++c) {
    T* plane = out + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          const T* src = row + static_cast<std::size_t>(y) * W;
          T* dst = plane + static_cast<std::size_t>(sy) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& in, const LayerShape& shape, std::span<const T> w, std::span<const T> b,
                       std::vector<T>& col) {
  const int H = in.height, W = in.width;
  const Eigen::Index hw = static_cast<Eigen::Index>(H) * W;
  Tensor<T> out(shape.out_channels, H, W);
  Eigen::Map<MatR<T>> om(out.data.data(), shape.out_channels, hw);
  if (shape.kernel == 1) {
    Eigen::Map<const MatR<T>> wm(w.data(), shape.out_channels, shape.in_channels);
    Eigen::Map<const MatR<T>> im(in.data.data(), shape.in_channels, hw);
    om.noalias() = wm * im;
  } else {
    col.resize(static_cast<std::size_t>(shape.in_channels) * 9 * hw);
    im2col3(in.data.data(), shape.in_channels, H, W, col.data());
    Eigen::Map<const MatR<T>> wm(w.data(), shape.out_channels, shape.in_channels * 9);
    Eigen::Map<const MatR<T>> cm(col.data(), shape.in_channels * 9, hw);
    om.noalias() = wm * cm;
  }
  for (int c = 0; c < shape.out_channels; ++c) om.row(c).array() += b[c];
  return out;
}

/// Writes dW and db (assigned, not accumulated) and optionally the input gradient.
template <typename T>
void conv_backward(const Tensor<T>& in, const LayerShape& shape, std::span<const T> w, const Tensor<T>& dout,
                   std::span<T> dw, std::span<T> db, Tensor<T>* din, std::vector<T>& col, std::vector<T>& dcol) {
  const int H = in.height, W = in.width;
  const Eigen::Index hw = static_cast<Eigen::Index>(H) * W;
  Eigen::Map<const MatR<T>> dm(dout.data.data(), shape.out_channels, hw);
  const int patch = shape.in_channels * shape.kernel * shape.kernel;
  Eigen::Map<MatR<T>> dwm(dw.data(), shape.out_channels, patch);
  Eigen::Map<const MatR<T>> wm(w.data(), shape.out_channels, patch);
  for (int c = 0; c < shape.out_channels; ++c) {
    const T* row = dout.data.data() + static_cast<std::size_t>(c) * hw;
    T acc = 0;
    for (Eigen::Index i = 0; i < hw; ++i) acc += row[i];
    db[c] = acc;
  }
  if (shape.kernel == 1) {
    Eigen::Map<const MatR<T>> im(in.data.data(), shape.in_channels, hw);
    dwm.noalias() = dm * im.transpose();
    if (din) {
      *din = Tensor<T>(shape.in_channels, H, W);
      Eigen::Map<MatR<T>> dim(din->data.data(), shape.in_channels, hw);
      dim.noalias() = wm.transpose() * dm;
    }
    return;
  }
  col.resize(static_cast<std::size_t>(patch) * hw);
  im2col3(in.data.data(), shape.in_channels, H, W, col.data());
  Eigen::Map<const MatR<T>> cm(col.data(), patch, hw);
  dwm.noalias() = dm * cm.transpose();
  if (din) {
    dcol.resize(static_cast<std::size_t>(patch) * hw);
    Eigen::Map<MatR<T>> dcm(dcol.data(), patch, hw);
    dcm.noalias() = wm.transpose() * dm;
    *din = Tensor<T>(shape.in_channels, H, W);
    col2im3(dcol.data(), shape.in_channels, H, W, din->data.data());
  }
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (T& v : t.data) v = v > T{0} ? v : T{0};
}

/// grad *= (activation > 0)
template <typename T>
void relu_backward(const Tensor<T>& activation, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (!(activation.data[i] > T{0})) grad.data[i] = T{0};
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& in, std::vector<std::uint32_t>& argmax) {
  const int H = in.height / 2, W = in.width / 2;
  Tensor<T> out(in.channels, H, W);
  argmax.resize(out.size());
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * y) * in.width + 2 * x);
        T bv = in(c, 2 * y, 2 * x);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const T v = in(c, 2 * y + dy, 2 * x + dx);
            if (v > bv) {
              bv = v;
              best = static_cast<std::uint32_t>((2 * y + dy) * in.width + 2 * x + dx);
            }
          }
        out(c, y, x) = bv;
        argmax[out.plane() * c + static_cast<std::size_t>(y) * W + x] = best;
      }
    }
  }
  return out;
}

template <typename T>
void maxpool2_backward(const Tensor<T>& dout, const std::vector<std::uint32_t>& argmax, Tensor<T>& din) {
  for (int c = 0; c < dout.channels; ++c) {
    auto plane = din.channel(c);
    auto g = dout.channel(c);
    for (std::size_t i = 0; i < g.size(); ++i) plane[argmax[dout.plane() * c + i]] += g[i];
  }
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& in) {
  Tensor<T> out(in.channels, in.height * 2, in.width * 2);
  for (int c = 0; c < in.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) out(c, y, x) = in(c, y / 2, x / 2);
  return out;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dout) {
  Tensor<T> din(dout.channels, dout.height / 2, dout.width / 2);
  for (int c = 0; c < dout.channels; ++c)
    for (int y = 0; y < dout.height; ++y)
      for (int x = 0; x < dout.width; ++x) din(c, y / 2, x / 2) += dout(c, y, x);
  return din;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.channels + b.channels, a.height, a.width);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

/// Inverted-dropout mask: one entry per channel (spatial) or per element
/// (standard); entries are 0 or 1/(1-rate).
template <typename T>
std::vector<T> draw_dropout_mask(const Tensor<T>& t, DropoutKind kind, double rate, Rng& rng) {
  const std::size_t n = kind == DropoutKind::Spatial ? static_cast<std::size_t>(t.channels) : t.size();
  std::vector<T> mask(n);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (T& m : mask) m = uniform01(rng) < rate ? T{0} : keep;
  return mask;
}

template <typename T>
void apply_mask(Tensor<T>& t, const std::vector<T>& mask, DropoutKind kind) {
  if (mask.empty()) return;
  if (kind == DropoutKind::Spatial) {
    for (int c = 0; c < t.channels; ++c)
      for (T& v : t.channel(c)) v *= mask[c];
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] *= mask[i];
  }
}

}  // namespace nn

/// Activations kept by a training-mode forward pass for one sample.
template <typename T>
struct SampleCache {
  std::vector<Tensor<T>> enc_in, enc_a1, enc_a2, enc_out;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  Tensor<T> bott_in, bott_a1, bott_a2, bott_out;
  std::vector<Tensor<T>> dec_up, dec_cat, dec_a, dec_out;  // indexed by stage
  std::vector<std::vector<T>> masks;                       // per block; empty = no dropout
};

template <typename T>
struct ForwardCache {
  std::vector<SampleCache<T>> samples;
  DropoutKind kind = DropoutKind::Spatial;
  bool valid = false;
};

template <typename T>
struct ParamGrads {
  std::vector<T> values;                 // same layout as NetworkParams::values
  std::vector<Tensor<T>> input_grads;    // per sample, when requested
};

namespace nn {

/// Block b of (depth + 1 + depth): encoder stages, bottleneck, decoder stages
/// (deepest first).
inline bool block_has_dropout(const ArchSpec& a, int block) {
  switch (a.dropout_placement) {
    case DropoutPlacement::AllBlocks: return true;
    case DropoutPlacement::EncoderOnly: return block < a.depth;
    case DropoutPlacement::DecoderOnly: return block > a.depth;
    case DropoutPlacement::BottleneckOnly: return block == a.depth;
  }
  return true;
}

template <typename T>
Tensor<T> forward_sample(const NetworkParams<T>& p, const Tensor<T>& x, bool dropout_on, double rate,
                         std::uint64_t mask_seed, SampleCache<T>* cache) {
  const ArchSpec& a = p.arch;
  const int d = a.depth;
  Rng rng(mask_seed);
  std::vector<T> col;
  std::size_t layer = 0;
  int block = 0;
  auto conv = [&](const Tensor<T>& in) {
    const std::size_t l = layer++;
    return conv_forward(in, p.layers[l], p.weight(l), p.bias(l), col);
  };
  auto dropout = [&](Tensor<T>& t) {
    std::vector<T> mask;
    if (dropout_on && rate > 0.0 && block_has_dropout(a, block)) mask = draw_dropout_mask(t, a.dropout_kind, rate, rng);
    ++block;
    apply_mask(t, mask, a.dropout_kind);
    if (cache) cache->masks.push_back(std::move(mask));
  };
  if (cache) {
    *cache = SampleCache<T>{};
    cache->dec_up.resize(d);
    cache->dec_cat.resize(d);
    cache->dec_a.resize(d);
    cache->dec_out.resize(d);
  }

  std::vector<Tensor<T>> skips(d);
  Tensor<T> cur = x;
  for (int s = 0; s < d; ++s) {
    Tensor<T> a1 = conv(cur);
    relu_inplace(a1);
    Tensor<T> a2 = conv(a1);
    relu_inplace(a2);
    Tensor<T> out = a2;
    dropout(out);
    std::vector<std::uint32_t> argmax;
    Tensor<T> pooled = maxpool2(out, argmax);
    if (cache) {
      cache->enc_in.push_back(std::move(cur));
      cache->enc_a1.push_back(std::move(a1));
      cache->enc_a2.push_back(std::move(a2));
      cache->pool_argmax.push_back(std::move(argmax));
    }
    skips[s] = std::move(out);
    cur = std::move(pooled);
  }
  {
    Tensor<T> a1 = conv(cur);
    relu_inplace(a1);
    Tensor<T> a2 = conv(a1);
    relu_inplace(a2);
    Tensor<T> out = a2;
    dropout(out);
    if (cache) {
      cache->bott_in = std::move(cur);
      cache->bott_a1 = std::move(a1);
      cache->bott_a2 = std::move(a2);
      cache->bott_out = out;
    }
    cur = std::move(out);
  }
  for (int s = d - 1; s >= 0; --s) {
    Tensor<T> up = upsample2(cur);
    Tensor<T> u = conv(up);
    Tensor<T> cat = concat(u, skips[s]);
    Tensor<T> act = conv(cat);
    relu_inplace(act);
    Tensor<T> out = act;
    dropout(out);
    if (cache) {
      cache->dec_up[s] = std::move(up);
      cache->dec_cat[s] = std::move(cat);
      cache->dec_a[s] = std::move(act);
      cache->dec_out[s] = out;
    }
    cur = std::move(out);
  }
  if (cache) cache->enc_out = std::move(skips);
  return conv(cur);
}

template <typename T>
void mask_backward(Tensor<T>& g, const std::vector<T>& mask, DropoutKind kind) {
  apply_mask(g, mask, kind);
}

template <typename T>
void backward_sample(const NetworkParams<T>& p, const SampleCache<T>& c, DropoutKind kind, const Tensor<T>& grad_logits,
                     std::vector<T>& grads, Tensor<T>* input_grad) {
  const ArchSpec& a = p.arch;
  const int d = a.depth;
  grads.assign(p.values.size(), T{0});
  std::vector<T> col, dcol;
  auto dw = [&](std::size_t l) { return std::span<T>(grads.data() + p.layers[l].weight_offset, p.layers[l].weight_count()); };
  auto db = [&](std::size_t l) { return std::span<T>(grads.data() + p.layers[l].bias_offset, p.layers[l].bias_count()); };
  const std::size_t head = p.layers.size() - 1;
  auto dec_up_layer = [&](int s) { return static_cast<std::size_t>(2 * d + 2 + 2 * (d - 1 - s)); };
  const std::size_t bott1 = static_cast<std::size_t>(2 * d);
  const int mask_bott = d;
  auto mask_dec = [&](int s) { return d + 1 + (d - 1 - s); };

  Tensor<T> g;
  conv_backward(c.dec_out[0], p.layers[head], p.weight(head), grad_logits, dw(head), db(head), &g, col, dcol);

  std::vector<Tensor<T>> skip_grads(d);
  for (int s = 0; s < d; ++s) {
    // g is the gradient of dec_out[s]
    mask_backward(g, c.masks[mask_dec(s)], kind);
    relu_backward(c.dec_a[s], g);
    const std::size_t lc = dec_up_layer(s) + 1, lu = dec_up_layer(s);
    Tensor<T> gcat;
    conv_backward(c.dec_cat[s], p.layers[lc], p.weight(lc), g, dw(lc), db(lc), &gcat, col, dcol);
    const int ws = a.width(s);
    Tensor<T> gu(ws, gcat.height, gcat.width), gskip(ws, gcat.height, gcat.width);
    std::copy(gcat.data.begin(), gcat.data.begin() + static_cast<std::ptrdiff_t>(gu.size()), gu.data.begin());
    std::copy(gcat.data.begin() + static_cast<std::ptrdiff_t>(gu.size()), gcat.data.end(), gskip.data.begin());
    skip_grads[s] = std::move(gskip);
    Tensor<T> gup;
    conv_backward(c.dec_up[s], p.layers[lu], p.weight(lu), gu, dw(lu), db(lu), &gup, col, dcol);
    g = upsample2_backward(gup);
  }
  // g is now the gradient of the bottleneck output
  mask_backward(g, c.masks[mask_bott], kind);
  relu_backward(c.bott_a2, g);
  Tensor<T> ga1;
  conv_backward(c.bott_a1, p.layers[bott1 + 1], p.weight(bott1 + 1), g, dw(bott1 + 1), db(bott1 + 1), &ga1, col, dcol);
  relu_backward(c.bott_a1, ga1);
  Tensor<T> gin;
  conv_backward(c.bott_in, p.layers[bott1], p.weight(bott1), ga1, dw(bott1), db(bott1), &gin, col, dcol);

  for (int s = d - 1; s >= 0; --s) {
    // gradient of enc_out[s]: skip path + pooling path
    Tensor<T> gout = std::move(skip_grads[s]);
    nn::maxpool2_backward(gin, c.pool_argmax[s], gout);
    mask_backward(gout, c.masks[s], kind);
    relu_backward(c.enc_a2[s], gout);
    const std::size_t l1 = static_cast<std::size_t>(2 * s), l2 = l1 + 1;
    Tensor<T> g1;
    conv_backward(c.enc_a1[s], p.layers[l2], p.weight(l2), gout, dw(l2), db(l2), &g1, col, dcol);
    relu_backward(c.enc_a1[s], g1);
    const bool need_input = s > 0 || input_grad != nullptr;
    Tensor<T> g0;
    conv_backward(c.enc_in[s], p.layers[l1], p.weight(l1), g1, dw(l1), db(l1), need_input ? &g0 : nullptr, col, dcol);
    gin = std::move(g0);
  }
  if (input_grad) *input_grad = std::move(gin);
}

}  // namespace nn

inline void check_spatial(const ArchSpec& a, int height, int width) {
  const int f = a.downsample_factor();
  if (height <= 0 || width <= 0 || height % f != 0 || width % f != 0)
    throw DimensionError("input " + std::to_string(height) + "x" + std::to_string(width) +
                         " is not divisible by the downsampling factor " + std::to_string(f));
}

/// Forward pass over a batch. Train and MonteCarlo modes apply inverted
/// dropout at `dropout_rate`; Eval disables it. Masks for sample n come
/// from a seed drawn sequentially from `rng`, so results do not depend on
/// the worker count. A cache is filled only in Train mode.
template <typename T>
TensorBatch<T> forward(const NetworkParams<T>& params, std::span<const Tensor<T>> batch, ForwardMode mode,
                       double dropout_rate, Rng& rng, ForwardCache<T>* cache = nullptr) {
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0,1)");
  for (const auto& x : batch) {
    if (x.channels != params.arch.in_bands)
      throw DimensionError("input has " + std::to_string(x.channels) + " bands, network expects " +
                           std::to_string(params.arch.in_bands));
    check_spatial(params.arch, x.height, x.width);
  }
  std::vector<std::uint64_t> seeds(batch.size());
  for (auto& s : seeds) s = rng();
  const bool dropout_on = mode != ForwardMode::Eval;
  const bool keep = mode == ForwardMode::Train && cache != nullptr;
  if (keep) {
    cache->samples.assign(batch.size(), SampleCache<T>{});
    cache->kind = params.arch.dropout_kind;
    cache->valid = true;
  } else if (cache) {
    cache->valid = false;
  }
  TensorBatch<T> out(batch.size());
  parallel_for(batch.size(), [&](std::size_t n) {
    out[n] = nn::forward_sample(params, batch[n], dropout_on, dropout_rate, seeds[n], keep ? &cache->samples[n] : nullptr);
  });
  return out;
}

/// Exact gradients of the cached forward computation. Per-sample gradients
/// are summed in sample order.
template <typename T>
ParamGrads<T> backward(const NetworkParams<T>& params, const ForwardCache<T>& cache, std::span<const Tensor<T>> grad_logits,
                       bool want_input_grads = false) {
  if (!cache.valid) throw StateError("backward: no training-mode forward cache available");
  if (grad_logits.size() != cache.samples.size()) throw DimensionError("backward: gradient batch size does not match the cache");
  const std::size_t n = cache.samples.size();
  std::vector<std::vector<T>> per_sample(n);
  ParamGrads<T> out;
  if (want_input_grads) out.input_grads.resize(n);
  parallel_for(n, [&](std::size_t i) {
    nn::backward_sample(params, cache.samples[i], cache.kind, grad_logits[i], per_sample[i],
                        want_input_grads ? &out.input_grads[i] : nullptr);
  });
  out.values.assign(params.values.size(), T{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] += per_sample[i][k];
  return out;
}

/// Per-pixel softmax over the class axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> p(logits.channels, logits.height, logits.width);
  const std::size_t hw = logits.plane();
  for (std::size_t i = 0; i < hw; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int k = 0; k < logits.channels; ++k) mx = std::max(mx, logits.data[k * hw + i]);
    T sum = 0;
    for (int k = 0; k < logits.channels; ++k) {
      const T e = std::exp(logits.data[k * hw + i] - mx);
      p.data[k * hw + i] = e;
      sum += e;
    }
    for (int k = 0; k < logits.channels; ++k) p.data[k * hw + i] /= sum;
  }
  return p;
}

/// Chain rule through softmax: dL/dz_k = p_k (g_k - sum_j p_j g_j).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
  Tensor<T> g(probs.channels, probs.height, probs.width);
  const std::size_t hw = probs.plane();
  for (std::size_t i = 0; i < hw; ++i) {
    T dot = 0;
    for (int k = 0; k < probs.channels; ++k) dot += probs.data[k * hw + i] * grad_probs.data[k * hw + i];
    for (int k = 0; k < probs.channels; ++k)
      g.data[k * hw + i] = probs.data[k * hw + i] * (grad_probs.data[k * hw + i] - dot);
  }
  return g;
}

/// Class probabilities for one chip; dropout_rate > 0 gives one MC sample.
template <typename T>
Tensor<T> predict_proba(const NetworkParams<T>& params, const Tensor<T>& chip, double dropout_rate, Rng& rng) {
  std::vector<Tensor<T>> batch{chip};
  const auto mode = dropout_rate > 0.0 ? ForwardMode::MonteCarlo : ForwardMode::Eval;
  auto logits = forward(params, std::span<const Tensor<T>>(batch), mode, dropout_rate, rng);
  return softmax(logits[0]);
}

template <typename T>
Tensor<T> predict_proba(const NetworkParams<T>& params, const Tensor<T>& chip) {
  Rng rng(0);
  return predict_proba(params, chip, 0.0, rng);
}

}  // namespace fieldshift
