// SPDX-License-Identifier: Apache-2.0
//
// Text-guided fusion network:
//   IR, VIS -> multi-level extractors -> merge -> pool to attention grid
//   -> [self-attention] -> [text cross-attention] -> [codebook] -> decoder -> z
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "textfuse/conv.hpp"
#include "textfuse/ops.hpp"
#include "textfuse/random.hpp"
#include "textfuse/text_encoder.hpp"

namespace textfuse {

inline constexpr std::size_t kExtractorBlocks = 6;

struct FusionConfig {
  std::size_t channels = 32;
  std::size_t attention_stride = 4;
  std::size_t heads = 4;
  std::size_t codebook_size = 128;
  bool use_self_attention = true;
  bool use_cross_attention = true;
  bool use_codebook = true;

  void validate() const {
    if (channels == 0 || heads == 0 || channels % heads != 0)
      throw ArgumentError("head count must divide the channel width");
    if (attention_stride == 0 || (attention_stride & (attention_stride - 1)) != 0)
      throw ArgumentError("attention stride must be a power of two");
    if (codebook_size < 2) throw ArgumentError("codebook needs at least two entries");
  }
  std::size_t head_dim() const { return channels / heads; }
  bool operator==(const FusionConfig&) const = default;
};

template <class T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
struct ExtractorParams {
  ConvLayer<T> stem;                                       // 1 -> C, 3x3
  std::array<ConvLayer<T>, kExtractorBlocks> blocks;       // C -> C, 3x3
  std::array<ConvLayer<T>, kExtractorBlocks - 1> reducers; // (i+2)C -> C, 1x1
  std::array<Tensor<T>, kExtractorBlocks> scale;           // W_i, [C]
  std::array<Tensor<T>, kExtractorBlocks> shift;           // b_i, [C]
};

template <class T>
struct AttentionParams {
  Tensor<T> wq, wk, wv;  // [C, C]; head h owns columns [h*dk, (h+1)*dk)
  Tensor<T> wo;          // [C, C]
};

template <class T>
struct DecoderParams {
  ConvLayer<T> hidden;  // C -> C, 3x3
  ConvLayer<T> output;  // C -> 1, 3x3
};

template <class T>
struct Codebook {
  Tensor<T> entries;                  // [K, C]
  std::vector<std::uint64_t> usage;   // selections per entry
};

template <class T>
struct FusionParams {
  ExtractorParams<T> ir, vis;
  ConvLayer<T> merge;  // 2C -> C, 1x1
  AttentionParams<T> self_att, cross_att;
  TextParams<T> text;
  DecoderParams<T> decoder;
  Codebook<T> codebook;

  // Every trainable tensor except the codebook, in a fixed order.
  template <class F>
  void visit(F&& f) {
    auto conv = [&](const std::string& n, ConvLayer<T>& c) {
      f(n + ".weight", c.weight);
      f(n + ".bias", c.bias);
    };
    auto extractor = [&](const std::string& n, ExtractorParams<T>& e) {
      conv(n + ".stem", e.stem);
      for (std::size_t i = 0; i < kExtractorBlocks; ++i) {
        const std::string b = n + ".block" + std::to_string(i + 1);
        conv(b, e.blocks[i]);
        if (i + 1 < kExtractorBlocks) conv(b + ".reduce", e.reducers[i]);
        f(b + ".scale", e.scale[i]);
        f(b + ".shift", e.shift[i]);
      }
    };
    auto attention = [&](const std::string& n, AttentionParams<T>& a) {
      f(n + ".wq", a.wq);
      f(n + ".wk", a.wk);
      f(n + ".wv", a.wv);
      f(n + ".wo", a.wo);
    };
    extractor("ir", ir);
    extractor("vis", vis);
    conv("merge", merge);
    attention("self_att", self_att);
    attention("cross_att", cross_att);
    f("text.proj", text.proj);
    f("text.spatial", text.spatial);
    conv("decoder.hidden", decoder.hidden);
    conv("decoder.output", decoder.output);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<FusionParams*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, static_cast<const Tensor<T>&>(t)); });
  }
};

// ---- initialisation ------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> normal_tensor(Rng& rng, Shape shape, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
ConvLayer<T> he_conv(Rng& rng, std::size_t cout, std::size_t cin, std::size_t k, double gain = 2.0) {
  return {normal_tensor<T>(rng, {cout, cin, k, k}, std::sqrt(gain / static_cast<double>(cin * k * k))),
          Tensor<T>::zeros({cout}, true)};
}

}  // namespace detail

template <class T>
FusionParams<T> init_fusion_params(const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xf05e));
  const std::size_t C = cfg.channels;
  FusionParams<T> p;
  auto extractor = [&](ExtractorParams<T>& e) {
    e.stem = detail::he_conv<T>(rng, C, 1, 3);
    for (std::size_t i = 0; i < kExtractorBlocks; ++i) {
      e.blocks[i] = detail::he_conv<T>(rng, C, C, 3);
      if (i + 1 < kExtractorBlocks) e.reducers[i] = detail::he_conv<T>(rng, C, (i + 2) * C, 1);
      e.scale[i] = Tensor<T>::full({C}, T(1.0 / kExtractorBlocks), true);
      e.shift[i] = Tensor<T>::zeros({C}, true);
    }
  };
  extractor(p.ir);
  extractor(p.vis);
  p.merge = detail::he_conv<T>(rng, C, 2 * C, 1);
  auto attention = [&](AttentionParams<T>& a) {
    const double s = 1.0 / std::sqrt(static_cast<double>(C));
    a.wq = detail::normal_tensor<T>(rng, {C, C}, s);
    a.wk = detail::normal_tensor<T>(rng, {C, C}, s);
    a.wv = detail::normal_tensor<T>(rng, {C, C}, s);
    a.wo = detail::normal_tensor<T>(rng, {C, C}, s);
  };
  attention(p.self_att);
  attention(p.cross_att);
  p.text.proj = detail::normal_tensor<T>(rng, {kTextDim, kTextDim}, 1.0 / std::sqrt(double(kTextDim)));
  p.text.spatial = detail::normal_tensor<T>(rng, {kTextDim, C}, 1.0 / std::sqrt(double(kTextDim)));
  p.decoder.hidden = detail::he_conv<T>(rng, C, C, 3);
  p.decoder.output = detail::he_conv<T>(rng, 1, C, 3, 1.0);
  p.codebook.entries = detail::normal_tensor<T>(rng, {cfg.codebook_size, C}, 1.0 / std::sqrt(double(C)));
  p.codebook.usage.assign(cfg.codebook_size, 0);
  return p;
}

// Same parameters in another precision; returned leaves record gradients.
template <class U, class T>
FusionParams<U> convert_params(const FusionParams<T>& src) {
  FusionParams<U> dst;
  auto conv_t = [](const Tensor<T>& t) {
    std::vector<U> v(t.data().begin(), t.data().end());
    return Tensor<U>(t.shape(), std::move(v), true);
  };
  std::vector<Tensor<U>> converted;
  src.visit([&](const std::string&, const Tensor<T>& t) { converted.push_back(conv_t(t)); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, Tensor<U>& t) { t = converted[i++]; });
  dst.codebook.entries = conv_t(src.codebook.entries);
  dst.codebook.usage = src.codebook.usage;
  return dst;
}

// Deep copy with fresh gradient-recording leaves; used to give each
// concurrently evaluated sample its own gradient buffers.
template <class T>
FusionParams<T> fork_params(const FusionParams<T>& src) {
  FusionParams<T> dst;
  std::vector<Tensor<T>> leaves;
  src.visit([&](const std::string&, const Tensor<T>& t) { leaves.push_back(t.clone_leaf()); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, Tensor<T>& t) { t = leaves[i++]; });
  dst.codebook.entries = src.codebook.entries.clone_leaf();
  dst.codebook.usage = src.codebook.usage;
  return dst;
}

// ---- forward stages ------------------------------------------------------

namespace detail {
template <class T>
Tensor<T> channel_view(const Tensor<T>& v) {
  return reshape(v, {v.numel(), 1, 1});
}
}  // namespace detail

// f_out = ReLU( sum_i W_i (.) G_i + b_i ), G_i the i-th 3x3 block output,
// each block fed by a 1x1 reduction of [f_in, G_1, ..., G_{i-1}].
template <class T>
Tensor<T> extract_features(const Tensor<T>& image, const ExtractorParams<T>& p) {
  if (image.rank() != 4 || image.dim(1) != 1) throw DimensionError("extract_features expects [N,1,H,W]");
  if (image.dim(2) < 8 || image.dim(3) < 8) throw ContractError("extract_features needs H, W >= 8");
  const Tensor<T> f_in = relu(conv2d(image, p.stem.weight, p.stem.bias, 1, 1));
  std::vector<Tensor<T>> history{f_in};
  Tensor<T> h = f_in;
  Tensor<T> acc;
  for (std::size_t i = 0; i < kExtractorBlocks; ++i) {
    if (h.dim(1) != p.blocks[i].weight.dim(1)) throw DimensionError("extractor channel mismatch");
    const Tensor<T> g = relu(conv2d(h, p.blocks[i].weight, p.blocks[i].bias, 1, 1));
    const Tensor<T> term = g * detail::channel_view(p.scale[i]) + detail::channel_view(p.shift[i]);
    acc = i == 0 ? term : acc + term;
    if (i + 1 < kExtractorBlocks) {
      history.push_back(g);
      h = relu(conv2d(concat(history, 1), p.reducers[i].weight, p.reducers[i].bias, 1, 0));
    }
  }
  return relu(acc);
}

template <class T>
struct AttentionTrace {
  std::vector<Tensor<T>> weights;  // per head, [N, T, S]
};

namespace detail {

// Multi-head attention with residual: x + concat_h(softmax(Q_h K_h^T / sqrt(dk)) V_h) W_O.
// `context` is x itself (self) or a [L, C] key/value sequence (cross).
template <class T>
Tensor<T> attend(const Tensor<T>& x, const Tensor<T>& context, bool self, const AttentionParams<T>& p,
                 std::size_t heads, AttentionTrace<T>* trace) {
  if (x.rank() != 3) throw DimensionError("attention expects [N, T, C]");
  const std::size_t C = x.dim(2);
  if (x.dim(1) == 0) throw ContractError("attention over zero tokens");
  if (p.wq.dim(0) != C || context.shape().back() != C) throw DimensionError("attention channel mismatch");
  if (heads == 0 || C % heads) throw ContractError("head count must divide channels");
  const std::size_t dk = C / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  const Tensor<T> q = matmul(x, p.wq);
  const Tensor<T> k = matmul(context, p.wk);
  const Tensor<T> v = matmul(context, p.wv);
  const std::size_t kv_axis = self ? 2 : 1;
  std::vector<Tensor<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<T> qh = slice(q, 2, h * dk, dk);
    const Tensor<T> kh = slice(k, kv_axis, h * dk, dk);
    const Tensor<T> vh = slice(v, kv_axis, h * dk, dk);
    const Tensor<T> w = softmax(matmul(qh, transpose(kh)) * scale);
    if (trace) trace->weights.push_back(w);
    outs.push_back(matmul(w, vh));
  }
  const Tensor<T> merged = heads == 1 ? outs[0] : concat(outs, 2);
  return x + matmul(merged, p.wo);
}

}  // namespace detail

template <class T>
Tensor<T> self_attend(const Tensor<T>& tokens, const AttentionParams<T>& p, std::size_t heads,
                      AttentionTrace<T>* trace = nullptr) {
  return detail::attend(tokens, tokens, true, p, heads, trace);
}

// Image tokens [N,T,C] query the text key/value sequence [L,C].
template <class T>
Tensor<T> cross_attend(const Tensor<T>& tokens, const Tensor<T>& text_keys, const AttentionParams<T>& p,
                       std::size_t heads, AttentionTrace<T>* trace = nullptr) {
  if (text_keys.rank() != 2) throw DimensionError("cross_attend expects text keys [L, C]");
  return detail::attend(tokens, text_keys, false, p, heads, trace);
}

template <class T>
struct QuantizeResult {
  Tensor<T> quantized;               // [N, T, C]
  std::vector<std::size_t> indices;  // N*T
  std::vector<T> distances;          // squared distance to the chosen entry
};

// Nearest-entry quantisation under squared Euclidean distance, ties to the
// lowest index. The backward pass treats the map as the identity
// (straight-through). With `frozen_offset`, the forward value is
// z + frozen_offset instead, which keeps the map exactly affine for
// finite-difference checks.
template <class T>
QuantizeResult<T> quantize(const Tensor<T>& z, const Tensor<T>& entries, const std::vector<T>* frozen_offset = nullptr) {
  if (!entries.defined() || entries.rank() != 2 || entries.dim(0) == 0)
    throw ContractError("quantize: empty codebook");
  const std::size_t C = entries.dim(1), K = entries.dim(0);
  if (z.shape().back() != C) throw DimensionError("quantize: channel mismatch");
  const std::size_t rows = z.numel() / C;
  QuantizeResult<T> r;
  r.indices.resize(rows);
  r.distances.resize(rows);
  std::vector<T> out(z.numel());
  const T* pz = z.data().data();
  const T* pc = entries.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* x = pz + i * C;
    std::size_t best = 0;
    T best_d = std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const T* c = pc + k * C;
      T d = T(0);
      for (std::size_t j = 0; j < C; ++j) d += (x[j] - c[j]) * (x[j] - c[j]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    r.indices[i] = best;
    r.distances[i] = best_d;
    if (frozen_offset) {
      for (std::size_t j = 0; j < C; ++j) out[i * C + j] = x[j] + (*frozen_offset)[i * C + j];
    } else {
      std::copy_n(pc + best * C, C, out.data() + i * C);
    }
  }
  r.quantized = make_result<T>(z.shape(), std::move(out), "quantize_st", {&z}, [](Node<T>& self) {
    T* gz = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) gz[i] += self.grad[i];
  });
  return r;
}

// Tokens [N, T, C] on an h x w grid -> fused image [N, 1, h*stride, w*stride].
template <class T>
Tensor<T> decode(const Tensor<T>& q, std::size_t grid_h, std::size_t grid_w, std::size_t stride,
                 const DecoderParams<T>& p) {
  if (q.rank() != 3 || q.dim(1) != grid_h * grid_w)
    throw DimensionError("decode: token count does not match the attention grid");
  const std::size_t n = q.dim(0), C = q.dim(2);
  const Tensor<T> grid = reshape(transpose(q), {n, C, grid_h, grid_w});
  const std::size_t first = stride >= 2 ? stride / 2 : 1;
  const std::size_t second = stride >= 2 ? 2 : 1;
  const Tensor<T> hidden = relu(conv2d(upsample_nearest(grid, first), p.hidden.weight, p.hidden.bias, 1, 1));
  return sigmoid(conv2d(upsample_nearest(hidden, second), p.output.weight, p.output.bias, 1, 1));
}

template <class T>
struct FuseOutput {
  Tensor<T> z;          // [N, 1, H, W]
  Tensor<T> features;   // tokens entering the quantiser (or decoder when it is off)
  Tensor<T> quantized;  // what the decoder saw
  std::vector<std::size_t> indices;
  AttentionTrace<T> self_trace, cross_trace;
};

struct FuseOptions {
  bool trace_attention = false;
};

template <class T>
FuseOutput<T> fuse(const Tensor<T>& ir, const Tensor<T>& vis, const PromptEmbedding<T>& prompt,
                   const FusionConfig& cfg, const FusionParams<T>& p, const FuseOptions& opt = {},
                   const std::vector<T>* frozen_quant_offset = nullptr) {
  cfg.validate();
  if (ir.shape() != vis.shape()) throw DimensionError("fuse: IR and VIS shapes differ");
  const std::size_t n = ir.dim(0), H = ir.dim(2), W = ir.dim(3), C = cfg.channels, s = cfg.attention_stride;
  if (H % s || W % s) throw DimensionError("fuse: image size must be a multiple of the attention stride");
  const Tensor<T> f_ir = extract_features(ir, p.ir);
  const Tensor<T> f_vis = extract_features(vis, p.vis);
  const Tensor<T> merged = relu(conv2d(concat(std::vector<Tensor<T>>{f_ir, f_vis}, 1), p.merge.weight, p.merge.bias, 1, 0));
  const std::size_t gh = H / s, gw = W / s;
  const Tensor<T> pooled = s == 1 ? merged : avg_pool2d(merged, s);
  // Unit-RMS-norm tokens, the scale the codebook is initialised at.
  Tensor<T> tokens = layer_norm(transpose(reshape(pooled, {n, C, gh * gw}))) * (T(1) / std::sqrt(static_cast<T>(C)));

  FuseOutput<T> out;
  if (cfg.use_self_attention)
    tokens = self_attend(tokens, p.self_att, cfg.heads, opt.trace_attention ? &out.self_trace : nullptr);
  if (cfg.use_cross_attention) {
    const Tensor<T> keys = spatialize(prompt.features, p.text.spatial);
    tokens = cross_attend(tokens, keys, p.cross_att, cfg.heads, opt.trace_attention ? &out.cross_trace : nullptr);
  }
  out.features = tokens;
  if (cfg.use_codebook) {
    QuantizeResult<T> qr = quantize(tokens, p.codebook.entries, frozen_quant_offset);
    out.quantized = qr.quantized;
    out.indices = std::move(qr.indices);
  } else {
    out.quantized = tokens;
  }
  out.z = decode(out.quantized, gh, gw, s, p.decoder);
  return out;
}

// Convenience: encodes the prompt with the network's own text projection.
template <class T>
FuseOutput<T> fuse_prompt(const Tensor<T>& ir, const Tensor<T>& vis, const std::string& prompt,
                          const FusionConfig& cfg, const FusionParams<T>& p, const FuseOptions& opt = {}) {
  return fuse(ir, vis, encode(tokenize(prompt), p.text), cfg, p, opt);
}

}  // namespace textfuse
