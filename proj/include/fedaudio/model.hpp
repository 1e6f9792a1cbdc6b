// SPDX-License-Identifier: Apache-2.0
//
// Trainable classifiers with hand-derived gradients, and the plain-SGD local
// trainer every federated client runs.
//
//   mlp:      mean-pool over frames -> [dense + ReLU]* -> dense
//   conv_gru: conv3x3 + ReLU + maxpool2x2 (x2) -> GRU over time -> mean-pool
//             over time -> dense + ReLU -> dense
//
// Convolutions use zero "same" padding; pooling floors odd extents. The GRU
// input at step t is the flattened (channel, mel) slice of the second pooled
// map, index c * F2 + f.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedaudio/audio_io.hpp"
#include "fedaudio/error.hpp"
#include "fedaudio/matrix.hpp"
#include "fedaudio/partition.hpp"
#include "fedaudio/rng.hpp"

namespace fedaudio {

enum class ModelKind { mlp, conv_gru };

struct ModelArch {
  ModelKind kind = ModelKind::mlp;
  std::size_t input_dims = 128;
  std::size_t n_classes = 4;
  // mlp
  std::vector<std::size_t> hidden = {64};
  // conv_gru
  std::size_t conv1_channels = 16;
  std::size_t conv2_channels = 32;
  std::size_t gru_hidden = 64;
  std::size_t dense_hidden = 64;

  void validate() const {
    require(n_classes >= 2, ErrorCode::InvalidArgument, "n_classes must be >= 2");
    require(input_dims >= 1, ErrorCode::InvalidArgument, "input_dims must be >= 1");
    if (kind == ModelKind::mlp) {
      require(!hidden.empty(), ErrorCode::InvalidArgument, "mlp needs at least one hidden layer");
      for (auto w : hidden) require(w >= 1, ErrorCode::InvalidArgument, "widths must be >= 1");
    } else {
      require(conv1_channels >= 1 && conv2_channels >= 1 && gru_hidden >= 1 && dense_hidden >= 1,
              ErrorCode::InvalidArgument, "widths must be >= 1");
      require(input_dims >= 4, ErrorCode::InvalidArgument,
              "conv_gru needs input_dims >= 4 to survive two 2x2 pools");
    }
  }

  /// Width of the GRU input vector: conv2_channels * floor(floor(dims/2)/2).
  std::size_t gru_input() const { return conv2_channels * ((input_dims / 2) / 2); }
};

struct TensorSlot {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;

  std::size_t size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
  friend bool operator==(const TensorSlot&, const TensorSlot&) = default;
};

/// Flat parameter storage plus the named tensor layout over it.
struct ParamVector {
  std::vector<double> values;
  std::vector<TensorSlot> layout;

  std::size_t size() const noexcept { return values.size(); }

  const TensorSlot& slot(std::string_view name) const {
    for (const auto& s : layout)
      if (s.name == name) return s;
    fail(ErrorCode::LayoutMismatch, "no tensor named " + std::string(name));
  }
  std::span<double> tensor(std::string_view name) {
    const auto& s = slot(name);
    return {values.data() + s.offset, s.size()};
  }
  std::span<const double> tensor(std::string_view name) const {
    const auto& s = slot(name);
    return {values.data() + s.offset, s.size()};
  }

  ParamVector zeros_like() const { return {std::vector<double>(values.size(), 0.0), layout}; }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

inline void check_same_layout(const ParamVector& a, const ParamVector& b) {
  if (a.layout != b.layout || a.values.size() != b.values.size())
    fail(ErrorCode::LayoutMismatch, "parameter layouts differ");
}

// ---------------------------------------------------------------------------
// Layout

namespace detail {

struct LayoutBuilder {
  std::vector<TensorSlot> slots;
  std::size_t total = 0;
  void add(std::string name, std::vector<std::size_t> shape) {
    TensorSlot s{std::move(name), std::move(shape), total};
    total += s.size();
    slots.push_back(std::move(s));
  }
};

}  // namespace detail

inline std::vector<TensorSlot> param_layout(const ModelArch& arch) {
  arch.validate();
  detail::LayoutBuilder b;
  if (arch.kind == ModelKind::mlp) {
    std::size_t in = arch.input_dims;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
      b.add("dense" + std::to_string(l) + ".weight", {arch.hidden[l], in});
      b.add("dense" + std::to_string(l) + ".bias", {arch.hidden[l]});
      in = arch.hidden[l];
    }
    b.add("out.weight", {arch.n_classes, in});
    b.add("out.bias", {arch.n_classes});
  } else {
    const std::size_t c1 = arch.conv1_channels, c2 = arch.conv2_channels;
    const std::size_t h = arch.gru_hidden, d = arch.gru_input();
    b.add("conv1.weight", {c1, 1, 3, 3});
    b.add("conv1.bias", {c1});
    b.add("conv2.weight", {c2, c1, 3, 3});
    b.add("conv2.bias", {c2});
    for (const char* g : {"z", "r", "n"}) {
      b.add(std::string("gru.w_") + g, {h, d});
      b.add(std::string("gru.u_") + g, {h, h});
      b.add(std::string("gru.b_") + g, {h});
    }
    b.add("dense.weight", {arch.dense_hidden, h});
    b.add("dense.bias", {arch.dense_hidden});
    b.add("out.weight", {arch.n_classes, arch.dense_hidden});
    b.add("out.bias", {arch.n_classes});
  }
  return b.slots;
}

inline std::size_t param_count(const ModelArch& arch) {
  std::size_t n = 0;
  for (const auto& s : param_layout(arch)) n += s.size();
  return n;
}

/// Glorot-uniform weights, zero biases. Convolution fans include the 3x3
/// receptive field.
inline ParamVector init_params(const ModelArch& arch, std::uint64_t seed) {
  ParamVector p;
  p.layout = param_layout(arch);
  std::size_t total = 0;
  for (const auto& s : p.layout) total += s.size();
  p.values.assign(total, 0.0);
  Rng rng(seed);
  for (const auto& s : p.layout) {
    if (s.shape.size() < 2) continue;  // bias
    std::size_t fan_out = s.shape[0], fan_in = s.shape[1];
    if (s.shape.size() == 4) {
      fan_in *= s.shape[2] * s.shape[3];
      fan_out *= s.shape[2] * s.shape[3];
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (std::size_t i = 0; i < s.size(); ++i) p.values[s.offset + i] = u(rng);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Serialization: `tensor=<name> shape=<d0xd1x...> offset=<n>` lines, then one
// value per line.

inline void write_params(std::ostream& out, const ParamVector& p) {
  for (const auto& s : p.layout) {
    out << "tensor=" << s.name << " shape=";
    for (std::size_t i = 0; i < s.shape.size(); ++i) out << (i ? "x" : "") << s.shape[i];
    out << " offset=" << s.offset << '\n';
  }
  for (double v : p.values) out << detail::format_real(v) << '\n';
}

inline ParamVector read_params(std::istream& in) {
  ParamVector p;
  std::string line;
  std::size_t expected = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("tensor=", 0) == 0) {
      require(values.empty(), ErrorCode::MalformedHeader, "tensor header after values");
      std::istringstream ls(line);
      std::string tok;
      TensorSlot s;
      bool have_shape = false, have_offset = false;
      while (ls >> tok) {
        if (tok.rfind("tensor=", 0) == 0) {
          s.name = tok.substr(7);
        } else if (tok.rfind("shape=", 0) == 0) {
          std::istringstream ss(tok.substr(6));
          std::string dim;
          while (std::getline(ss, dim, 'x')) s.shape.push_back(std::stoull(dim));
          have_shape = !s.shape.empty();
        } else if (tok.rfind("offset=", 0) == 0) {
          s.offset = std::stoull(tok.substr(7));
          have_offset = true;
        }
      }
      require(!s.name.empty() && have_shape && have_offset, ErrorCode::MalformedHeader,
              "incomplete tensor header: " + line);
      require(s.offset == expected, ErrorCode::MalformedHeader,
              "tensor offsets are not contiguous at " + s.name);
      expected += s.size();
      p.layout.push_back(std::move(s));
    } else {
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
      require(ec == std::errc() && ptr == line.data() + line.size(), ErrorCode::MalformedHeader,
              "bad parameter value: " + line);
      values.push_back(v);
    }
  }
  require(values.size() == expected, ErrorCode::DimensionMismatch,
          "layout declares " + std::to_string(expected) + " values, found " +
              std::to_string(values.size()));
  p.values = std::move(values);
  return p;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

struct LossGrad {
  double loss = 0.0;
  Matrix dlogits;  // d(mean loss)/d(logits)
};

/// Mean cross-entropy over rows, via a max-shifted log-sum-exp.
inline LossGrad softmax_cross_entropy(const Matrix& logits, std::span<const std::size_t> targets) {
  require(logits.rows() == targets.size(), ErrorCode::ShapeMismatch,
          "logit rows differ from target count");
  LossGrad out{0.0, Matrix(logits.rows(), logits.cols())};
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    require(targets[i] < row.size(), ErrorCode::ShapeMismatch, "target outside class range");
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    out.loss += (lse - row[targets[i]]) * inv_b;
    for (std::size_t j = 0; j < row.size(); ++j)
      out.dlogits(i, j) = std::exp(row[j] - lse) * inv_b;
    out.dlogits(i, targets[i]) -= inv_b;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense helpers: y = W x + b with W (out x in) row-major.

namespace detail {

inline void affine(std::span<const double> w, std::span<const double> b,
                   std::span<const double> x, std::span<double> y) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < y.size(); ++o) {
    const double* row = w.data() + o * in;
    double acc = b.empty() ? 0.0 : b[o];
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// gw += dy x^T, gb += dy, dx += W^T dy (dx may be empty).
inline void affine_backward(std::span<const double> w, std::span<const double> x,
                            std::span<const double> dy, std::span<double> gw,
                            std::span<double> gb, std::span<double> dx) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const double g = dy[o];
    if (!gb.empty()) gb[o] += g;
    if (g == 0.0) continue;
    double* grow = gw.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) grow[i] += g * x[i];
    if (!dx.empty()) {
      const double* row = w.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dx[i] += g * row[i];
    }
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct TensorView {
  std::span<const double> w;
  std::span<double> g;
};

inline TensorView view(const ParamVector& p, ParamVector* grad, std::string_view name) {
  const auto& s = p.slot(name);
  std::span<const double> w{p.values.data() + s.offset, s.size()};
  std::span<double> g;
  if (grad) g = {grad->values.data() + s.offset, s.size()};
  return {w, g};
}

// ----- MLP -----

inline std::vector<double> mean_pool_frames(const FeatureMatrix& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t d = 0; d < x.cols(); ++d) m[d] += x(r, d);
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (auto& v : m) v *= inv;
  return m;
}

// Runs one example; when grad is set, back-propagates dlogits into it.
inline void mlp_example(const ModelArch& arch, const ParamVector& p, const FeatureMatrix& x,
                        std::span<double> logits, ParamVector* grad,
                        std::span<const double> dlogits) {
  const std::size_t L = arch.hidden.size();
  std::vector<std::vector<double>> acts(L + 1);
  acts[0] = mean_pool_frames(x);
  for (std::size_t l = 0; l < L; ++l) {
    const auto wv = view(p, grad, "dense" + std::to_string(l) + ".weight");
    const auto bv = view(p, grad, "dense" + std::to_string(l) + ".bias");
    acts[l + 1].assign(arch.hidden[l], 0.0);
    affine(wv.w, bv.w, acts[l], acts[l + 1]);
    for (auto& v : acts[l + 1]) v = std::max(v, 0.0);
  }
  const auto ow = view(p, grad, "out.weight");
  const auto ob = view(p, grad, "out.bias");
  affine(ow.w, ob.w, acts[L], logits);
  if (!grad) return;

  std::vector<double> dh(acts[L].size(), 0.0);
  affine_backward(ow.w, acts[L], dlogits, ow.g, ob.g, dh);
  for (std::size_t l = L; l-- > 0;) {
    for (std::size_t i = 0; i < dh.size(); ++i)
      if (acts[l + 1][i] <= 0.0) dh[i] = 0.0;
    const auto wv = view(p, grad, "dense" + std::to_string(l) + ".weight");
    const auto bv = view(p, grad, "dense" + std::to_string(l) + ".bias");
    std::vector<double> dprev(l > 0 ? acts[l].size() : 0, 0.0);
    affine_backward(wv.w, acts[l], dh, wv.g, bv.g, dprev);
    dh = std::move(dprev);
  }
}

// ----- conv + GRU -----

// Channel-major 3-D map: (channels, time, freq).
struct Volume {
  std::size_t c = 0, t = 0, f = 0;
  std::vector<double> v;
  Volume() = default;
  Volume(std::size_t c_, std::size_t t_, std::size_t f_) : c(c_), t(t_), f(f_), v(c_ * t_ * f_) {}
  double& at(std::size_t ci, std::size_t ti, std::size_t fi) { return v[(ci * t + ti) * f + fi]; }
  double at(std::size_t ci, std::size_t ti, std::size_t fi) const {
    return v[(ci * t + ti) * f + fi];
  }
};

// 3x3 same-padded convolution followed by ReLU.
inline Volume conv3x3_relu(const Volume& in, std::span<const double> w, std::span<const double> b,
                           std::size_t out_c) {
  Volume out(out_c, in.t, in.f);
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    for (std::size_t ti = 0; ti < in.t; ++ti)
      for (std::size_t fi = 0; fi < in.f; ++fi) out.at(oc, ti, fi) = b[oc];
    for (std::size_t ic = 0; ic < in.c; ++ic) {
      const double* k = w.data() + (oc * in.c + ic) * 9;
      for (int dt = -1; dt <= 1; ++dt)
        for (int df = -1; df <= 1; ++df) {
          const double kv = k[(dt + 1) * 3 + (df + 1)];
          const std::size_t t0 = dt < 0 ? 1 : 0, t1 = dt > 0 ? in.t - 1 : in.t;
          const std::size_t f0 = df < 0 ? 1 : 0, f1 = df > 0 ? in.f - 1 : in.f;
          for (std::size_t ti = t0; ti < t1; ++ti) {
            const double* src = &in.v[(ic * in.t + (ti + dt)) * in.f];
            double* dst = &out.v[(oc * in.t + ti) * in.f];
            for (std::size_t fi = f0; fi < f1; ++fi) dst[fi] += kv * src[fi + df];
          }
        }
    }
  }
  for (auto& v : out.v) v = std::max(v, 0.0);
  return out;
}

// Given d(out) (already masked by ReLU), accumulate gw, gb and d(in).
inline void conv3x3_backward(const Volume& in, std::span<const double> w, const Volume& dout,
                             std::span<double> gw, std::span<double> gb, Volume* din) {
  for (std::size_t oc = 0; oc < dout.c; ++oc) {
    double bsum = 0.0;
    for (std::size_t i = 0; i < dout.t * dout.f; ++i) bsum += dout.v[oc * dout.t * dout.f + i];
    gb[oc] += bsum;
    for (std::size_t ic = 0; ic < in.c; ++ic) {
      const double* k = w.data() + (oc * in.c + ic) * 9;
      double* gk = gw.data() + (oc * in.c + ic) * 9;
      for (int dt = -1; dt <= 1; ++dt)
        for (int df = -1; df <= 1; ++df) {
          const std::size_t t0 = dt < 0 ? 1 : 0, t1 = dt > 0 ? in.t - 1 : in.t;
          const std::size_t f0 = df < 0 ? 1 : 0, f1 = df > 0 ? in.f - 1 : in.f;
          double acc = 0.0;
          const double kv = k[(dt + 1) * 3 + (df + 1)];
          for (std::size_t ti = t0; ti < t1; ++ti) {
            const double* src = &in.v[(ic * in.t + (ti + dt)) * in.f];
            const double* g = &dout.v[(oc * in.t + ti) * in.f];
            double* dsrc = din ? &din->v[(ic * in.t + (ti + dt)) * in.f] : nullptr;
            for (std::size_t fi = f0; fi < f1; ++fi) {
              acc += g[fi] * src[fi + df];
              if (dsrc) dsrc[fi + df] += kv * g[fi];
            }
          }
          gk[(dt + 1) * 3 + (df + 1)] += acc;
        }
    }
  }
}

// 2x2 stride-2 max pool; `arg` records the flat source index of each max.
inline Volume maxpool2(const Volume& in, std::vector<std::size_t>& arg) {
  Volume out(in.c, in.t / 2, in.f / 2);
  arg.assign(out.v.size(), 0);
  for (std::size_t c = 0; c < out.c; ++c)
    for (std::size_t ti = 0; ti < out.t; ++ti)
      for (std::size_t fi = 0; fi < out.f; ++fi) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t bb = 0; bb < 2; ++bb) {
            const std::size_t idx = (c * in.t + 2 * ti + a) * in.f + 2 * fi + bb;
            if (in.v[idx] > best) {
              best = in.v[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (c * out.t + ti) * out.f + fi;
        out.v[o] = best;
        arg[o] = best_idx;
      }
  return out;
}

struct GruStep {
  std::vector<double> x, h_prev, z, r, n, h;
};

inline void conv_gru_example(const ModelArch& arch, const ParamVector& p, const FeatureMatrix& x,
                             std::span<double> logits, ParamVector* grad,
                             std::span<const double> dlogits) {
  const std::size_t c1 = arch.conv1_channels, c2 = arch.conv2_channels;
  const std::size_t H = arch.gru_hidden;
  if (x.rows() < 4)
    fail(ErrorCode::ShapeMismatch, "conv_gru needs at least 4 frames, got " +
                                       std::to_string(x.rows()));

  Volume in(1, x.rows(), x.cols());
  std::copy(x.values().begin(), x.values().end(), in.v.begin());

  const auto k1 = view(p, grad, "conv1.weight"), b1 = view(p, grad, "conv1.bias");
  const auto k2 = view(p, grad, "conv2.weight"), b2 = view(p, grad, "conv2.bias");
  const Volume r1 = conv3x3_relu(in, k1.w, b1.w, c1);
  std::vector<std::size_t> arg1, arg2;
  const Volume p1 = maxpool2(r1, arg1);
  const Volume r2 = conv3x3_relu(p1, k2.w, b2.w, c2);
  const Volume p2 = maxpool2(r2, arg2);

  const std::size_t steps = p2.t, f2 = p2.f, D = c2 * f2;
  const auto wz = view(p, grad, "gru.w_z"), uz = view(p, grad, "gru.u_z"),
             bz = view(p, grad, "gru.b_z");
  const auto wr = view(p, grad, "gru.w_r"), ur = view(p, grad, "gru.u_r"),
             br = view(p, grad, "gru.b_r");
  const auto wn = view(p, grad, "gru.w_n"), un = view(p, grad, "gru.u_n"),
             bn = view(p, grad, "gru.b_n");

  std::vector<GruStep> seq(steps);
  std::vector<double> h(H, 0.0), tmp(H), rh(H);
  std::vector<double> pooled(H, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    auto& s = seq[t];
    s.x.resize(D);
    for (std::size_t c = 0; c < c2; ++c)
      for (std::size_t f = 0; f < f2; ++f) s.x[c * f2 + f] = p2.at(c, t, f);
    s.h_prev = h;
    s.z.assign(H, 0.0);
    s.r.assign(H, 0.0);
    s.n.assign(H, 0.0);
    affine(wz.w, bz.w, s.x, s.z);
    affine(uz.w, {}, h, tmp);
    for (std::size_t i = 0; i < H; ++i) s.z[i] = sigmoid(s.z[i] + tmp[i]);
    affine(wr.w, br.w, s.x, s.r);
    affine(ur.w, {}, h, tmp);
    for (std::size_t i = 0; i < H; ++i) s.r[i] = sigmoid(s.r[i] + tmp[i]);
    for (std::size_t i = 0; i < H; ++i) rh[i] = s.r[i] * h[i];
    affine(wn.w, bn.w, s.x, s.n);
    affine(un.w, {}, rh, tmp);
    for (std::size_t i = 0; i < H; ++i) s.n[i] = std::tanh(s.n[i] + tmp[i]);
    for (std::size_t i = 0; i < H; ++i) h[i] = (1.0 - s.z[i]) * s.n[i] + s.z[i] * h[i];
    s.h = h;
    for (std::size_t i = 0; i < H; ++i) pooled[i] += h[i];
  }
  const double inv_steps = 1.0 / static_cast<double>(steps);
  for (auto& v : pooled) v *= inv_steps;

  const auto dw = view(p, grad, "dense.weight"), db = view(p, grad, "dense.bias");
  const auto ow = view(p, grad, "out.weight"), ob = view(p, grad, "out.bias");
  std::vector<double> dense(arch.dense_hidden);
  affine(dw.w, db.w, pooled, dense);
  for (auto& v : dense) v = std::max(v, 0.0);
  affine(ow.w, ob.w, dense, logits);
  if (!grad) return;

  // Head.
  std::vector<double> ddense(dense.size(), 0.0);
  affine_backward(ow.w, dense, dlogits, ow.g, ob.g, ddense);
  for (std::size_t i = 0; i < dense.size(); ++i)
    if (dense[i] <= 0.0) ddense[i] = 0.0;
  std::vector<double> dpooled(H, 0.0);
  affine_backward(dw.w, pooled, ddense, dw.g, db.g, dpooled);

  // GRU, backwards through time.
  Volume dp2(c2, p2.t, p2.f);
  std::vector<double> dh_next(H, 0.0), dh(H), da_z(H), da_r(H), da_n(H), drh(H), dx(D);
  for (std::size_t t = steps; t-- > 0;) {
    const auto& s = seq[t];
    for (std::size_t i = 0; i < H; ++i) dh[i] = dpooled[i] * inv_steps + dh_next[i];
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    std::fill(dx.begin(), dx.end(), 0.0);
    for (std::size_t i = 0; i < H; ++i) {
      const double dn = dh[i] * (1.0 - s.z[i]);
      const double dz = dh[i] * (s.h_prev[i] - s.n[i]);
      dh_next[i] = dh[i] * s.z[i];
      da_n[i] = dn * (1.0 - s.n[i] * s.n[i]);
      da_z[i] = dz * s.z[i] * (1.0 - s.z[i]);
    }
    for (std::size_t i = 0; i < H; ++i) rh[i] = s.r[i] * s.h_prev[i];
    std::fill(drh.begin(), drh.end(), 0.0);
    affine_backward(wn.w, s.x, da_n, wn.g, bn.g, dx);
    affine_backward(un.w, rh, da_n, un.g, {}, drh);
    for (std::size_t i = 0; i < H; ++i) {
      const double dr = drh[i] * s.h_prev[i];
      dh_next[i] += drh[i] * s.r[i];
      da_r[i] = dr * s.r[i] * (1.0 - s.r[i]);
    }
    affine_backward(wz.w, s.x, da_z, wz.g, bz.g, dx);
    affine_backward(uz.w, s.h_prev, da_z, uz.g, {}, dh_next);
    affine_backward(wr.w, s.x, da_r, wr.g, br.g, dx);
    affine_backward(ur.w, s.h_prev, da_r, ur.g, {}, dh_next);
    for (std::size_t c = 0; c < c2; ++c)
      for (std::size_t f = 0; f < f2; ++f) dp2.at(c, t, f) = dx[c * f2 + f];
  }

  // Pool 2 -> ReLU 2 -> conv 2.
  Volume dr2(c2, r2.t, r2.f);
  for (std::size_t o = 0; o < dp2.v.size(); ++o) dr2.v[arg2[o]] += dp2.v[o];
  for (std::size_t i = 0; i < dr2.v.size(); ++i)
    if (r2.v[i] <= 0.0) dr2.v[i] = 0.0;
  Volume dp1(c1, p1.t, p1.f);
  conv3x3_backward(p1, k2.w, dr2, k2.g, b2.g, &dp1);

  // Pool 1 -> ReLU 1 -> conv 1.
  Volume dr1(c1, r1.t, r1.f);
  for (std::size_t o = 0; o < dp1.v.size(); ++o) dr1.v[arg1[o]] += dp1.v[o];
  for (std::size_t i = 0; i < dr1.v.size(); ++i)
    if (r1.v[i] <= 0.0) dr1.v[i] = 0.0;
  conv3x3_backward(in, k1.w, dr1, k1.g, b1.g, nullptr);
}

inline void run_example(const ModelArch& arch, const ParamVector& p, const FeatureMatrix& x,
                        std::span<double> logits, ParamVector* grad,
                        std::span<const double> dlogits) {
  if (x.cols() != arch.input_dims)
    fail(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.cols()) +
                                       " dims, model expects " + std::to_string(arch.input_dims));
  if (x.rows() == 0) fail(ErrorCode::ShapeMismatch, "input has no frames");
  if (arch.kind == ModelKind::mlp) mlp_example(arch, p, x, logits, grad, dlogits);
  else conv_gru_example(arch, p, x, logits, grad, dlogits);
}

}  // namespace detail

/// Inputs may differ in frame count; each example runs independently.
struct Batch {
  std::vector<const FeatureMatrix*> inputs;
  std::vector<std::size_t> targets;

  std::size_t size() const noexcept { return inputs.size(); }
  void add(const FeatureMatrix& x, std::size_t y) {
    inputs.push_back(&x);
    targets.push_back(y);
  }
};

inline Matrix forward(const ParamVector& params, const ModelArch& arch,
                      std::span<const FeatureMatrix* const> inputs) {
  if (params.layout != param_layout(arch))
    fail(ErrorCode::ShapeMismatch, "parameters do not match architecture");
  Matrix logits(inputs.size(), arch.n_classes);
  for (std::size_t i = 0; i < inputs.size(); ++i)
    detail::run_example(arch, params, *inputs[i], logits.row(i), nullptr, {});
  return logits;
}

inline Matrix forward(const ParamVector& params, const ModelArch& arch, const Batch& batch) {
  return forward(params, arch, batch.inputs);
}

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Mean softmax cross-entropy over the batch and its exact gradient.
inline LossAndGrad loss_and_grad(const ParamVector& params, const ModelArch& arch,
                                 const Batch& batch) {
  require(batch.size() > 0 && batch.inputs.size() == batch.targets.size(),
          ErrorCode::ShapeMismatch, "batch must be non-empty with one target per input");
  for (auto y : batch.targets)
    require(y < arch.n_classes, ErrorCode::ShapeMismatch, "target outside class range");
  const Matrix logits = forward(params, arch, batch);
  const LossGrad lg = softmax_cross_entropy(logits, batch.targets);
  LossAndGrad out{lg.loss, params.zeros_like()};
  std::vector<double> scratch(arch.n_classes);
  for (std::size_t i = 0; i < batch.size(); ++i)
    detail::run_example(arch, params, *batch.inputs[i], scratch, &out.grad, lg.dlogits.row(i));
  return out;
}

inline std::vector<std::size_t> predict(const ParamVector& params, const ModelArch& arch,
                                        std::span<const Example> examples) {
  std::vector<const FeatureMatrix*> inputs;
  inputs.reserve(examples.size());
  for (const auto& ex : examples) inputs.push_back(&ex.features);
  const Matrix logits = forward(params, arch, inputs);
  std::vector<std::size_t> pred(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto row = logits.row(i);
    pred[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return pred;
}

struct SgdOptions {
  double lr = 0.1;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  // Index of the first epoch; each epoch shuffles with derive_seed(seed, epoch).
  std::size_t epoch_offset = 0;
};

struct LocalTrainResult {
  ParamVector params;
  double mean_loss = 0.0;  // mean minibatch loss over all steps
  std::size_t steps = 0;
};

/// Plain minibatch SGD over one shard; the last partial batch is kept.
inline LocalTrainResult local_train(ParamVector params, const ModelArch& arch,
                                    std::span<const Example> shard, const SgdOptions& opt) {
  if (shard.empty()) fail(ErrorCode::EmptyShard, "cannot train on an empty shard");
  require(opt.lr >= 0.0 && opt.batch_size >= 1, ErrorCode::InvalidArgument,
          "lr must be >= 0 and batch_size >= 1");
  LocalTrainResult res;
  double loss_sum = 0.0;
  std::vector<std::size_t> order(shard.size());
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(opt.seed, "epoch", opt.epoch_offset + e));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      Batch batch;
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      for (std::size_t i = start; i < stop; ++i)
        batch.add(shard[order[i]].features, shard[order[i]].label);
      const auto lg = loss_and_grad(params, arch, batch);
      for (std::size_t i = 0; i < params.values.size(); ++i)
        params.values[i] -= opt.lr * lg.grad.values[i];
      loss_sum += lg.loss;
      ++res.steps;
    }
  }
  res.mean_loss = res.steps ? loss_sum / static_cast<double>(res.steps) : 0.0;
  res.params = std::move(params);
  return res;
}

}  // namespace fedaudio
