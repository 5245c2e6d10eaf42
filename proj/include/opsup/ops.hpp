#pragma once

// Differentiable tensor operations.
//
// Each op supplies three things: the forward value, a reverse rule and a
// tangent rule. Both rules are written in terms of other ops in this file, so
// gradients of gradients and gradients of tangents come out exact.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "opsup/tensor.hpp"

namespace opsup {

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

inline IndexMap make_index_map(std::vector<std::int64_t> idx) {
  return std::make_shared<const std::vector<std::int64_t>>(std::move(idx));
}

inline Tensor add(const Tensor& a, const Tensor& b);
inline Tensor sub(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor scale(const Tensor& x, double c);
inline Tensor neg(const Tensor& x);
inline Tensor add_scalar(const Tensor& x, double c);
inline Tensor tanh(const Tensor& x);
inline Tensor sin(const Tensor& x);
inline Tensor cos(const Tensor& x);
inline Tensor relu(const Tensor& x);
inline Tensor exp(const Tensor& x);
inline Tensor log(const Tensor& x);
inline Tensor square(const Tensor& x);
inline Tensor pow_scalar(const Tensor& x, double p);
inline Tensor sign(const Tensor& x);
inline Tensor clip(const Tensor& x, double lo, double hi);
inline Tensor sum(const Tensor& x);
inline Tensor mean(const Tensor& x);
inline Tensor reshape(const Tensor& x, Shape shape);
inline Tensor gather(const Tensor& x, const IndexMap& idx, Shape shape);
inline Tensor scatter_add(const Tensor& x, const IndexMap& idx, Shape shape);
inline Tensor concat(const std::vector<Tensor>& parts);
inline Tensor matmul(const Tensor& a, const Tensor& b);
inline Tensor transpose2d(const Tensor& x);
inline Tensor dot(const Tensor& a, const Tensor& b);
inline Tensor expand(const Tensor& scalar, Shape shape);
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows);
inline Tensor broadcast_cols(const Tensor& c, std::size_t cols);
inline Tensor conv2d(const Tensor& input, const Tensor& kernels);
inline Tensor conv2d_kernel_adjoint(const Tensor& kernels);
inline Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, std::size_t kh, std::size_t kw);
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
inline Tensor logsumexp(const Tensor& x);
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

namespace detail {

using TangentFn = std::function<std::optional<Tensor>(const std::vector<std::optional<Tensor>>&)>;

inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents, BackwardFn backward, TangentFn tangent) {
  auto node = new_node(std::move(shape), std::move(data), op);
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  std::optional<Tensor> t;
  if (forward_ad_enabled() && tangent) {
    std::vector<std::optional<Tensor>> tangents;
    tangents.reserve(parents.size());
    bool any = false;
    for (const auto& p : parents) {
      tangents.push_back(p.tangent());
      any = any || tangents.back().has_value();
    }
    if (any) {
      ForwardModeGuard pause(false);
      t = tangent(tangents);
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  if (t) {
    if (t->shape() != node->shape) {
      throw DimensionError(std::string("tangent of ") + op + " has shape " + shape_str(t->shape()) +
                           ", expected " + shape_str(node->shape));
    }
    node->tangent = t->node();
  }
  return Tensor(std::move(node));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline std::optional<Tensor> sum_opt(std::optional<Tensor> a, std::optional<Tensor> b) {
  if (!a) return b;
  if (!b) return a;
  return add(*a, *b);
}

inline Tensor constant_like(const Tensor& x, std::vector<double> values) {
  return Tensor::from_data(x.shape(), std::move(values));
}

template <class F>
std::vector<double> map_values(const Tensor& x, F&& f) {
  auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = f(d[i]);
  return out;
}

// Zero-padded patches: row (i*kh + a)*kw + b holds input channel i shifted
// by (a - kh/2, b - kw/2) over all h*w positions. Turns both convolution
// kernels below into long contiguous loops, which matters because folded
// maps are tall and only a few columns wide.
inline std::vector<double> im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w,
                                  std::size_t kh, std::size_t kw) {
  const auto rh = static_cast<std::ptrdiff_t>(kh / 2);
  const auto rw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  const std::size_t hw = h * w;
  std::vector<double> col(cin * kh * kw * hw, 0.0);
  for (std::size_t i = 0; i < cin; ++i) {
    const double* x_i = x + i * hw;
    for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(kh); ++a) {
      const std::ptrdiff_t dy = a - rh;
      const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
      const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(H, H - dy);
      for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(kw); ++b) {
        const std::ptrdiff_t dz = b - rw;
        const std::ptrdiff_t z0 = std::max<std::ptrdiff_t>(0, -dz);
        const std::ptrdiff_t z1 = std::min<std::ptrdiff_t>(W, W - dz);
        double* row = col.data() + ((i * kh + static_cast<std::size_t>(a)) * kw + static_cast<std::size_t>(b)) * hw;
        for (std::ptrdiff_t y = y0; y < y1; ++y)
          for (std::ptrdiff_t z = z0; z < z1; ++z) row[y * W + z] = x_i[(y + dy) * W + z + dz];
      }
    }
  }
  return col;
}

inline void conv2d_raw(const double* x, std::size_t cin, std::size_t h, std::size_t w,
                       const double* k, std::size_t cout, std::size_t kh, std::size_t kw,
                       double* out) {
  const std::size_t hw = h * w, rows = cin * kh * kw;
  std::vector<double> patches;
  const double* col = x;
  if (kh * kw != 1) {
    patches = im2col(x, cin, h, w, kh, kw);
    col = patches.data();
  }
  // four patch rows per pass: one load/store of the output row per four
  // multiply-adds instead of per one
  for (std::size_t o = 0; o < cout; ++o) {
    double* out_o = out + o * hw;
    const double* k_o = k + o * rows;
    std::size_t r = 0;
    for (; r + 4 <= rows; r += 4) {
      const double w0 = k_o[r], w1 = k_o[r + 1], w2 = k_o[r + 2], w3 = k_o[r + 3];
      const double* s0 = col + r * hw;
      const double* s1 = s0 + hw;
      const double* s2 = s1 + hw;
      const double* s3 = s2 + hw;
      for (std::size_t j = 0; j < hw; ++j) out_o[j] += (w0 * s0[j] + w1 * s1[j]) + (w2 * s2[j] + w3 * s3[j]);
    }
    for (; r < rows; ++r) {
      const double wv = k_o[r];
      const double* src = col + r * hw;
      for (std::size_t j = 0; j < hw; ++j) out_o[j] += wv * src[j];
    }
  }
}

// out[o, i, a, b] = sum over positions of g[o] * (input i shifted by a, b).
inline void conv2d_kernel_grad_raw(const double* x, std::size_t cin, std::size_t h, std::size_t w,
                                   const double* g, std::size_t cout, std::size_t kh,
                                   std::size_t kw, double* out) {
  const std::size_t hw = h * w, rows = cin * kh * kw;
  std::vector<double> patches;
  const double* col = x;
  if (kh * kw != 1) {
    patches = im2col(x, cin, h, w, kh, kw);
    col = patches.data();
  }
  // fixed-lane partial sums let the compiler vectorize the reductions
  constexpr std::size_t L = 4;
  const std::size_t main = hw - hw % L;
  for (std::size_t o = 0; o < cout; ++o) {
    const double* g_o = g + o * hw;
    std::size_t r = 0;
    for (; r + 2 <= rows; r += 2) {
      const double* s0 = col + r * hw;
      const double* s1 = s0 + hw;
      double a[L] = {}, b[L] = {};
      for (std::size_t j = 0; j < main; j += L) {
        for (std::size_t l = 0; l < L; ++l) {
          a[l] += g_o[j + l] * s0[j + l];
          b[l] += g_o[j + l] * s1[j + l];
        }
      }
      double ta = (a[0] + a[1]) + (a[2] + a[3]), tb = (b[0] + b[1]) + (b[2] + b[3]);
      for (std::size_t j = main; j < hw; ++j) {
        ta += g_o[j] * s0[j];
        tb += g_o[j] * s1[j];
      }
      out[o * rows + r] = ta;
      out[o * rows + r + 1] = tb;
    }
    for (; r < rows; ++r) {
      const double* src = col + r * hw;
      double a[L] = {};
      for (std::size_t j = 0; j < main; j += L)
        for (std::size_t l = 0; l < L; ++l) a[l] += g_o[j + l] * src[j + l];
      double t = (a[0] + a[1]) + (a[2] + a[3]);
      for (std::size_t j = main; j < hw; ++j) t += g_o[j] * src[j];
      out[o * rows + r] = t;
    }
  }
}

inline void check_conv_kernel(std::size_t kh, std::size_t kw) {
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ConfigError("same-padding convolution needs odd kernel sizes, got " + std::to_string(kh) +
                      "x" + std::to_string(kw));
  }
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return detail::make_result(
      "add", a.shape(), std::move(out), {a, b},
      [](const Tensor& g) { return std::vector<Tensor>{g, g}; },
      [](const auto& t) { return detail::sum_opt(t[0], t[1]); });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return detail::make_result(
      "sub", a.shape(), std::move(out), {a, b},
      [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; },
      [](const auto& t) {
        return detail::sum_opt(t[0], t[1] ? std::optional<Tensor>(neg(*t[1])) : std::nullopt);
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return detail::make_result(
      "mul", a.shape(), std::move(out), {a, b},
      [a, b](const Tensor& g) { return std::vector<Tensor>{mul(g, b), mul(g, a)}; },
      [a, b](const auto& t) {
        return detail::sum_opt(t[0] ? std::optional<Tensor>(mul(*t[0], b)) : std::nullopt,
                               t[1] ? std::optional<Tensor>(mul(a, *t[1])) : std::nullopt);
      });
}

inline Tensor scale(const Tensor& x, double c) {
  auto out = detail::map_values(x, [c](double v) { return c * v; });
  return detail::make_result(
      "scale", x.shape(), std::move(out), {x},
      [c](const Tensor& g) { return std::vector<Tensor>{scale(g, c)}; },
      [c](const auto& t) { return std::optional<Tensor>(scale(*t[0], c)); });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double c) {
  auto out = detail::map_values(x, [c](double v) { return v + c; });
  return detail::make_result(
      "add_scalar", x.shape(), std::move(out), {x},
      [](const Tensor& g) { return std::vector<Tensor>{g}; },
      [](const auto& t) { return t[0]; });
}

inline Tensor tanh(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return std::tanh(v); });
  // d tanh = 1 - tanh^2, rebuilt from x so higher derivatives stay exact
  auto deriv = [x]() { return add_scalar(neg(square(tanh(x))), 1.0); };
  return detail::make_result(
      "tanh", x.shape(), std::move(out), {x},
      [deriv](const Tensor& g) { return std::vector<Tensor>{mul(g, deriv())}; },
      [deriv](const auto& t) { return std::optional<Tensor>(mul(*t[0], deriv())); });
}

inline Tensor sin(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return std::sin(v); });
  return detail::make_result(
      "sin", x.shape(), std::move(out), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{mul(g, cos(x))}; },
      [x](const auto& t) { return std::optional<Tensor>(mul(*t[0], cos(x))); });
}

inline Tensor cos(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return std::cos(v); });
  return detail::make_result(
      "cos", x.shape(), std::move(out), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{mul(g, neg(sin(x)))}; },
      [x](const auto& t) { return std::optional<Tensor>(mul(*t[0], neg(sin(x)))); });
}

inline Tensor relu(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return v > 0.0 ? v : 0.0; });
  Tensor mask = detail::constant_like(x, detail::map_values(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  return detail::make_result(
      "relu", x.shape(), std::move(out), {x},
      [mask](const Tensor& g) { return std::vector<Tensor>{mul(g, mask)}; },
      [mask](const auto& t) { return std::optional<Tensor>(mul(*t[0], mask)); });
}

inline Tensor exp(const Tensor& x) {
  auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    out[i] = std::exp(d[i]);
    if (!std::isfinite(out[i])) {
      throw NumericError("exp overflow at index " + std::to_string(i) + " (x=" + std::to_string(d[i]) + ")");
    }
  }
  return detail::make_result(
      "exp", x.shape(), std::move(out), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(x))}; },
      [x](const auto& t) { return std::optional<Tensor>(mul(*t[0], exp(x))); });
}

inline Tensor log(const Tensor& x) {
  auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(d[i] > 0.0)) {
      throw NumericError("log of non-positive value at index " + std::to_string(i) + " (x=" +
                         std::to_string(d[i]) + ")");
    }
    out[i] = std::log(d[i]);
  }
  return detail::make_result(
      "log", x.shape(), std::move(out), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{mul(g, pow_scalar(x, -1.0))}; },
      [x](const auto& t) { return std::optional<Tensor>(mul(*t[0], pow_scalar(x, -1.0))); });
}

inline Tensor square(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return v * v; });
  return detail::make_result(
      "square", x.shape(), std::move(out), {x},
      [x](const Tensor& g) { return std::vector<Tensor>{mul(g, scale(x, 2.0))}; },
      [x](const auto& t) { return std::optional<Tensor>(mul(*t[0], scale(x, 2.0))); });
}

inline Tensor pow_scalar(const Tensor& x, double p) {
  auto d = x.data();
  const bool integral = p == std::round(p);
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if ((d[i] < 0.0 && !integral) || (d[i] == 0.0 && p < 0.0)) {
      throw NumericError("pow(" + std::to_string(d[i]) + ", " + std::to_string(p) +
                         ") undefined at index " + std::to_string(i));
    }
    out[i] = std::pow(d[i], p);
  }
  return detail::make_result(
      "pow", x.shape(), std::move(out), {x},
      [x, p](const Tensor& g) {
        return std::vector<Tensor>{mul(g, scale(pow_scalar(x, p - 1.0), p))};
      },
      [x, p](const auto& t) {
        return std::optional<Tensor>(mul(*t[0], scale(pow_scalar(x, p - 1.0), p)));
      });
}

// Zero derivative everywhere.
inline Tensor sign(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
  return detail::make_result(
      "sign", x.shape(), std::move(out), {x},
      [x](const Tensor&) { return std::vector<Tensor>{Tensor::zeros(x.shape())}; },
      [](const auto&) { return std::optional<Tensor>(); });
}

// Pass-through derivative inside [lo, hi], zero outside.
inline Tensor clip(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clip bounds inverted");
  auto out = detail::map_values(x, [lo, hi](double v) { return std::clamp(v, lo, hi); });
  Tensor mask = detail::constant_like(
      x, detail::map_values(x, [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }));
  return detail::make_result(
      "clip", x.shape(), std::move(out), {x},
      [mask](const Tensor& g) { return std::vector<Tensor>{mul(g, mask)}; },
      [mask](const auto& t) { return std::optional<Tensor>(mul(*t[0], mask)); });
}

// ---- reductions and shape ---------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_result(
      "sum", {}, {acc}, {x},
      [x](const Tensor& g) { return std::vector<Tensor>{expand(g, x.shape())}; },
      [](const auto& t) { return std::optional<Tensor>(sum(*t[0])); });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto values = x.to_vector();
  Shape in_shape = x.shape();
  return detail::make_result(
      "reshape", shape, std::move(values), {x},
      [in_shape](const Tensor& g) { return std::vector<Tensor>{reshape(g, in_shape)}; },
      [shape](const auto& t) { return std::optional<Tensor>(reshape(*t[0], shape)); });
}

/// out[j] = x[idx[j]], or 0 where idx[j] < 0.
inline Tensor gather(const Tensor& x, const IndexMap& idx, Shape shape) {
  const auto& m = *idx;
  if (m.size() != shape_numel(shape)) {
    throw DimensionError("gather map of length " + std::to_string(m.size()) + " for shape " + shape_str(shape));
  }
  auto d = x.data();
  std::vector<double> out(m.size(), 0.0);
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (m[j] >= 0) {
      if (static_cast<std::size_t>(m[j]) >= d.size()) throw DimensionError("gather index out of range");
      out[j] = d[static_cast<std::size_t>(m[j])];
    }
  }
  Shape in_shape = x.shape();
  return detail::make_result(
      "gather", shape, std::move(out), {x},
      [idx, in_shape](const Tensor& g) { return std::vector<Tensor>{scatter_add(g, idx, in_shape)}; },
      [idx, shape](const auto& t) { return std::optional<Tensor>(gather(*t[0], idx, shape)); });
}

/// out[idx[j]] += x[j]; entries with idx[j] < 0 are dropped. Adjoint of gather.
inline Tensor scatter_add(const Tensor& x, const IndexMap& idx, Shape shape) {
  const auto& m = *idx;
  if (m.size() != x.numel()) {
    throw DimensionError("scatter map of length " + std::to_string(m.size()) + " for input " +
                         shape_str(x.shape()));
  }
  auto d = x.data();
  std::vector<double> out(shape_numel(shape), 0.0);
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (m[j] >= 0) {
      if (static_cast<std::size_t>(m[j]) >= out.size()) throw DimensionError("scatter index out of range");
      out[static_cast<std::size_t>(m[j])] += d[j];
    }
  }
  Shape in_shape = x.shape();
  return detail::make_result(
      "scatter_add", shape, std::move(out), {x},
      [idx, in_shape](const Tensor& g) { return std::vector<Tensor>{gather(g, idx, in_shape)}; },
      [idx, shape](const auto& t) { return std::optional<Tensor>(scatter_add(*t[0], idx, shape)); });
}

/// Concatenation along the leading axis.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat of nothing");
  Shape tail(parts[0].shape().begin() + (parts[0].dim() ? 1 : 0), parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.dim() == 0) throw DimensionError("concat of a 0-d tensor");
    Shape ptail(p.shape().begin() + 1, p.shape().end());
    if (ptail != tail) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(parts[0].shape()));
    }
    lead += p.size(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<Shape> part_shapes;
  for (const auto& p : parts) part_shapes.push_back(p.shape());
  return detail::make_result(
      "concat", shape, std::move(out), parts,
      [part_shapes](const Tensor& g) {
        std::vector<Tensor> grads;
        std::int64_t offset = 0;
        for (const auto& s : part_shapes) {
          std::vector<std::int64_t> m(shape_numel(s));
          std::iota(m.begin(), m.end(), offset);
          offset += static_cast<std::int64_t>(m.size());
          grads.push_back(gather(g, make_index_map(std::move(m)), s));
        }
        return grads;
      },
      [part_shapes](const auto& t) {
        std::vector<Tensor> tp;
        for (std::size_t i = 0; i < t.size(); ++i) tp.push_back(t[i] ? *t[i] : Tensor::zeros(part_shapes[i]));
        return std::optional<Tensor>(concat(tp));
      });
}

inline Tensor expand(const Tensor& scalar, Shape shape) {
  if (scalar.numel() != 1) throw DimensionError("expand needs a single-element tensor, got " + shape_str(scalar.shape()));
  auto m = make_index_map(std::vector<std::int64_t>(shape_numel(shape), 0));
  return gather(scalar, m, std::move(shape));
}

/// v[d] -> [rows, d], every row a copy of v.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  const std::size_t d = v.numel();
  std::vector<std::int64_t> m(rows * d);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) m[r * d + j] = static_cast<std::int64_t>(j);
  return gather(v, make_index_map(std::move(m)), {rows, d});
}

/// c[n] or c[n,1] -> [n, cols], every column a copy of c.
inline Tensor broadcast_cols(const Tensor& c, std::size_t cols) {
  const std::size_t n = c.numel();
  std::vector<std::int64_t> m(n * cols);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < cols; ++j) m[r * cols + j] = static_cast<std::int64_t>(r);
  return gather(c, make_index_map(std::move(m)), {n, cols});
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.dim() != 2) throw DimensionError("transpose2d needs a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.size(0), c = x.size(1);
  std::vector<std::int64_t> m(r * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < r; ++j) m[i * r + j] = static_cast<std::int64_t>(j * c + i);
  return gather(x, make_index_map(std::move(m)), {c, r});
}

// ---- linear algebra ---------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = da[i * k + p];
      const double* brow = db.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{matmul(g, transpose2d(b)), matmul(transpose2d(a), g)};
      },
      [a, b](const auto& t) {
        return detail::sum_opt(t[0] ? std::optional<Tensor>(matmul(*t[0], b)) : std::nullopt,
                               t[1] ? std::optional<Tensor>(matmul(a, *t[1])) : std::nullopt);
      });
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// ---- convolution ------------------------------------------------------------

/// Same-padded 2D cross-correlation: input [c_in,h,w], kernels [c_out,c_in,kh,kw].
inline Tensor conv2d(const Tensor& input, const Tensor& kernels) {
  if (input.dim() != 3 || kernels.dim() != 4 || kernels.size(1) != input.size(0)) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " with kernels " +
                         shape_str(kernels.shape()));
  }
  const std::size_t cin = input.size(0), h = input.size(1), w = input.size(2);
  const std::size_t cout = kernels.size(0), kh = kernels.size(2), kw = kernels.size(3);
  detail::check_conv_kernel(kh, kw);
  std::vector<double> out(cout * h * w, 0.0);
  detail::conv2d_raw(input.data().data(), cin, h, w, kernels.data().data(), cout, kh, kw, out.data());
  return detail::make_result(
      "conv2d", {cout, h, w}, std::move(out), {input, kernels},
      [input, kernels, kh, kw](const Tensor& g) {
        return std::vector<Tensor>{conv2d(g, conv2d_kernel_adjoint(kernels)),
                                   conv2d_kernel_grad(input, g, kh, kw)};
      },
      [input, kernels](const auto& t) {
        return detail::sum_opt(t[0] ? std::optional<Tensor>(conv2d(*t[0], kernels)) : std::nullopt,
                               t[1] ? std::optional<Tensor>(conv2d(input, *t[1])) : std::nullopt);
      });
}

/// Spatially flipped, channel-transposed kernels: the adjoint of conv2d in its input.
inline Tensor conv2d_kernel_adjoint(const Tensor& kernels) {
  if (kernels.dim() != 4) throw DimensionError("kernel adjoint of " + shape_str(kernels.shape()));
  const std::size_t co = kernels.size(0), ci = kernels.size(1), kh = kernels.size(2), kw = kernels.size(3);
  std::vector<std::int64_t> m(co * ci * kh * kw);
  for (std::size_t i = 0; i < ci; ++i)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t b = 0; b < kw; ++b)
          m[((i * co + o) * kh + a) * kw + b] =
              static_cast<std::int64_t>(((o * ci + i) * kh + (kh - 1 - a)) * kw + (kw - 1 - b));
  return gather(kernels, make_index_map(std::move(m)), {ci, co, kh, kw});
}

/// Gradient of conv2d with respect to its kernels, given the output gradient.
inline Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, std::size_t kh, std::size_t kw) {
  if (input.dim() != 3 || grad_out.dim() != 3 || input.size(1) != grad_out.size(1) ||
      input.size(2) != grad_out.size(2)) {
    throw DimensionError("conv2d_kernel_grad: " + shape_str(input.shape()) + " vs " + shape_str(grad_out.shape()));
  }
  detail::check_conv_kernel(kh, kw);
  const std::size_t cin = input.size(0), h = input.size(1), w = input.size(2), cout = grad_out.size(0);
  std::vector<double> out(cout * cin * kh * kw, 0.0);
  detail::conv2d_kernel_grad_raw(input.data().data(), cin, h, w, grad_out.data().data(), cout, kh, kw, out.data());
  return detail::make_result(
      "conv2d_kernel_grad", {cout, cin, kh, kw}, std::move(out), {input, grad_out},
      [input, grad_out](const Tensor& g) {
        return std::vector<Tensor>{conv2d(grad_out, conv2d_kernel_adjoint(g)), conv2d(input, g)};
      },
      [input, grad_out, kh, kw](const auto& t) {
        return detail::sum_opt(
            t[0] ? std::optional<Tensor>(conv2d_kernel_grad(*t[0], grad_out, kh, kw)) : std::nullopt,
            t[1] ? std::optional<Tensor>(conv2d_kernel_grad(input, *t[1], kh, kw)) : std::nullopt);
      });
}

/// x[C,H,W] + bias[C] broadcast over positions.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.dim() != 3 || bias.numel() != x.size(0)) {
    throw DimensionError("channel bias " + shape_str(bias.shape()) + " for " + shape_str(x.shape()));
  }
  const std::size_t c = x.size(0), hw = x.size(1) * x.size(2);
  std::vector<std::int64_t> m(c * hw);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < hw; ++j) m[i * hw + j] = static_cast<std::int64_t>(i);
  return add(x, gather(bias, make_index_map(std::move(m)), x.shape()));
}

// ---- composites ---------------------------------------------------------------

/// Stabilized log(sum(exp(x))); the shift is a constant so the derivative is unaffected.
inline Tensor logsumexp(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("logsumexp of empty tensor");
  const auto d = x.data();
  const double shift = *std::max_element(d.begin(), d.end());
  return add_scalar(log(sum(exp(add_scalar(x, -shift)))), shift);
}

/// Normalizes each row of x ([d] or [n,d]) to zero mean and unit (population)
/// variance, then applies gain and bias. Zero-variance rows map to bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const bool vec = x.dim() == 1;
  if (!vec && x.dim() != 2) throw DimensionError("layer_norm expects [d] or [n,d], got " + shape_str(x.shape()));
  const std::size_t d = vec ? x.size(0) : x.size(1);
  const std::size_t n = vec ? 1 : x.size(0);
  if (d < 2) throw ContractError("layer_norm needs d >= 2");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " for width " + std::to_string(d));
  }
  Tensor rows = reshape(x, {n, d});
  Tensor avg = Tensor::full({d, 1}, 1.0 / static_cast<double>(d));
  Tensor centered = sub(rows, broadcast_cols(matmul(rows, avg), d));
  Tensor var = matmul(square(centered), avg);
  Tensor inv_std = pow_scalar(add_scalar(var, eps), -0.5);
  Tensor normed = mul(centered, broadcast_cols(inv_std, d));
  Tensor out = add(mul(normed, broadcast_rows(gain, n)), broadcast_rows(bias, n));
  return vec ? reshape(out, {d}) : out;
}

/// Magnitude spectrum |X_k|, k = 0..floor(T/2), of a real signal. Off-tape.
inline Tensor rfft_magnitudes(const Tensor& x) {
  const std::size_t T = x.numel();
  if (T < 4) throw ContractError("rfft_magnitudes needs T >= 4, got " + std::to_string(T));
  auto d = x.data();
  const std::size_t bins = T / 2 + 1;
  std::vector<double> cos_t(T), sin_t(T);
  for (std::size_t n = 0; n < T; ++n) {
    const double ang = 2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(T);
    cos_t[n] = std::cos(ang);
    sin_t[n] = std::sin(ang);
  }
  std::vector<double> mag(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    double re = 0.0, im = 0.0;
    std::size_t phase = 0;
    for (std::size_t n = 0; n < T; ++n) {
      re += d[n] * cos_t[phase];
      im -= d[n] * sin_t[phase];
      phase += k;
      if (phase >= T) phase -= T;
    }
    mag[k] = std::hypot(re, im);
  }
  return Tensor::vector(std::move(mag));
}

}  // namespace opsup
