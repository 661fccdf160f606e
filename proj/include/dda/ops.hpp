#pragma once

// Differentiable tensor operations used by every model and loss in the
// library. Each op computes its forward value eagerly and records a backward
// closure through make_result().

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "dda/autograd.hpp"

namespace dda::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline bool needs(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline Tensor& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

/// (batch, channels, spatial) view of a rank-2 [N,C] or rank-4 [N,C,H,W] tensor.
struct ChannelLayout {
  std::size_t n, c, s;
};

inline ChannelLayout channel_layout(const Tensor& x) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw ShapeError("channel op expects rank 2 or 4, got " + to_string(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::needs(self, k)) continue;
      auto& g = detail::pgrad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (detail::needs(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::needs(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::needs(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::needs(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + s;
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Weighted sum of same-shaped terms: sum_k w_k * terms_k.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights mismatch");
  Tensor out(terms[0].shape());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    detail::require_same_shape(terms[0], terms[k], "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * terms[k].value()[i];
  }
  return make_result(std::move(out), terms, [weights](Node& self) {
    for (std::size_t k = 0; k < weights.size(); ++k) {
      if (!detail::needs(self, k)) continue;
      auto& g = detail::pgrad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[k] * self.grad[i];
    }
  });
}

inline Var relu(const Var& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.value()[i]);
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& x = self.parents[0]->value;
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) g[i] += self.grad[i];
  });
}

inline Var leaky_relu(const Var& a, double slope) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.value()[i];
    out[i] = x > 0.0 ? x : slope * x;
  }
  return make_result(std::move(out), {a}, [slope](Node& self) {
    const auto& x = self.parents[0]->value;
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (x[i] > 0.0 ? 1.0 : slope);
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.value()[i]));
  return make_result(out, {a}, [out](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * out[i] * (1.0 - out[i]);
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& self) {
    auto& g = detail::pgrad(self, 0);
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Unsquared Euclidean norm of all elements.
inline Var norm2(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const double n = std::sqrt(s);
  return make_result(Tensor::scalar(n), {a}, [n](Node& self) {
    if (n == 0.0) return;
    const auto& x = self.parents[0]->value;
    auto& g = detail::pgrad(self, 0);
    const double up = self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * x[i];
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Constant per-channel affine map out = x * mul[c] + add[c] (input normalization).
inline Var affine_channels(const Var& x, const std::vector<double>& mul, const std::vector<double>& add) {
  const auto l = detail::channel_layout(x.value());
  if (mul.size() != l.c || add.size() != l.c) throw ShapeError("affine_channels: coefficient count mismatch");
  Tensor out(x.shape());
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t c = 0; c < l.c; ++c)
      for (std::size_t q = 0; q < l.s; ++q) {
        const std::size_t i = (b * l.c + c) * l.s + q;
        out[i] = x.value()[i] * mul[c] + add[c];
      }
  return make_result(std::move(out), {x}, [l, mul](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t b = 0; b < l.n; ++b)
      for (std::size_t c = 0; c < l.c; ++c)
        for (std::size_t q = 0; q < l.s; ++q) {
          const std::size_t i = (b * l.c + c) * l.s + q;
          g[i] += self.grad[i] * mul[c];
        }
  });
}

// ---------------------------------------------------------------------------
// Batch manipulation

/// Concatenates tensors along the leading (batch) dimension.
inline Var concat_batch(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape ref(shape.begin() + 1, shape.end());
    if (tail != ref) throw ShapeError("concat_batch: trailing shape mismatch " + to_string(p.shape()));
    rows += p.shape()[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    std::copy(p.value().data().begin(), p.value().data().end(), out.ptr() + offset);
    offset += p.size();
  }
  return make_result(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      if (!detail::needs(self, k)) continue;
      auto& g = detail::pgrad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
    }
  });
}

/// Concatenates rank-2 tensors [N, d_k] along the feature dimension.
inline Var concat_features(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_features: no inputs");
  const std::size_t n = parts[0].shape().at(0);
  std::size_t width = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_features");
    if (p.shape()[0] != n) throw ShapeError("concat_features: batch mismatch");
    offsets.push_back(width);
    width += p.shape()[1];
  }
  Tensor out({n, width});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].shape()[1];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * width + offsets[k] + j] = parts[k].value()[i * w + j];
  }
  return make_result(std::move(out), parts, [offsets, width, n](Node& self) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      if (!detail::needs(self, k)) continue;
      auto& g = detail::pgrad(self, k);
      const std::size_t w = g.size() / n;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * width + offsets[k] + j];
    }
  });
}

/// Selects leading-dimension slices by index.
inline Var take_rows(const Var& a, const std::vector<std::size_t>& rows) {
  Shape shape = a.shape();
  const std::size_t row = a.value().row_size();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.shape()[0]) throw ShapeError("take_rows: index out of range");
    std::copy_n(a.value().ptr() + rows[i] * row, row, out.ptr() + i * row);
  }
  return make_result(std::move(out), {a}, [rows, row](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) g[rows[i] * row + j] += self.grad[i * row + j];
  });
}

/// Gather with additive offset and clamping: out[j] = clamp(x[src[j]] + offset[j], lo, hi),
/// where src[j] < 0 reads a zero. Expresses flips, crops, padding and brightness shifts.
inline Var remap(const Var& a, std::vector<long> src, std::vector<double> offset, double lo, double hi) {
  if (src.size() != a.size() || offset.size() != a.size()) throw ShapeError("remap: map size mismatch");
  Tensor out(a.shape());
  std::vector<char> pass(a.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double v = (src[j] >= 0 ? a.value()[static_cast<std::size_t>(src[j])] : 0.0) + offset[j];
    out[j] = std::clamp(v, lo, hi);
    pass[j] = src[j] >= 0 && v > lo && v < hi;
  }
  return make_result(std::move(out), {a}, [src = std::move(src), pass = std::move(pass)](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t j = 0; j < src.size(); ++j)
      if (pass[j]) g[static_cast<std::size_t>(src[j])] += self.grad[j];
  });
}

// ---------------------------------------------------------------------------
// Dense layers

/// y = x W^T + b with x [N,in], W [out,in], b [out] (b may be undefined).
inline Var linear(const Var& x, const Var& w, const Var& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) {
    throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " + to_string(w.shape()));
  }
  Tensor out({n, out_dim});
  detail::MapMat y(out.ptr(), n, out_dim);
  y.noalias() = detail::CMapMat(x.value().ptr(), n, in) * detail::CMapMat(w.value().ptr(), out_dim, in).transpose();
  if (b.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += b.value()[j];
  }
  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result(std::move(out), parents, [n, in, out_dim](Node& self) {
    detail::CMapMat dy(self.grad.ptr(), n, out_dim);
    if (detail::needs(self, 0)) {
      detail::MapMat dx(detail::pgrad(self, 0).ptr(), n, in);
      dx.noalias() += dy * detail::CMapMat(self.parents[1]->value.ptr(), out_dim, in);
    }
    if (detail::needs(self, 1)) {
      detail::MapMat dw(detail::pgrad(self, 1).ptr(), out_dim, in);
      dw.noalias() += dy.transpose() * detail::CMapMat(self.parents[0]->value.ptr(), n, in);
    }
    if (self.parents.size() > 2 && detail::needs(self, 2)) {
      auto& db = detail::pgrad(self, 2);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) db[j] += dy(i, j);
    }
  });
}

/// Stride-1 2-D convolution with zero padding. x [N,C,H,W], w [O,C,k,k], b [O].
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t pad) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const std::size_t o = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != c || w.shape()[3] != k) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  }
  if (h + 2 * pad < k || wd + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  const std::size_t p = ho * wo, ckk = c * k * k, cols = n * p;

  // im2col: rows = (channel, ky, kx), columns = (sample, oy, ox)
  auto col = std::make_shared<std::vector<double>>(ckk * cols, 0.0);
  const double* xv = x.value().ptr();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col->data() + ((ci * k + ky) * k + kx) * cols;
        for (std::size_t s = 0; s < n; ++s) {
          const double* img = xv + (s * c + ci) * h * wd;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              row[s * p + oy * wo + ox] = img[iy * static_cast<long>(wd) + ix];
            }
          }
        }
      }

  detail::RowMat res = detail::CMapMat(w.value().ptr(), o, ckk) * detail::CMapMat(col->data(), ckk, cols);
  Tensor out({n, o, ho, wo});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const double bias = b.defined() ? b.value()[oc] : 0.0;
      double* dst = out.ptr() + (s * o + oc) * p;
      const double* srcp = res.data() + oc * cols + s * p;
      for (std::size_t q = 0; q < p; ++q) dst[q] = srcp[q] + bias;
    }

  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result(std::move(out), parents, [=](Node& self) {
    detail::RowMat dout(o, cols);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t oc = 0; oc < o; ++oc) {
        const double* g = self.grad.ptr() + (s * o + oc) * p;
        std::copy_n(g, p, dout.data() + oc * cols + s * p);
      }
    if (detail::needs(self, 1)) {
      detail::MapMat dw(detail::pgrad(self, 1).ptr(), o, ckk);
      dw.noalias() += dout * detail::CMapMat(col->data(), ckk, cols).transpose();
    }
    if (self.parents.size() > 2 && detail::needs(self, 2)) {
      auto& db = detail::pgrad(self, 2);
      for (std::size_t oc = 0; oc < o; ++oc) db[oc] += dout.row(oc).sum();
    }
    if (detail::needs(self, 0)) {
      detail::RowMat dcol = detail::CMapMat(self.parents[1]->value.ptr(), o, ckk).transpose() * dout;
      double* dx = detail::pgrad(self, 0).ptr();
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double* row = dcol.data() + ((ci * k + ky) * k + kx) * cols;
            for (std::size_t s = 0; s < n; ++s) {
              double* img = dx + (s * c + ci) * h * wd;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  img[iy * static_cast<long>(wd) + ix] += row[s * p + oy * wo + ox];
                }
              }
            }
          }
    }
  });
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols are dropped).
inline Var avg_pool2(const Var& x) {
  detail::require_rank(x, 4, "avg_pool2");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  const double* xv = x.value().ptr();
  for (std::size_t m = 0; m < n * c; ++m)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const double* base = xv + m * h * w + 2 * i * w + 2 * j;
        out[m * ho * wo + i * wo + j] = 0.25 * (base[0] + base[1] + base[w] + base[w + 1]);
      }
  return make_result(std::move(out), {x}, [n, c, h, w, ho, wo](Node& self) {
    double* g = detail::pgrad(self, 0).ptr();
    for (std::size_t m = 0; m < n * c; ++m)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          const double up = 0.25 * self.grad[m * ho * wo + i * wo + j];
          double* base = g + m * h * w + 2 * i * w + 2 * j;
          base[0] += up;
          base[1] += up;
          base[w] += up;
          base[w + 1] += up;
        }
  });
}

/// Mean over spatial positions: [N,C,H,W] -> [N,C].
inline Var global_avg_pool(const Var& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.shape()[0], c = x.shape()[1], s = x.shape()[2] * x.shape()[3];
  Tensor out({n, c});
  for (std::size_t m = 0; m < n * c; ++m) {
    double acc = 0.0;
    for (std::size_t q = 0; q < s; ++q) acc += x.value()[m * s + q];
    out[m] = acc / static_cast<double>(s);
  }
  return make_result(std::move(out), {x}, [n, c, s](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t m = 0; m < n * c; ++m) {
      const double up = self.grad[m] / static_cast<double>(s);
      for (std::size_t q = 0; q < s; ++q) g[m * s + q] += up;
    }
  });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2(const Var& x) {
  detail::require_rank(x, 4, "upsample2");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor out({n, c, 2 * h, 2 * w});
  for (std::size_t m = 0; m < n * c; ++m)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        out[m * 4 * h * w + i * 2 * w + j] = x.value()[m * h * w + (i / 2) * w + j / 2];
  return make_result(std::move(out), {x}, [n, c, h, w](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t m = 0; m < n * c; ++m)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) g[m * h * w + (i / 2) * w + j / 2] += self.grad[m * 4 * h * w + i * 2 * w + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel mean over batch and spatial positions.
inline Var channel_mean(const Var& x) {
  const auto l = detail::channel_layout(x.value());
  const double m = static_cast<double>(l.n * l.s);
  Tensor out({l.c});
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) out[ch] += x.value()[(b * l.c + ch) * l.s + q];
  for (std::size_t ch = 0; ch < l.c; ++ch) out[ch] /= m;
  return make_result(std::move(out), {x}, [l, m](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t b = 0; b < l.n; ++b)
      for (std::size_t ch = 0; ch < l.c; ++ch)
        for (std::size_t q = 0; q < l.s; ++q) g[(b * l.c + ch) * l.s + q] += self.grad[ch] / m;
  });
}

/// Per-channel biased variance over batch and spatial positions.
inline Var channel_var(const Var& x) {
  const auto l = detail::channel_layout(x.value());
  const double m = static_cast<double>(l.n * l.s);
  std::vector<double> mu(l.c, 0.0);
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) mu[ch] += x.value()[(b * l.c + ch) * l.s + q];
  for (auto& v : mu) v /= m;
  Tensor out({l.c});
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) {
        const double d = x.value()[(b * l.c + ch) * l.s + q] - mu[ch];
        out[ch] += d * d;
      }
  for (std::size_t ch = 0; ch < l.c; ++ch) out[ch] /= m;
  return make_result(std::move(out), {x}, [l, m, mu](Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = detail::pgrad(self, 0);
    for (std::size_t b = 0; b < l.n; ++b)
      for (std::size_t ch = 0; ch < l.c; ++ch)
        for (std::size_t q = 0; q < l.s; ++q) {
          const std::size_t i = (b * l.c + ch) * l.s + q;
          g[i] += self.grad[ch] * 2.0 * (xv[i] - mu[ch]) / m;
        }
  });
}

/// Training-mode batch normalization. Writes the batch mean and biased variance
/// to the optional outputs so the caller can update running statistics.
inline Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, Tensor* batch_mean = nullptr,
                            Tensor* batch_var = nullptr) {
  const auto l = detail::channel_layout(x.value());
  const double m = static_cast<double>(l.n * l.s);
  if (l.n * l.s < 2) throw ShapeError("batch_norm_train needs at least two values per channel");
  std::vector<double> mu(l.c, 0.0), var(l.c, 0.0);
  const auto& xv = x.value();
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) mu[ch] += xv[(b * l.c + ch) * l.s + q];
  for (auto& v : mu) v /= m;
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) {
        const double d = xv[(b * l.c + ch) * l.s + q] - mu[ch];
        var[ch] += d * d;
      }
  for (auto& v : var) v /= m;
  std::vector<double> invstd(l.c);
  for (std::size_t ch = 0; ch < l.c; ++ch) invstd[ch] = 1.0 / std::sqrt(var[ch] + eps);

  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) {
        const std::size_t i = (b * l.c + ch) * l.s + q;
        xhat[i] = (xv[i] - mu[ch]) * invstd[ch];
        out[i] = gamma.value()[ch] * xhat[i] + beta.value()[ch];
      }
  if (batch_mean) *batch_mean = Tensor({l.c}, mu);
  if (batch_var) *batch_var = Tensor({l.c}, var);

  return make_result(std::move(out), {x, gamma, beta}, [l, m, xhat = std::move(xhat), invstd](Node& self) {
    std::vector<double> sum_dy(l.c, 0.0), sum_dy_xhat(l.c, 0.0);
    for (std::size_t b = 0; b < l.n; ++b)
      for (std::size_t ch = 0; ch < l.c; ++ch)
        for (std::size_t q = 0; q < l.s; ++q) {
          const std::size_t i = (b * l.c + ch) * l.s + q;
          sum_dy[ch] += self.grad[i];
          sum_dy_xhat[ch] += self.grad[i] * xhat[i];
        }
    if (detail::needs(self, 1)) {
      auto& gg = detail::pgrad(self, 1);
      for (std::size_t ch = 0; ch < l.c; ++ch) gg[ch] += sum_dy_xhat[ch];
    }
    if (detail::needs(self, 2)) {
      auto& gb = detail::pgrad(self, 2);
      for (std::size_t ch = 0; ch < l.c; ++ch) gb[ch] += sum_dy[ch];
    }
    if (detail::needs(self, 0)) {
      const auto& gamma_v = self.parents[1]->value;
      auto& gx = detail::pgrad(self, 0);
      for (std::size_t b = 0; b < l.n; ++b)
        for (std::size_t ch = 0; ch < l.c; ++ch) {
          const double k = gamma_v[ch] * invstd[ch] / m;
          for (std::size_t q = 0; q < l.s; ++q) {
            const std::size_t i = (b * l.c + ch) * l.s + q;
            gx[i] += k * (m * self.grad[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
          }
        }
    }
  });
}

/// Inference-mode batch normalization with fixed running statistics.
inline Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                           const Tensor& running_var, double eps) {
  const auto l = detail::channel_layout(x.value());
  std::vector<double> a(l.c), shift(l.c);
  for (std::size_t ch = 0; ch < l.c; ++ch) {
    const double invstd = 1.0 / std::sqrt(running_var[ch] + eps);
    a[ch] = gamma.value()[ch] * invstd;
    shift[ch] = beta.value()[ch] - running_mean[ch] * a[ch];
  }
  Tensor out(x.shape());
  for (std::size_t b = 0; b < l.n; ++b)
    for (std::size_t ch = 0; ch < l.c; ++ch)
      for (std::size_t q = 0; q < l.s; ++q) {
        const std::size_t i = (b * l.c + ch) * l.s + q;
        out[i] = a[ch] * x.value()[i] + shift[ch];
      }
  std::vector<double> rm(running_mean.data().begin(), running_mean.data().end());
  std::vector<double> rv(running_var.data().begin(), running_var.data().end());
  return make_result(std::move(out), {x, gamma, beta}, [l, rm, rv, eps](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& gamma_v = self.parents[1]->value;
    for (std::size_t ch = 0; ch < l.c; ++ch) {
      const double invstd = 1.0 / std::sqrt(rv[ch] + eps);
      double sdy = 0.0, sdyx = 0.0;
      for (std::size_t b = 0; b < l.n; ++b)
        for (std::size_t q = 0; q < l.s; ++q) {
          const std::size_t i = (b * l.c + ch) * l.s + q;
          sdy += self.grad[i];
          sdyx += self.grad[i] * (xv[i] - rm[ch]) * invstd;
        }
      if (detail::needs(self, 1)) detail::pgrad(self, 1)[ch] += sdyx;
      if (detail::needs(self, 2)) detail::pgrad(self, 2)[ch] += sdy;
      if (detail::needs(self, 0)) {
        auto& gx = detail::pgrad(self, 0);
        const double a = gamma_v[ch] * invstd;
        for (std::size_t b = 0; b < l.n; ++b)
          for (std::size_t q = 0; q < l.s; ++q) {
            const std::size_t i = (b * l.c + ch) * l.s + q;
            gx[i] += a * self.grad[i];
          }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise log-softmax of a [N,C] matrix.
inline Var log_softmax(const Var& a) {
  detail::require_rank(a, 2, "log_softmax");
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.value().ptr() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result(out, {a}, [out, n, c](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] - std::exp(out[i * c + j]) * s;
    }
  });
}

inline Var softmax(const Var& a) {
  detail::require_rank(a, 2, "softmax");
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.value().ptr() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return make_result(out, {a}, [out, n, c](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * out[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

/// out[i] = a[i, idx[i]].
inline Var pick(const Var& a, const std::vector<std::size_t>& idx) {
  detail::require_rank(a, 2, "pick");
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  if (idx.size() != n) throw ShapeError("pick: index count does not match rows");
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= c) throw ShapeError("pick: index out of range");
    out[i] = a.value()[i * c + idx[i]];
  }
  return make_result(std::move(out), {a}, [idx, c](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * c + idx[i]] += self.grad[i];
  });
}

/// Row-wise log-sum-exp of a [N,M] matrix -> [N]. Entries with mask[i*M+j] == 0
/// are left out of the sum; every row must keep at least one entry.
inline Var logsumexp_rows(const Var& a, const std::vector<char>& mask = {}) {
  detail::require_rank(a, 2, "logsumexp_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (!mask.empty() && mask.size() != n * m) throw ShapeError("logsumexp_rows: mask size mismatch");
  auto keep = [&](std::size_t i, std::size_t j) { return mask.empty() || mask[i * m + j]; };
  Tensor out({n});
  Tensor soft({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.value().ptr() + i * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (keep(i, j)) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw ShapeError("logsumexp_rows: row has no unmasked entries");
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (keep(i, j)) s += (soft[i * m + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) soft[i * m + j] /= s;
    out[i] = mx + std::log(s);
  }
  return make_result(std::move(out), {a}, [soft = std::move(soft), n, m](Node& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i] * soft[i * m + j];
  });
}

// ---------------------------------------------------------------------------
// Cosine similarity, cos(u, v) = <u,v> / (|u||v| + eps)

namespace detail {
inline std::vector<double> row_norms(const Tensor& a) {
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a[i * d + j] * a[i * d + j];
    out[i] = std::sqrt(s);
  }
  return out;
}

// d cos / d u for one pair, accumulated with weight `up`.
inline void cosine_grad(const double* u, const double* v, double nu, double nv, double dot, double eps, double up,
                        std::size_t d, double* gu) {
  const double den = nu * nv + eps;
  const double k = nu > 0.0 ? dot * nv / (nu * den * den) : 0.0;
  for (std::size_t j = 0; j < d; ++j) gu[j] += up * (v[j] / den - k * u[j]);
}
}  // namespace detail

/// Pairwise cosine of matching rows: [N,d] x [N,d] -> [N].
inline Var cosine_rows(const Var& a, const Var& b, double eps) {
  detail::require_rank(a, 2, "cosine_rows");
  detail::require_same_shape(a, b, "cosine_rows");
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  auto na = detail::row_norms(a.value()), nb = detail::row_norms(b.value());
  std::vector<double> dots(n, 0.0);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) dots[i] += a.value()[i * d + j] * b.value()[i * d + j];
    out[i] = dots[i] / (na[i] * nb[i] + eps);
  }
  return make_result(std::move(out), {a, b}, [=](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (std::size_t i = 0; i < n; ++i) {
      if (detail::needs(self, 0))
        detail::cosine_grad(av.ptr() + i * d, bv.ptr() + i * d, na[i], nb[i], dots[i], eps, self.grad[i], d,
                            detail::pgrad(self, 0).ptr() + i * d);
      if (detail::needs(self, 1))
        detail::cosine_grad(bv.ptr() + i * d, av.ptr() + i * d, nb[i], na[i], dots[i], eps, self.grad[i], d,
                            detail::pgrad(self, 1).ptr() + i * d);
    }
  });
}

/// All-pairs cosine: [N,d] x [M,d] -> [N,M].
inline Var cosine_matrix(const Var& a, const Var& b, double eps) {
  detail::require_rank(a, 2, "cosine_matrix");
  detail::require_rank(b, 2, "cosine_matrix");
  const std::size_t n = a.shape()[0], m = b.shape()[0], d = a.shape()[1];
  if (b.shape()[1] != d) throw ShapeError("cosine_matrix: embedding width mismatch");
  auto na = detail::row_norms(a.value()), nb = detail::row_norms(b.value());
  Tensor dots({n, m});
  detail::MapMat(dots.ptr(), n, m).noalias() =
      detail::CMapMat(a.value().ptr(), n, d) * detail::CMapMat(b.value().ptr(), m, d).transpose();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = dots[i * m + j] / (na[i] * nb[j] + eps);
  return make_result(std::move(out), {a, b}, [=, dots = std::move(dots)](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double up = self.grad[i * m + j];
        if (up == 0.0) continue;
        if (detail::needs(self, 0))
          detail::cosine_grad(av.ptr() + i * d, bv.ptr() + j * d, na[i], nb[j], dots[i * m + j], eps, up, d,
                              detail::pgrad(self, 0).ptr() + i * d);
        if (detail::needs(self, 1))
          detail::cosine_grad(bv.ptr() + j * d, av.ptr() + i * d, nb[j], na[i], dots[i * m + j], eps, up, d,
                              detail::pgrad(self, 1).ptr() + j * d);
      }
  });
}

}  // namespace dda::ops
