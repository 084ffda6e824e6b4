// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "vecrag/tensor.hpp"

// Differentiable primitives. Every op computes its value eagerly and, when a
// tape is active and an input requires grad, records a backward rule that
// accumulates into the inputs' grad buffers. Masks and other constant inputs
// are never differentiated.

namespace vecrag {

constexpr double kMaskedOut = -1e9;  // additive -inf surrogate

namespace detail {

// Right-aligned broadcast of the batch dimensions (all but the last two) of
// two shapes. Strides are in units of one [rows x cols] slice; 0 marks a
// broadcast dimension, so repeated reads/accumulations hit the same slice.
struct BatchMap {
  Shape dims;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
  std::size_t count = 1;

  void offsets(std::size_t flat, std::size_t& a_off, std::size_t& b_off) const {
    a_off = 0;
    b_off = 0;
    for (std::size_t d = dims.size(); d-- > 0;) {
      const std::size_t idx = flat % dims[d];
      flat /= dims[d];
      a_off += idx * a_stride[d];
      b_off += idx * b_stride[d];
    }
  }
};

inline BatchMap broadcast_batches(const Shape& a, const Shape& b, const char* op) {
  const std::size_t la = a.size() - 2;
  const std::size_t lb = b.size() - 2;
  const std::size_t nd = std::max(la, lb);
  BatchMap m;
  m.dims.assign(nd, 1);
  m.a_stride.assign(nd, 0);
  m.b_stride.assign(nd, 0);
  for (std::size_t d = 0; d < nd; ++d) {
    const std::size_t ad = d < la ? a[la - 1 - d] : 1;
    const std::size_t bd = d < lb ? b[lb - 1 - d] : 1;
    if (ad != bd && ad != 1 && bd != 1) {
      throw std::invalid_argument(std::string(op) + ": batch dimensions of " + shape_str(a) +
                                  " and " + shape_str(b) + " do not broadcast");
    }
    m.dims[nd - 1 - d] = std::max(ad, bd);
  }
  std::size_t sa = 1, sb = 1;
  for (std::size_t d = 0; d < nd; ++d) {
    const std::size_t ad = d < la ? a[la - 1 - d] : 1;
    const std::size_t bd = d < lb ? b[lb - 1 - d] : 1;
    m.a_stride[nd - 1 - d] = ad == 1 ? 0 : sa;
    m.b_stride[nd - 1 - d] = bd == 1 ? 0 : sb;
    sa *= ad;
    sb *= bd;
  }
  m.count = shape_numel(m.dims);
  return m;
}

inline void matmul_slice(const double* a, const double* b, double* c, std::size_t m,
                         std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double apv = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += apv * brow[j];
    }
  }
}

}  // namespace detail

/// Matrix product over the last two dims; leading dims broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw std::invalid_argument("matmul: need >=2 dims, got " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.ndim() - 2];
  const std::size_t k = a.shape()[a.ndim() - 1];
  const std::size_t k2 = b.shape()[b.ndim() - 2];
  const std::size_t n = b.shape()[b.ndim() - 1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const detail::BatchMap bm = detail::broadcast_batches(a.shape(), b.shape(), "matmul");

  Shape out_shape = bm.dims;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool track = tracking({&a, &b});
  Tensor out(std::move(out_shape), 0.0, track);

  for (std::size_t s = 0; s < bm.count; ++s) {
    std::size_t ao, bo;
    bm.offsets(s, ao, bo);
    detail::matmul_slice(a.data() + ao * m * k, b.data() + bo * k * n,
                         out.data() + s * m * n, m, k, n);
  }

  if (track) {
    Tape::current()->record([a, b, out, bm, m, k, n]() mutable {
      const double* go = out.grad();
      for (std::size_t s = 0; s < bm.count; ++s) {
        std::size_t ao, bo;
        bm.offsets(s, ao, bo);
        const double* gslice = go + s * m * n;
        if (a.requires_grad()) {
          double* ga = a.grad() + ao * m * k;
          const double* bd = b.data() + bo * k * n;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = gslice + i * n;
              const double* brow = bd + p * n;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (b.requires_grad()) {
          double* gb = b.grad() + bo * k * n;
          const double* ad = a.data() + ao * m * k;
          for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t i = 0; i < m; ++i) {
              const double apv = ad[i * k + p];
              const double* grow = gslice + i * n;
              double* gbrow = gb + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += apv * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Swaps the last two dims (batches untouched).
inline Tensor transpose(const Tensor& x) {
  if (x.ndim() < 2) {
    throw std::invalid_argument("transpose: need >=2 dims, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[x.ndim() - 2];
  const std::size_t c = x.shape()[x.ndim() - 1];
  Shape out_shape = x.shape();
  std::swap(out_shape[x.ndim() - 2], out_shape[x.ndim() - 1]);
  const bool track = tracking({&x});
  Tensor out(std::move(out_shape), 0.0, track);
  const std::size_t slices = x.numel() / (r * c);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* in = x.data() + s * r * c;
    double* o = out.data() + s * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[j * r + i] = in[i * c + j];
  }
  if (track) {
    Tape::current()->record([x, out, r, c, slices]() mutable {
      double* gx = x.grad();
      const double* go = out.grad();
      for (std::size_t s = 0; s < slices; ++s) {
        const double* g = go + s * r * c;
        double* t = gx + s * r * c;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) t[i * c + j] += g[j * r + i];
      }
    });
  }
  return out;
}

// b's shape must equal a's trailing dims (bias-style broadcast) or match a.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix = sb.size() <= sa.size() &&
                      std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) {
    throw std::invalid_argument("add: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  }
  const bool track = tracking({&a, &b});
  Tensor out(sa, 0.0, track);
  const std::size_t nb = b.numel();
  const std::size_t na = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < na; ++i) po[i] = pa[i] + pb[i % nb];
  if (track) {
    Tape::current()->record([a, b, out, na, nb]() mutable {
      const double* go = out.grad();
      if (a.requires_grad()) {
        double* ga = a.grad();
        for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        for (std::size_t i = 0; i < na; ++i) gb[i % nb] += go[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mul: shapes differ, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const bool track = tracking({&a, &b});
  Tensor out(a.shape(), 0.0, track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (track) {
    Tape::current()->record([a, b, out, n]() mutable {
      const double* go = out.grad();
      if (a.requires_grad()) {
        double* ga = a.grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * a.data()[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& x, double c) {
  const bool track = tracking({&x});
  Tensor out(x.shape(), 0.0, track);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
  if (track) {
    Tape::current()->record([x, out, c, n]() mutable {
      double* gx = x.grad();
      const double* go = out.grad();
      for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * c;
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& x) {
  const bool track = tracking({&x});
  Tensor out(x.shape(), 0.0, track);
  const std::size_t n = x.numel();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  if (track) {
    Tape::current()->record([x, out, n]() mutable {
      constexpr double inv_sqrt_2pi = 0.3989422804014326779;
      double* gx = x.grad();
      const double* go = out.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += go[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

/// Softmax over the last dim. `mask` (optional) is added before normalizing;
/// entries <= -1e8 count as masked. A row whose mask blocks every position is
/// a degenerate attention row and throws. The mask is a constant: no gradient
/// flows into it.
inline Tensor softmax_rows(const Tensor& x, const Tensor& mask = Tensor()) {
  if (x.ndim() < 1 || x.shape().back() < 1) {
    throw std::invalid_argument("softmax_rows: need a non-empty last dim, got " +
                                shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::size_t mask_rows = 0;
  if (mask.defined()) {
    const Shape& sm = mask.shape();
    const Shape& sx = x.shape();
    const bool suffix = !sm.empty() && sm.size() <= sx.size() &&
                        std::equal(sm.rbegin(), sm.rend(), sx.rbegin());
    if (!suffix) {
      throw std::invalid_argument("softmax_rows: mask " + shape_str(sm) +
                                  " is not a suffix of " + shape_str(sx));
    }
    mask_rows = mask.numel() / n;
  }
  const bool track = tracking({&x});
  Tensor out(x.shape(), 0.0, track);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    const double* mrow = mask.defined() ? mask.data() + (r % mask_rows) * n : nullptr;
    double* o = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    bool any_open = !mask.defined();
    for (std::size_t j = 0; j < n; ++j) {
      const double v = in[j] + (mrow ? mrow[j] : 0.0);
      if (mrow && mrow[j] > -1e8) any_open = true;
      o[j] = v;
      mx = std::max(mx, v);
    }
    if (!any_open) {
      throw std::invalid_argument("softmax_rows: row " + std::to_string(r) +
                                  " is fully masked");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(o[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  if (track) {
    Tape::current()->record([x, out, rows, n]() mutable {
      double* gx = x.grad();
      const double* go = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* s = out.data() + r * n;
        const double* g = go + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * s[j];
        double* t = gx + r * n;
        for (std::size_t j = 0; j < n; ++j) t[j] += s[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

/// Normalizes the last dim to zero mean / unit variance, then applies the
/// affine gain and bias (both shaped [D]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d < 2) {
    throw std::invalid_argument("layer_norm: last dim must be >= 2, got " +
                                shape_str(x.shape()));
  }
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  const bool track = tracking({&x, &gain, &bias});
  Tensor out(x.shape(), 0.0, track);
  // cached per-row statistics for the backward rule
  std::vector<double> inv_std(rows), means(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    means[r] = mean;
    inv_std[r] = is;
    double* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = (in[j] - mean) * is * gain.data()[j] + bias.data()[j];
    }
  }
  if (track) {
    Tape::current()->record([x, gain, bias, out, rows, d, inv_std = std::move(inv_std),
                             means = std::move(means)]() mutable {
      const double* go = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * d;
        const double* g = go + r * d;
        const double is = inv_std[r];
        const double mean = means[r];
        if (gain.requires_grad() || bias.requires_grad()) {
          double* gg = gain.requires_grad() ? gain.grad() : nullptr;
          double* gb = bias.requires_grad() ? bias.grad() : nullptr;
          for (std::size_t j = 0; j < d; ++j) {
            const double y = (in[j] - mean) * is;
            if (gg) gg[j] += g[j] * y;
            if (gb) gb[j] += g[j];
          }
        }
        if (x.requires_grad()) {
          double sum_gy = 0.0, sum_gyy = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double y = (in[j] - mean) * is;
            const double gyj = g[j] * gain.data()[j];
            sum_gy += gyj;
            sum_gyy += gyj * y;
          }
          const double inv_d = 1.0 / static_cast<double>(d);
          double* gx = x.grad() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const double y = (in[j] - mean) * is;
            const double gyj = g[j] * gain.data()[j];
            gx[j] += is * (gyj - inv_d * sum_gy - y * inv_d * sum_gyy);
          }
        }
      }
    });
  }
  return out;
}

/// Gathers rows of `table` ([V, D]) at the given token ids.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) {
    throw std::invalid_argument("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  const std::size_t v = table.shape()[0];
  const std::size_t d = table.shape()[1];
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v) {
      throw std::invalid_argument("embedding: id " + std::to_string(ids[t]) + " at position " +
                                  std::to_string(t) + " outside table of " + std::to_string(v));
    }
  }
  const bool track = tracking({&table});
  Tensor out(Shape{ids.size(), d}, 0.0, track);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const double* row = table.data() + static_cast<std::size_t>(ids[t]) * d;
    std::copy(row, row + d, out.data() + t * d);
  }
  if (track) {
    Tape::current()->record([table, out, ids, d]() mutable {
      double* gt = table.grad();
      const double* go = out.grad();
      for (std::size_t t = 0; t < ids.size(); ++t) {
        double* row = gt + static_cast<std::size_t>(ids[t]) * d;
        const double* g = go + t * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t offset, std::size_t len) {
  if (x.ndim() != 2) {
    throw std::invalid_argument("slice_cols: need 2-D, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0];
  const std::size_t c = x.shape()[1];
  if (offset + len > c || len == 0) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(offset) + "," +
                                std::to_string(offset + len) + ") outside " + shape_str(x.shape()));
  }
  const bool track = tracking({&x});
  Tensor out(Shape{r, len}, 0.0, track);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy(x.data() + i * c + offset, x.data() + i * c + offset + len, out.data() + i * len);
  }
  if (track) {
    Tape::current()->record([x, out, offset, len, r, c]() mutable {
      double* gx = x.grad();
      const double* go = out.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) gx[i * c + offset + j] += go[i * len + j];
    });
  }
  return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t offset, std::size_t len) {
  if (x.ndim() != 2) {
    throw std::invalid_argument("slice_rows: need 2-D, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0];
  const std::size_t c = x.shape()[1];
  if (offset + len > r || len == 0) {
    throw std::invalid_argument("slice_rows: [" + std::to_string(offset) + "," +
                                std::to_string(offset + len) + ") outside " + shape_str(x.shape()));
  }
  const bool track = tracking({&x});
  Tensor out(Shape{len, c}, 0.0, track);
  std::copy(x.data() + offset * c, x.data() + (offset + len) * c, out.data());
  if (track) {
    Tape::current()->record([x, out, offset, len, c]() mutable {
      double* gx = x.grad() + offset * c;
      const double* go = out.grad();
      for (std::size_t i = 0; i < len * c; ++i) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t r = parts[0].shape()[0];
  std::size_t total = 0;
  std::vector<const Tensor*> refs;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.shape()[0] != r) {
      throw std::invalid_argument("concat_cols: row counts differ");
    }
    total += p.shape()[1];
    refs.push_back(&p);
  }
  bool track = false;
  if (Tape::current()) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  Tensor out(Shape{r, total}, 0.0, track);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.shape()[1];
    for (std::size_t i = 0; i < r; ++i) {
      std::copy(p.data() + i * c, p.data() + (i + 1) * c, out.data() + i * total + off);
    }
    off += c;
  }
  if (track) {
    Tape::current()->record([parts, out, r, total]() mutable {
      const double* go = out.grad();
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        const std::size_t c = p.shape()[1];
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += go[i * total + off + j];
        }
        off += c;
      }
    });
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t c = parts[0].shape().back();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.shape()[1] != c) {
      throw std::invalid_argument("concat_rows: column counts differ");
    }
    total += p.shape()[0];
  }
  bool track = false;
  if (Tape::current()) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  Tensor out(Shape{total, c}, 0.0, track);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.data() + off);
    off += p.numel();
  }
  if (track) {
    Tape::current()->record([parts, out]() mutable {
      const double* go = out.grad();
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += go[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  const bool track = tracking({&x});
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s, track);
  if (track) {
    Tape::current()->record([x, out]() mutable {
      const double g = out.grad()[0];
      double* gx = x.grad();
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

/// Mean over unmasked positions of -log softmax(logits[t])[targets[t]].
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<bool>& loss_mask) {
  if (logits.ndim() != 2) {
    throw std::invalid_argument("cross_entropy_mean: logits must be [T,V], got " +
                                shape_str(logits.shape()));
  }
  const std::size_t t_len = logits.shape()[0];
  const std::size_t v = logits.shape()[1];
  if (targets.size() != t_len || loss_mask.size() != t_len) {
    throw std::invalid_argument("cross_entropy_mean: targets/mask length " +
                                std::to_string(targets.size()) + "/" +
                                std::to_string(loss_mask.size()) + " vs T=" +
                                std::to_string(t_len));
  }
  std::size_t n_active = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!loss_mask[t]) continue;
    ++n_active;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v) {
      throw std::invalid_argument("cross_entropy_mean: target " + std::to_string(targets[t]) +
                                  " at position " + std::to_string(t) + " outside vocab " +
                                  std::to_string(v));
    }
  }
  if (n_active == 0) {
    throw std::invalid_argument("cross_entropy_mean: every position is masked");
  }
  const bool track = tracking({&logits});
  // softmax rows cached for the backward rule (masked rows stay empty)
  std::vector<double> probs(track ? t_len * v : 0, 0.0);
  double total = 0.0;
  std::vector<double> row(v);
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!loss_mask[t]) continue;
    const double* l = logits.data() + t * v;
    double mx = l[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, l[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      row[j] = std::exp(l[j] - mx);
      sum += row[j];
    }
    total += std::log(sum) + mx - l[targets[t]];
    if (track) {
      for (std::size_t j = 0; j < v; ++j) probs[t * v + j] = row[j] / sum;
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n_active), track);
  if (track) {
    Tape::current()->record([logits, out, targets, loss_mask, probs = std::move(probs), t_len, v,
                             n_active]() mutable {
      const double g = out.grad()[0] / static_cast<double>(n_active);
      double* gl = logits.grad();
      for (std::size_t t = 0; t < t_len; ++t) {
        if (!loss_mask[t]) continue;
        const double* p = probs.data() + t * v;
        double* grow = gl + t * v;
        for (std::size_t j = 0; j < v; ++j) grow[j] += g * p[j];
        grow[static_cast<std::size_t>(targets[t])] -= g;
      }
    });
  }
  return out;
}

/// Additive causal mask: 0 at or before the diagonal, masked after it.
inline Tensor causal_mask(std::size_t t_len) {
  Tensor m(Shape{t_len, t_len}, 0.0, false);
  for (std::size_t i = 0; i < t_len; ++i)
    for (std::size_t j = i + 1; j < t_len; ++j) m.data()[i * t_len + j] = kMaskedOut;
  return m;
}

}  // namespace vecrag
