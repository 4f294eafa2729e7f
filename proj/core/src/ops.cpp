#include "deepstack/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace deepstack {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T, typename... Ts>
bool needs_grad(const Tape<T>& tape, const Ts&... inputs) {
  return tape.recording() && (inputs.requires_grad() || ...);
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int k = axis < 0 ? r + axis : axis;
  if (k < 0 || k >= r) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(shape));
  }
  return static_cast<std::size_t>(k);
}

// Gathers x permuted by swapping two axes into a new buffer.
template <typename T>
std::vector<T> swap_axes(std::span<const T> x, const Shape& shape,
                         std::size_t d0, std::size_t d1) {
  const std::size_t rank = shape.size();
  Shape out_shape = shape;
  std::swap(out_shape[d0], out_shape[d1]);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) {
    in_strides[i] = in_strides[i + 1] * shape[i + 1];
  }
  std::vector<std::size_t> strides = in_strides;
  std::swap(strides[d0], strides[d1]);  // stride in x of each output axis

  std::vector<T> out(x.size());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = x[offset];
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      offset += strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      offset -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto mismatch = [&] {
    return DimensionError("matmul shape mismatch: " + to_string(a.shape()) +
                          " x " + to_string(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t k = a.dim(-1);
  if (b.dim(-2) != k) throw mismatch();
  const std::size_t n = b.dim(-1);

  if (b.rank() == 2) {
    const std::size_t m = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n, T{0});
    gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    Tensor<T> c(std::move(out_shape), std::move(out), needs_grad(tape, a, b));
    if (c.requires_grad()) {
      tape.record("matmul", [a, b, c, m, n, k]() mutable {
        if (!c.has_grad()) return;
        const T* g = c.grad().data();
        if (a.requires_grad()) {
          std::vector<T> da(m * k, T{0});
          gemm_nt(m, n, k, g, b.data().data(), da.data());
          a.accumulate_grad(da);
        }
        if (b.requires_grad()) {
          std::vector<T> db(k * n, T{0});
          gemm_tn(m, n, k, a.data().data(), g, db.data());
          b.accumulate_grad(db);
        }
      });
    }
    return c;
  }

  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) throw mismatch();
  const std::size_t batch = a.dim(0);
  const std::size_t m = a.dim(1);
  std::vector<T> out(batch * m * n, T{0});
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(m, n, k, a.data().data() + s * m * k, b.data().data() + s * k * n,
            out.data() + s * m * n);
  }
  Tensor<T> c(Shape{batch, m, n}, std::move(out), needs_grad(tape, a, b));
  if (c.requires_grad()) {
    tape.record("bmm", [a, b, c, batch, m, n, k]() mutable {
      if (!c.has_grad()) return;
      const T* g = c.grad().data();
      if (a.requires_grad()) {
        std::vector<T> da(batch * m * k, T{0});
        for (std::size_t s = 0; s < batch; ++s) {
          gemm_nt(m, n, k, g + s * m * n, b.data().data() + s * k * n,
                  da.data() + s * m * k);
        }
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<T> db(batch * k * n, T{0});
        for (std::size_t s = 0; s < batch; ++s) {
          gemm_tn(m, n, k, a.data().data() + s * m * k, g + s * m * n,
                  db.data() + s * k * n);
        }
        b.accumulate_grad(db);
      }
    });
  }
  return c;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x, int dim0, int dim1) {
  const std::size_t d0 = normalize_axis(dim0, x.rank(), x.shape());
  const std::size_t d1 = normalize_axis(dim1, x.rank(), x.shape());
  Shape out_shape = x.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  Tensor<T> y(out_shape, swap_axes<T>(x.data(), x.shape(), d0, d1),
              needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("transpose", [x, y, d0, d1, out_shape]() mutable {
      if (!y.has_grad()) return;
      x.accumulate_grad(swap_axes<T>(y.grad(), out_shape, d0, d1));
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " +
                         to_string(shape));
  }
  Tensor<T> y(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()),
              needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("reshape", [x, y]() mutable {
      if (y.has_grad()) x.accumulate_grad(y.grad());
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool suffix =
      bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix) {
    throw DimensionError("add shape mismatch: " + to_string(as) + " + " +
                         to_string(bs));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    T* row = out.data() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) row[i] += bd[i];
  }
  Tensor<T> c(as, std::move(out), needs_grad(tape, a, b));
  if (c.requires_grad()) {
    tape.record("add", [a, b, c, inner, outer]() mutable {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) {
        if (outer == 1) {
          b.accumulate_grad(g);
        } else {
          std::vector<T> db(inner, T{0});
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) db[i] += g[o * inner + i];
          }
          b.accumulate_grad(db);
        }
      }
    });
  }
  return c;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  Tensor<T> y(x.shape(), std::move(out), needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("scale", [x, y, factor]() mutable {
      if (!y.has_grad()) return;
      std::vector<T> dx(y.grad().begin(), y.grad().end());
      for (T& v : dx) v *= factor;
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
double gelu_value(T x) {
  const double v = static_cast<double>(x);
  return 0.5 * v * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(gelu_value(xd[i]));
  }
  Tensor<T> y(x.shape(), std::move(out), needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("gelu", [x, y]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      const auto xv = x.data();
      std::vector<T> dx(x.size());
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const double v = static_cast<double>(xv[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        dx[i] = static_cast<T>(static_cast<double>(g[i]) * (cdf + v * pdf));
      }
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
  Tensor<T> y(x.shape(), std::move(out), needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("tanh", [x, y]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      const auto yv = y.data();
      std::vector<T> dx(g.size());
      for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] = g[i] * (T{1} - yv[i] * yv[i]);
      }
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
std::vector<T> softmax_rows(std::span<const T> x, std::size_t cols) {
  std::vector<T> out(x.size());
  const std::size_t rows = x.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += static_cast<double>(o[j]);
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (std::size_t j = 0; j < cols; ++j) o[j] *= inv;
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t cols = x.dim(-1);
  Tensor<T> y(x.shape(), softmax_rows<T>(x.data(), cols), needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("softmax", [x, y, cols]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      const auto p = y.data();
      std::vector<T> dx(g.size());
      for (std::size_t r = 0; r < g.size() / cols; ++r) {
        const std::size_t base = r * cols;
        T dot{0};
        for (std::size_t j = 0; j < cols; ++j) dot += g[base + j] * p[base + j];
        for (std::size_t j = 0; j < cols; ++j) {
          dx[base + j] = p[base + j] * (g[base + j] - dot);
        }
      }
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps) {
  if (x.rank() == 0 || x.dim(-1) == 0) {
    throw DimensionError("layer_norm needs a non-empty last axis");
  }
  const std::size_t d = x.dim(-1);
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm affine params " + to_string(gain.shape()) +
                         "/" + to_string(bias.shape()) + " vs input " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += static_cast<double>(in[j]);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(in[j]) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>((static_cast<double>(in[j]) - mean) * rs);
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Tensor<T> y(x.shape(), std::move(out), needs_grad(tape, x, gain, bias));
  if (y.requires_grad()) {
    tape.record("layer_norm", [x, gain, bias, y, xhat = std::move(xhat),
                               rstd = std::move(rstd), d, rows]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      const auto gv = gain.data();
      if (gain.requires_grad() || bias.requires_grad()) {
        std::vector<T> dgain(d, T{0});
        std::vector<T> dbias(d, T{0});
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            dgain[j] += g[r * d + j] * xhat[r * d + j];
            dbias[j] += g[r * d + j];
          }
        }
        if (gain.requires_grad()) gain.accumulate_grad(dgain);
        if (bias.requires_grad()) bias.accumulate_grad(dbias);
      }
      if (x.requires_grad()) {
        std::vector<T> dx(x.size());
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0;
          double mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(g[r * d + j] * gv[j]);
            mean_dh += dh;
            mean_dh_h += dh * static_cast<double>(xhat[r * d + j]);
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(g[r * d + j] * gv[j]);
            dx[r * d + j] = static_cast<T>(
                static_cast<double>(rstd[r]) *
                (dh - mean_dh - static_cast<double>(xhat[r * d + j]) * mean_dh_h));
          }
        }
        x.accumulate_grad(dx);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p,
                  const RngStream& stream, bool training,
                  std::uint64_t counter_base) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout probability must lie in [0, 1), got " +
                         std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = stream.uniform(counter_base + i) < p ? T{0} : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  Tensor<T> y(x.shape(), std::move(out), needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("dropout", [x, y, mask = std::move(mask)]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      std::vector<T> dx(g.size());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * mask[i];
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table,
                           std::span<const std::int32_t> ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding table must be 2-D, got " +
                         to_string(table.shape()));
  }
  if (ids.empty()) throw DimensionError("embedding_lookup with no ids");
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw IndexError("embedding id " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  Tensor<T> y(Shape{ids.size(), d}, std::move(out), needs_grad(tape, table));
  if (y.requires_grad()) {
    tape.record("embedding", [table, y, idv = std::vector<std::int32_t>(
                                            ids.begin(), ids.end()),
                              d]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      std::vector<T> dt(table.size(), T{0});
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* row = dt.data() + static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
      }
      table.accumulate_grad(dt);
    });
  }
  return y;
}

template <typename T>
Tensor<T> slice_last(Tape<T>& tape, const Tensor<T>& x, std::size_t begin,
                     std::size_t count) {
  const std::size_t cols = x.dim(-1);
  if (count == 0 || begin + count > cols) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") of last axis of " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.size() / cols;
  std::vector<T> out(rows * count);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * cols + begin, count, out.data() + r * count);
  }
  Shape shape = x.shape();
  shape.back() = count;
  Tensor<T> y(std::move(shape), std::move(out), needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("slice", [x, y, begin, count, cols, rows]() mutable {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      std::vector<T> dx(x.size(), T{0});
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(g.data() + r * count, count, dx.data() + r * cols + begin);
      }
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x,
                       std::span<const T> weights) {
  if (weights.size() != x.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                         " weights for tensor " + to_string(x.shape()));
  }
  T acc{0};
  const auto xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * weights[i];
  Tensor<T> y = Tensor<T>::scalar(acc, needs_grad(tape, x));
  if (y.requires_grad()) {
    tape.record("weighted_sum", [x, y, w = std::vector<T>(weights.begin(),
                                                          weights.end())]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      std::vector<T> dx(w.size());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g * w[i];
      x.accumulate_grad(dx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                std::span<const std::int32_t> targets,
                                std::span<const T> weights,
                                std::optional<double> denominator) {
  if (logits.rank() < 2) {
    throw DimensionError("cross entropy logits must be at least 2-D, got " +
                         to_string(logits.shape()));
  }
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows || weights.size() != rows) {
    throw DimensionError("cross entropy: " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(weights.size()) +
                         " weights for logits " + to_string(logits.shape()));
  }
  double total_weight = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] < T{0}) {
      throw ParameterError("negative loss weight at row " + std::to_string(r));
    }
    if (weights[r] == T{0}) continue;
    total_weight += static_cast<double>(weights[r]);
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexError("target id " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const double denom = denominator.value_or(total_weight);

  const auto lv = logits.data();
  double loss = 0.0;
  if (denom > 0.0) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (weights[r] == T{0}) continue;
      const T* row = lv.data() + r * vocab;
      const T mx = *std::max_element(row, row + vocab);
      double sum = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) {
        sum += std::exp(static_cast<double>(row[j] - mx));
      }
      const double lse = static_cast<double>(mx) + std::log(sum);
      const double nll = lse - static_cast<double>(row[targets[r]]);
      loss += static_cast<double>(weights[r]) * nll;
    }
    loss /= denom;
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(loss), needs_grad(tape, logits));
  if (y.requires_grad() && denom > 0.0) {
    tape.record("softmax_cross_entropy",
                [logits, y, t = std::vector<std::int32_t>(targets.begin(),
                                                          targets.end()),
                 w = std::vector<T>(weights.begin(), weights.end()), vocab,
                 rows, denom]() mutable {
                  if (!y.has_grad()) return;
                  const double g = static_cast<double>(y.grad()[0]);
                  const auto lv = logits.data();
                  std::vector<T> dl(logits.size(), T{0});
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (w[r] == T{0}) continue;
                    const double coef = g * static_cast<double>(w[r]) / denom;
                    const auto p = softmax_rows<T>(lv.subspan(r * vocab, vocab),
                                                   vocab);
                    T* out = dl.data() + r * vocab;
                    for (std::size_t j = 0; j < vocab; ++j) {
                      out[j] = static_cast<T>(coef * static_cast<double>(p[j]));
                    }
                    out[t[r]] -= static_cast<T>(coef);
                  }
                  logits.accumulate_grad(dl);
                });
  }
  return y;
}

template <typename T>
Tensor<T> checkpoint(Tape<T>& tape, const std::vector<Tensor<T>>& inputs,
                     CheckpointFn<T> fn) {
  if (!tape.recording()) return fn(tape, inputs);

  Tape<T> scratch(/*recording=*/false);
  Tensor<T> value = fn(scratch, inputs);
  Tensor<T> out(value.shape(),
                std::vector<T>(value.data().begin(), value.data().end()),
                /*requires_grad=*/true);
  tape.record("checkpoint", [inputs, out, fn = std::move(fn)]() mutable {
    if (!out.has_grad()) return;
    std::vector<Tensor<T>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) {
      leaves.emplace_back(in.shape(),
                          std::vector<T>(in.data().begin(), in.data().end()),
                          in.requires_grad());
    }
    Tape<T> replay(/*recording=*/true);
    Tensor<T> recomputed = fn(replay, leaves);
    replay.backward(recomputed, out.grad());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].requires_grad() && leaves[i].has_grad()) {
        Tensor<T> target = inputs[i];
        target.accumulate_grad(leaves[i].grad());
      }
    }
  });
  return out;
}

#define DEEPSTACK_INSTANTIATE_OPS(T)                                          \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&, int, int);         \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);              \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                    \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                        \
  template Tensor<T> tanh(Tape<T>&, const Tensor<T>&);                        \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                     \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, \
                                const Tensor<T>&, double);                    \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double,              \
                             const RngStream&, bool, std::uint64_t);          \
  template Tensor<T> embedding_lookup(Tape<T>&, const Tensor<T>&,             \
                                      std::span<const std::int32_t>);         \
  template Tensor<T> slice_last(Tape<T>&, const Tensor<T>&, std::size_t,      \
                                std::size_t);                                 \
  template Tensor<T> weighted_sum(Tape<T>&, const Tensor<T>&,                 \
                                  std::span<const T>);                        \
  template Tensor<T> softmax_cross_entropy(                                   \
      Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>,              \
      std::span<const T>, std::optional<double>);                             \
  template Tensor<T> checkpoint(Tape<T>&, const std::vector<Tensor<T>>&,      \
                                CheckpointFn<T>);                             \
  template std::vector<T> softmax_rows(std::span<const T>, std::size_t);      \
  template double gelu_value(T);

DEEPSTACK_INSTANTIATE_OPS(float)
DEEPSTACK_INSTANTIATE_OPS(double)

#undef DEEPSTACK_INSTANTIATE_OPS

}  // namespace deepstack
