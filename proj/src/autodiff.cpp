#include "kpreid/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace kpr {

namespace {

DType promote(const Tensor& a, const Tensor& b) {
  return (a.dtype() == DType::f64 || b.dtype() == DType::f64) ? DType::f64 : DType::f32;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

constexpr double kInvSqrt2 = 0.7071067811865475;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

}  // namespace

int Tape::lookup(const Tensor& t) const {
  auto it = index_.find(t.id());
  return it == index_.end() ? -1 : it->second;
}

int Tape::track(const Tensor& t) {
  if (!record_) return -1;
  int idx = lookup(t);
  if (idx >= 0) return idx;
  if (!t.requires_grad()) return -1;
  idx = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{t.id(), nullptr});
  grads_.emplace_back(t.size(), 0.0);
  index_.emplace(t.id(), idx);
  return idx;
}

int Tape::add_node(const Tensor& out) {
  int idx = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{out.id(), nullptr});
  grads_.emplace_back(out.size(), 0.0);
  index_.emplace(out.id(), idx);
  return idx;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[i * k + t];
      if (av == 0.0) continue;
      const double* bt = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
  Tensor out = Tensor::from_data({m, n}, std::move(c), promote(a, b));
  int ia = track(a), ib = track(b);
  if (ia >= 0 || ib >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, a, b, ia, ib, io, m, k, n]() {
      const std::vector<double>& go = grad_buf(io);
      if (ia >= 0) {
        std::vector<double>& ga = grad_buf(ia);
        const double* pb2 = b.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            double acc = 0.0;
            const double* bt = pb2 + t * n;
            const double* gi = go.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bt[j];
            ga[i * k + t] += acc;
          }
      }
      if (ib >= 0) {
        std::vector<double>& gb = grad_buf(ib);
        const double* pa2 = a.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* gi = go.data() + i * n;
          for (std::size_t t = 0; t < k; ++t) {
            const double av = pa2[i * k + t];
            if (av == 0.0) continue;
            double* gbt = gb.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) gbt[j] += av * gi[j];
          }
        }
      }
    };
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(v), promote(a, b));
  int ia = track(a), ib = track(b);
  if (ia >= 0 || ib >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, ib, io]() {
      const std::vector<double>& go = grad_buf(io);
      if (ia >= 0) {
        std::vector<double>& ga = grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        std::vector<double>& gb = grad_buf(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    };
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(v), promote(a, b));
  int ia = track(a), ib = track(b);
  if (ia >= 0 || ib >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, ib, io]() {
      const std::vector<double>& go = grad_buf(io);
      if (ia >= 0) {
        std::vector<double>& ga = grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        std::vector<double>& gb = grad_buf(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    };
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(v), promote(a, b));
  int ia = track(a), ib = track(b);
  if (ia >= 0 || ib >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, a, b, ia, ib, io]() {
      const std::vector<double>& go = grad_buf(io);
      if (ia >= 0) {
        std::vector<double>& ga = grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.data()[i];
      }
      if (ib >= 0) {
        std::vector<double>& gb = grad_buf(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.data()[i];
      }
    };
  }
  return out;
}

Tensor Tape::add_bias(const Tensor& a, const Tensor& b) {
  if (b.rank() != 1)
    throw DimensionError("add_bias: bias must be rank 1, got " + shape_str(b.shape()));
  std::size_t m, n;
  if (a.rank() == 2) {
    m = a.rows();
    n = a.cols();
  } else if (a.rank() == 1) {
    m = 1;
    n = a.shape()[0];
  } else {
    throw DimensionError("add_bias: input must be rank 1 or 2, got " + shape_str(a.shape()));
  }
  if (b.shape()[0] != n)
    throw DimensionError("add_bias: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ on the trailing axis");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = a.data()[i * n + j] + b.data()[j];
  Tensor out = Tensor::from_data(a.shape(), std::move(v), promote(a, b));
  int ia = track(a), ib = track(b);
  if (ia >= 0 || ib >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, ib, io, m, n]() {
      const std::vector<double>& go = grad_buf(io);
      if (ia >= 0) {
        std::vector<double>& ga = grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        std::vector<double>& gb = grad_buf(ib);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
    };
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
  Tensor out = Tensor::from_data(a.shape(), std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, c]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    };
  }
  return out;
}

Tensor Tape::add_const(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + c;
  Tensor out = Tensor::from_data(a.shape(), std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
  }
  return out;
}

Tensor Tape::unary(const Tensor& a, const std::function<double(double)>& f,
                   const std::function<double(double, double)>& df) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.data()[i]);
  Tensor out = Tensor::from_data(a.shape(), std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, a, out, ia, io, df]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i)
        ga[i] += go[i] * df(a.data()[i], out.data()[i]);
    };
  }
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor Tape::gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
               x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor Tape::sin_op(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor Tape::sqrt_op(const Tensor& a) {
  for (double x : a.data())
    if (x < 0.0) throw ContractError("sqrt_op: negative input");
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor Tape::sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::from_data({1}, {s}, a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io]() {
      const double g = grad_buf(io)[0];
      std::vector<double>& ga = grad_buf(ia);
      for (double& x : ga) x += g;
    };
  }
  return out;
}

Tensor Tape::mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor Tape::softmax(const Tensor& a, int axis) {
  if (a.rank() > 2) throw DimensionError("softmax: rank must be 1 or 2, got " + shape_str(a.shape()));
  int r = static_cast<int>(a.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: invalid axis");
  if (a.rank() == 2 && axis == 0) return transpose(softmax(transpose(a), 1));

  const std::size_t n = a.rank() == 2 ? a.cols() : a.shape()[0];
  const std::size_t m = a.size() / n;
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      v[i * n + j] = std::exp(row[j] - mx);
      denom += v[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] /= denom;
  }
  Tensor out = Tensor::from_data(a.shape(), std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, out, ia, io, m, n]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = out.data().data() + i * n;
        const double* g = go.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (g[j] - dot) * y[j];
      }
    };
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (gain.rank() != 1 || bias.rank() != 1)
    throw DimensionError("layer_norm: gain and bias must be rank 1");
  const std::size_t d = gain.shape()[0];
  if (bias.shape()[0] != d || x.shape().back() != d)
    throw DimensionError("layer_norm: shapes " + shape_str(x.shape()) + ", " +
                         shape_str(gain.shape()) + ", " + shape_str(bias.shape()) + " disagree");
  const std::size_t m = x.size() / d;
  std::vector<double> v(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sigma(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * is;
      v[i * d + j] = xhat[i * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  Tensor out = Tensor::from_data(x.shape(), std::move(v), promote(x, promote(gain, bias) == DType::f64 ? gain : bias));
  int ix = track(x), ig = track(gain), ib = track(bias);
  if (ix >= 0 || ig >= 0 || ib >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back =
        [this, gain, ix, ig, ib, io, m, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)]() {
          const std::vector<double>& go = grad_buf(io);
          for (std::size_t i = 0; i < m; ++i) {
            const double* g = go.data() + i * d;
            const double* xh = xhat.data() + i * d;
            if (ix >= 0) {
              std::vector<double>& gx = grad_buf(ix);
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::size_t j = 0; j < d; ++j) {
                const double dxhat = g[j] * gain.data()[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xh[j];
              }
              const double inv_d = 1.0 / static_cast<double>(d);
              for (std::size_t j = 0; j < d; ++j) {
                const double dxhat = g[j] * gain.data()[j];
                gx[i * d + j] +=
                    inv_sigma[i] * (dxhat - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
              }
            }
            if (ig >= 0) {
              std::vector<double>& gg = grad_buf(ig);
              for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * xh[j];
            }
            if (ib >= 0) {
              std::vector<double>& gb = grad_buf(ib);
              for (std::size_t j = 0; j < d; ++j) gb[j] += g[j];
            }
          }
        };
  }
  return out;
}

Tensor Tape::l2_normalize_rows(const Tensor& a, double eps) {
  std::size_t m, n;
  if (a.rank() == 2) {
    m = a.rows();
    n = a.cols();
  } else if (a.rank() == 1) {
    m = 1;
    n = a.shape()[0];
  } else {
    throw DimensionError("l2_normalize_rows: rank must be 1 or 2, got " + shape_str(a.shape()));
  }
  std::vector<double> v(a.size(), 0.0);
  std::vector<double> norms(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * row[j];
    const double nr = std::sqrt(s);
    norms[i] = nr;
    if (nr > eps)
      for (std::size_t j = 0; j < n; ++j) v[i * n + j] = row[j] / nr;
  }
  Tensor out = Tensor::from_data(a.shape(), std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, out, ia, io, m, n, eps,
                                                 norms = std::move(norms)]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < m; ++i) {
        if (norms[i] <= eps) continue;
        const double* y = out.data().data() + i * n;
        const double* g = go.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (g[j] - y[j] * dot) / norms[i];
      }
    };
  }
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: rank must be 2, got " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.data()[i * n + j];
  Tensor out = Tensor::from_data({n, m}, std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, m, n]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    };
  }
  return out;
}

Tensor Tape::reshape(const Tensor& a, std::vector<std::size_t> shape) {
  Tensor out = Tensor::from_data(std::move(shape), a.data(), a.dtype());
  if (out.size() != a.size())
    throw DimensionError("reshape: size mismatch between " + shape_str(a.shape()) + " and " +
                         shape_str(out.shape()));
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
  }
  return out;
}

Tensor Tape::slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.rank() != 2) throw DimensionError("slice_rows: rank must be 2");
  if (r0 >= r1 || r1 > a.rows()) throw DimensionError("slice_rows: invalid range");
  const std::size_t n = a.cols();
  std::vector<double> v(a.data().begin() + static_cast<long>(r0 * n),
                        a.data().begin() + static_cast<long>(r1 * n));
  Tensor out = Tensor::from_data({r1 - r0, n}, std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, r0, n]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[r0 * n + i] += go[i];
    };
  }
  return out;
}

Tensor Tape::slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2) throw DimensionError("slice_cols: rank must be 2");
  if (c0 >= c1 || c1 > a.cols()) throw DimensionError("slice_cols: invalid range");
  const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
  std::vector<double> v(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = a.data()[i * n + c0 + j];
  Tensor out = Tensor::from_data({m, w}, std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, m, n, c0, w]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * n + c0 + j] += go[i * w + j];
    };
  }
  return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty input");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  DType dt = DType::f32;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.cols() != n)
      throw DimensionError("concat_rows: shapes disagree, got " + shape_str(p.shape()));
    m += p.rows();
    if (p.dtype() == DType::f64) dt = DType::f64;
  }
  std::vector<double> v;
  v.reserve(m * n);
  for (const Tensor& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  Tensor out = Tensor::from_data({m, n}, std::move(v), dt);
  std::vector<int> idx(parts.size());
  std::vector<std::size_t> offsets(parts.size());
  bool tracked = false;
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    idx[p] = track(parts[p]);
    offsets[p] = off;
    off += parts[p].size();
    tracked = tracked || idx[p] >= 0;
  }
  if (tracked) {
    int io = add_node(out);
    std::vector<std::size_t> sizes(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) sizes[p] = parts[p].size();
    nodes_[static_cast<std::size_t>(io)].back = [this, io, idx, offsets, sizes]() {
      const std::vector<double>& go = grad_buf(io);
      for (std::size_t p = 0; p < idx.size(); ++p) {
        if (idx[p] < 0) continue;
        std::vector<double>& gp = grad_buf(idx[p]);
        for (std::size_t i = 0; i < sizes[p]; ++i) gp[i] += go[offsets[p] + i];
      }
    };
  }
  return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty input");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  DType dt = DType::f32;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != m)
      throw DimensionError("concat_cols: shapes disagree, got " + shape_str(p.shape()));
    n += p.cols();
    if (p.dtype() == DType::f64) dt = DType::f64;
  }
  std::vector<double> v(m * n);
  std::size_t coff = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) v[i * n + coff + j] = p.data()[i * w + j];
    coff += w;
  }
  Tensor out = Tensor::from_data({m, n}, std::move(v), dt);
  std::vector<int> idx(parts.size());
  std::vector<std::size_t> offsets(parts.size()), widths(parts.size());
  bool tracked = false;
  coff = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    idx[p] = track(parts[p]);
    offsets[p] = coff;
    widths[p] = parts[p].cols();
    coff += widths[p];
    tracked = tracked || idx[p] >= 0;
  }
  if (tracked) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, io, idx, offsets, widths, m, n]() {
      const std::vector<double>& go = grad_buf(io);
      for (std::size_t p = 0; p < idx.size(); ++p) {
        if (idx[p] < 0) continue;
        std::vector<double>& gp = grad_buf(idx[p]);
        const std::size_t w = widths[p];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * n + offsets[p] + j];
      }
    };
  }
  return out;
}

Tensor Tape::scale_rows(const Tensor& a, const std::vector<double>& gates) {
  if (a.rank() != 2) throw DimensionError("scale_rows: rank must be 2");
  if (a.rows() != gates.size())
    throw DimensionError("scale_rows: " + std::to_string(gates.size()) + " gates for shape " +
                         shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = a.data()[i * n + j] * gates[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(v), a.dtype());
  int ia = track(a);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, m, n, gates]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[i * n + j] * gates[i];
    };
  }
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be rank 2");
  const std::size_t b = logits.rows(), n = logits.cols();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(b));
  for (std::size_t i = 0; i < b; ++i)
    if (labels[i] >= n)
      throw ValidationError("cross_entropy: label " + std::to_string(labels[i]) +
                            " out of range for " + std::to_string(n) + " classes");
  double loss = 0.0;
  std::vector<double> probs(b * n);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      denom += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= denom;
    loss += std::log(denom) + mx - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  Tensor out = Tensor::from_data({1}, {loss}, logits.dtype());
  int ia = track(logits);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, b, n, labels,
                                                 probs = std::move(probs)]() {
      const double g = grad_buf(io)[0] / static_cast<double>(b);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g * probs[i * n + j];
        ga[i * n + labels[i]] -= g;
      }
    };
  }
  return out;
}

Tensor Tape::arcface_adjust(const Tensor& cosines, const std::vector<std::size_t>& labels,
                            double m) {
  if (cosines.rank() != 2) throw DimensionError("arcface_adjust: cosines must be rank 2");
  const std::size_t b = cosines.rows(), n = cosines.cols();
  if (labels.size() != b)
    throw DimensionError("arcface_adjust: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(b));
  const double pi = 3.141592653589793;
  std::vector<double> v(cosines.data());
  std::vector<double> dtarget(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= n)
      throw ValidationError("arcface_adjust: label " + std::to_string(labels[i]) +
                            " out of range for " + std::to_string(n) + " classes");
    const double c = std::clamp(v[i * n + labels[i]], -1.0, 1.0);
    const double theta = std::acos(c);
    if (theta > pi - m) {
      v[i * n + labels[i]] = std::cos(pi);  // clamped; locally constant
      dtarget[i] = 0.0;
    } else {
      v[i * n + labels[i]] = std::cos(theta + m);
      const double s = std::max(std::sin(theta), 1e-6);
      dtarget[i] = std::sin(theta + m) / s;
    }
  }
  Tensor out = Tensor::from_data(cosines.shape(), std::move(v), cosines.dtype());
  int ia = track(cosines);
  if (ia >= 0) {
    int io = add_node(out);
    nodes_[static_cast<std::size_t>(io)].back = [this, ia, io, b, n, labels,
                                                 dtarget = std::move(dtarget)]() {
      const std::vector<double>& go = grad_buf(io);
      std::vector<double>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j)
          ga[i * n + j] += go[i * n + j] * (j == labels[i] ? dtarget[i] : 1.0);
    };
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (backward_done_) throw ContractError("backward: tape already replayed");
  backward_done_ = true;
  int iloss = lookup(loss);
  if (iloss < 0) return;  // loss disconnected from every tracked leaf
  grad_buf(iloss)[0] = 1.0;
  for (std::size_t i = nodes_.size(); i > 0; --i) {
    if (nodes_[i - 1].back) nodes_[i - 1].back();
  }
}

Tensor Tape::grad(const Tensor& leaf) const {
  int idx = lookup(leaf);
  if (idx < 0) return Tensor::zeros(leaf.shape(), DType::f64);
  return Tensor::from_data(leaf.shape(), grads_[static_cast<std::size_t>(idx)], DType::f64);
}

double finite_diff_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& params,
                         double h) {
  if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");
  Tape tape;
  Tensor loss = f(tape);
  if (!std::isfinite(loss.value()))
    throw ValidationError("finite_diff_check: non-finite function value");
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(tape.grad(p));

  auto eval = [&f]() {
    Tape t(false);
    double v = f(t).value();
    if (!std::isfinite(v)) throw ValidationError("finite_diff_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor param = params[p];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param.data()[i];
      param.data()[i] = saved + h;
      const double fp = eval();
      param.data()[i] = saved - h;
      const double fm = eval();
      param.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[p].data()[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace kpr
