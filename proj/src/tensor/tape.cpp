#include <algorithm>
#include <cmath>
#include <numbers>

#include "gcnforge/error.hpp"
#include "gcnforge/kernels.hpp"
#include "gcnforge/tensor.hpp"

namespace gcnforge {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

// True when b's shape equals the trailing dims of a's shape.
bool is_suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

void require_broadcastable(const Tensor& a, const Tensor& b, const char* op) {
  if (!is_suffix_shape(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void()> backward) {
  Tensor out = output;
  out.set_requires_grad(true);
  nodes_.push_back(Node{op, std::move(inputs), out, std::move(backward)});
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  require_finite(a, "matmul input");
  require_finite(b, "matmul input");
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data(), false);
  require_finite(out, "matmul output");
  if (wants_grad({&a, &b})) {
    record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        std::vector<double> bt(k * n);
        kernels::transpose(k, n, b.data().data(), bt.data());
        kernels::gemm_nn(m, n, k, g, bt.data(), a.grad().data(), true);
      }
      if (b.requires_grad()) kernels::gemm_tn_acc(k, m, n, a.data().data(), g, b.grad().data());
    });
  }
  return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  require_finite(a, "matmul_nt input");
  require_finite(b, "matmul_nt input");
  std::vector<double> bt(k * n);
  kernels::transpose(n, k, b.data().data(), bt.data());
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nn(m, k, n, a.data().data(), bt.data(), out.data().data(), false);
  require_finite(out, "matmul_nt output");
  if (wants_grad({&a, &b})) {
    record("matmul_nt", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        kernels::gemm_nn(m, n, k, g, b.data().data(), a.grad().data(), true);
      }
      if (b.requires_grad()) kernels::gemm_tn_acc(n, m, k, g, a.data().data(), b.grad().data());
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_broadcastable(a, b, "add");
  require_finite(a, "add input");
  require_finite(b, "add input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.data();
  const std::size_t nb = bd.size();
  for (std::size_t i = 0; i < od.size(); i += nb) {
    for (std::size_t j = 0; j < nb; ++j) od[i + j] = ad[i + j] + bd[j];
  }
  require_finite(out, "add output");
  if (wants_grad({&a, &b})) {
    record("add", {a, b}, out, [a, b, out, nb]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); i += nb) {
          for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_broadcastable(a, b, "mul");
  require_finite(a, "mul input");
  require_finite(b, "mul input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.data();
  const std::size_t nb = bd.size();
  for (std::size_t i = 0; i < od.size(); i += nb) {
    for (std::size_t j = 0; j < nb; ++j) od[i + j] = ad[i + j] * bd[j];
  }
  require_finite(out, "mul output");
  if (wants_grad({&a, &b})) {
    record("mul", {a, b}, out, [a, b, out, nb]() mutable {
      const auto g = out.grad();
      const auto ad = a.data();
      const auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); i += nb) {
          for (std::size_t j = 0; j < nb; ++j) ga[i + j] += g[i + j] * bd[j];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); i += nb) {
          for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j] * ad[i + j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  require_finite(a, "sub input");
  require_finite(b, "sub input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  require_finite(out, "sub output");
  if (wants_grad({&a, &b})) {
    record("sub", {a, b}, out, [a, b, out]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, double factor) {
  if (!std::isfinite(factor)) throw NumericError("scale: non-finite factor");
  require_finite(a, "scale input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * factor;
  require_finite(out, "scale output");
  if (wants_grad({&a})) {
    record("scale", {a}, out, [a, out, factor]() mutable {
      const auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor Tape::exp(const Tensor& a) {
  require_finite(a, "exp input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::exp(ad[i]);
  require_finite(out, "exp output");
  if (wants_grad({&a})) {
    record("exp", {a}, out, [a, out]() mutable {
      const auto g = out.grad();
      const auto od = out.data();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * od[i];
    });
  }
  return out;
}

Tensor Tape::clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw Error("clamp: lo must not exceed hi");
  require_finite(a, "clamp input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::clamp(ad[i], lo, hi);
  if (wants_grad({&a})) {
    record("clamp", {a}, out, [a, out, lo, hi]() mutable {
      const auto g = out.grad();
      const auto ad = a.data();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (ad[i] >= lo && ad[i] <= hi) ga[i] += g[i];
      }
    });
  }
  return out;
}

Tensor Tape::minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  require_finite(a, "minimum input");
  require_finite(b, "minimum input");
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::min(ad[i], bd[i]);
  if (wants_grad({&a, &b})) {
    record("minimum", {a, b}, out, [a, b, out]() mutable {
      const auto g = out.grad();
      const auto ad = a.data();
      const auto bd = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (ad[i] <= bd[i]) {
          if (a.requires_grad()) a.grad()[i] += g[i];
        } else if (b.requires_grad()) {
          b.grad()[i] += g[i];
        }
      }
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  require_finite(a, "sum input");
  double s = 0.0;
  for (const double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  require_finite(out, "sum output");
  if (wants_grad({&a})) {
    record("sum", {a}, out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto& x : a.grad()) x += g;
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor Tape::weighted_sum(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.numel()) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) +
                     " weights for tensor of shape " + shape_str(a.shape()));
  }
  require_finite(a, "weighted_sum input");
  const auto ad = a.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    if (!std::isfinite(weights[i])) throw NumericError("weighted_sum: non-finite weight");
    s += weights[i] * ad[i];
  }
  Tensor out = Tensor::scalar(s);
  require_finite(out, "weighted_sum output");
  if (wants_grad({&a})) {
    std::vector<double> w(weights.begin(), weights.end());
    record("weighted_sum", {a}, out, [a, out, w = std::move(w)]() mutable {
      const double g = out.grad()[0];
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * w[i];
    });
  }
  return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding_lookup");
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (const int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) + " out of range for table " +
                       shape_str(table.shape()));
    }
  }
  require_finite(table, "embedding_lookup table");
  Tensor out = Tensor::zeros({ids.size(), d});
  const auto td = table.data();
  auto od = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                od.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (wants_grad({&table})) {
    std::vector<int> idv(ids.begin(), ids.end());
    record("embedding_lookup", {table}, out, [table, out, idv = std::move(idv), d]() mutable {
      const auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        const std::size_t base = static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t j = 0; j < d; ++j) gt[base + j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor Tape::gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: empty row list");
  const std::size_t r = a.dim(0), c = a.dim(1);
  for (const auto row : rows) {
    if (row >= r) {
      throw ShapeError("gather_rows: row " + std::to_string(row) + " out of range for " +
                       shape_str(a.shape()));
    }
  }
  require_finite(a, "gather_rows input");
  Tensor out = Tensor::zeros({rows.size(), c});
  const auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                od.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  if (wants_grad({&a})) {
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    record("gather_rows", {a}, out, [a, out, rv = std::move(rv), c]() mutable {
      const auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < rv.size(); ++i) {
        for (std::size_t j = 0; j < c; ++j) ga[rv[i] * c + j] += g[i * c + j];
      }
    });
  }
  return out;
}

Tensor Tape::softmax(const Tensor& a, int axis) {
  require_rank(a, 2, "softmax");
  if (axis == -1) axis = 1;
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0, 1 or -1");
  require_finite(a, "softmax input");
  const std::size_t r = a.dim(0), c = a.dim(1);
  // A softmax group is `len` elements spaced `stride` apart.
  const std::size_t groups = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  const std::size_t step = axis == 1 ? c : 1;
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  auto od = out.data();
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * step;
    double mx = ad[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, ad[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(ad[base + i * stride] - mx);
      od[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) od[base + i * stride] /= z;
  }
  if (wants_grad({&a})) {
    record("softmax", {a}, out, [a, out, groups, len, stride, step]() mutable {
      const auto g = out.grad();
      const auto y = out.data();
      auto ga = a.grad();
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const std::size_t base = grp * step;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += g[base + i * stride] * y[base + i * stride];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t idx = base + i * stride;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t c = x.cols();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  }
  require_finite(x, "layer_norm input");
  require_finite(gain, "layer_norm gain");
  require_finite(bias, "layer_norm bias");
  const std::size_t r = x.rows();
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(r);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  auto od = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xd.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * rs;
      xhat[i * c + j] = h;
      od[i * c + j] = h * gd[j] + bd[j];
    }
  }
  require_finite(out, "layer_norm output");
  if (wants_grad({&x, &gain, &bias})) {
    record("layer_norm", {x, gain, bias}, out,
           [x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), r, c]() mutable {
             const auto g = out.grad();
             const auto gd = gain.data();
             if (gain.requires_grad() || bias.requires_grad()) {
               for (std::size_t i = 0; i < r; ++i) {
                 for (std::size_t j = 0; j < c; ++j) {
                   if (gain.requires_grad()) gain.grad()[j] += g[i * c + j] * xhat[i * c + j];
                   if (bias.requires_grad()) bias.grad()[j] += g[i * c + j];
                 }
               }
             }
             if (x.requires_grad()) {
               auto gx = x.grad();
               const double inv_c = 1.0 / static_cast<double>(c);
               for (std::size_t i = 0; i < r; ++i) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t j = 0; j < c; ++j) {
                   const double dh = g[i * c + j] * gd[j];
                   m1 += dh;
                   m2 += dh * xhat[i * c + j];
                 }
                 m1 *= inv_c;
                 m2 *= inv_c;
                 for (std::size_t j = 0; j < c; ++j) {
                   const double dh = g[i * c + j] * gd[j];
                   gx[i * c + j] += rstd[i] * (dh - m1 - xhat[i * c + j] * m2);
                 }
               }
             }
           });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& x) {
  require_finite(x, "gelu input");
  Tensor out = Tensor::zeros(x.shape());
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    const double v = xd[i];
    od[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  require_finite(out, "gelu output");
  if (wants_grad({&x})) {
    record("gelu", {x}, out, [x, out]() mutable {
      const auto g = out.grad();
      const auto xd = x.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xd[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (wants_grad({&x})) {
    record("reshape", {x}, out, [x, out]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  require_finite(x, "transpose input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r});
  kernels::transpose(r, c, x.data().data(), out.data().data());
  if (wants_grad({&x})) {
    record("transpose", {x}, out, [x, out, r, c]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
      }
    });
  }
  return out;
}

Tensor Tape::concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    require_finite(p, "concat input");
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_block = out_shape[axis] * inner;

  Tensor out = Tensor::zeros(out_shape);
  auto od = out.data();
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.shape()[axis] * inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  od.begin() + static_cast<std::ptrdiff_t>(o * out_block + off));
    }
    off += block;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (recording_ && any) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat", inputs, out, [inputs, out, offsets, outer, inner, out_block, axis]() mutable {
      const auto g = out.grad();
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& p = inputs[k];
        if (!p.requires_grad()) continue;
        const std::size_t block = p.shape()[axis] * inner;
        auto gp = p.grad();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < block; ++i) {
            gp[o * block + i] += g[o * out_block + offsets[k] + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::dropout(const Tensor& x, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: probability must be in [0, 1)");
  if (p == 0.0) return x;
  require_finite(x, "dropout input");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  Tensor out = Tensor::zeros(x.shape());
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * mask[i];
  if (wants_grad({&x})) {
    record("dropout", {x}, out, [x, out, mask = std::move(mask)]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

Tensor Tape::causal_attention(const Tensor& qkv, std::size_t n_heads,
                              std::span<const std::size_t> segments) {
  require_rank(qkv, 2, "causal_attention");
  const std::size_t n = qkv.dim(0), width = qkv.dim(1);
  if (width % 3 != 0) {
    throw ShapeError("causal_attention: width of " + shape_str(qkv.shape()) +
                     " is not divisible by 3");
  }
  const std::size_t d = width / 3;
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("causal_attention: model width " + std::to_string(d) +
                     " not divisible by head count " + std::to_string(n_heads));
  }
  std::size_t total = 0;
  for (const auto len : segments) {
    if (len == 0) throw ShapeError("causal_attention: empty segment");
    total += len;
  }
  if (total != n) {
    throw ShapeError("causal_attention: segments sum to " + std::to_string(total) + " but input has " +
                     std::to_string(n) + " rows");
  }
  require_finite(qkv, "causal_attention input");
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Attention weights per (segment, head) as dense len x len blocks.
  std::vector<std::size_t> prob_base;
  std::size_t prob_size = 0;
  for (const auto len : segments) {
    prob_base.push_back(prob_size);
    prob_size += n_heads * len * len;
  }
  std::vector<double> probs(prob_size, 0.0);
  Tensor out = Tensor::zeros({n, d});
  const double* in = qkv.data().data();
  double* od = out.data().data();
  std::size_t row0 = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const std::size_t len = segments[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* keys = in + row0 * width + d + h * hd;
      const double* values = in + row0 * width + 2 * d + h * hd;
      double* pb = probs.data() + prob_base[s] + h * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        kernels::attend_row(in + (row0 + i) * width + h * hd, keys, values, width, i + 1, hd, scale,
                            pb + i * len, od + (row0 + i) * d + h * hd);
      }
    }
    row0 += len;
  }
  require_finite(out, "causal_attention output");
  if (wants_grad({&qkv})) {
    std::vector<std::size_t> segs(segments.begin(), segments.end());
    record("causal_attention", {qkv}, out,
           [qkv, out, segs = std::move(segs), prob_base = std::move(prob_base),
            probs = std::move(probs), n_heads, d, hd, width, scale]() mutable {
             const double* g = out.grad().data();
             const double* in = qkv.data().data();
             double* gin = qkv.grad().data();
             std::vector<double> dp;
             std::size_t row0 = 0;
             for (std::size_t s = 0; s < segs.size(); ++s) {
               const std::size_t len = segs[s];
               dp.assign(len, 0.0);
               for (std::size_t h = 0; h < n_heads; ++h) {
                 const double* pb = probs.data() + prob_base[s] + h * len * len;
                 for (std::size_t i = 0; i < len; ++i) {
                   const double* go = g + (row0 + i) * d + h * hd;
                   const double* p = pb + i * len;
                   const double* q = in + (row0 + i) * width + h * hd;
                   double* gq = gin + (row0 + i) * width + h * hd;
                   double dot = 0.0;
                   for (std::size_t j = 0; j <= i; ++j) {
                     const double* v = in + (row0 + j) * width + 2 * d + h * hd;
                     double* gv = gin + (row0 + j) * width + 2 * d + h * hd;
                     double acc = 0.0;
                     for (std::size_t t = 0; t < hd; ++t) {
                       acc += go[t] * v[t];
                       gv[t] += p[j] * go[t];
                     }
                     dp[j] = acc;
                     dot += p[j] * acc;
                   }
                   for (std::size_t j = 0; j <= i; ++j) {
                     const double ds = p[j] * (dp[j] - dot) * scale;
                     if (ds == 0.0) continue;
                     const double* k = in + (row0 + j) * width + d + h * hd;
                     double* gk = gin + (row0 + j) * width + d + h * hd;
                     for (std::size_t t = 0; t < hd; ++t) {
                       gq[t] += ds * k[t];
                       gk[t] += ds * q[t];
                     }
                   }
                 }
               }
               row0 += len;
             }
           });
  }
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, std::span<const int> targets,
                           std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries for logits " +
                     shape_str(logits.shape()));
  }
  require_finite(logits, "cross_entropy logits");
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range for vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: every position is masked");
  const double* ld = logits.data().data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double* row = ld + i * v;
    total += kernels::log_sum_exp(row, v) - row[targets[i]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  if (wants_grad({&logits})) {
    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    record("cross_entropy", {logits}, out,
           [logits, out, tv = std::move(tv), mv = std::move(mv), n, v, count]() mutable {
             const double g = out.grad()[0] / static_cast<double>(count);
             const double* ld = logits.data().data();
             double* gl = logits.grad().data();
             for (std::size_t i = 0; i < n; ++i) {
               if (!mv[i]) continue;
               const double* row = ld + i * v;
               const double lse = kernels::log_sum_exp(row, v);
               for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * std::exp(row[j] - lse);
               gl[i * v + static_cast<std::size_t>(tv[i])] -= g;
             }
           });
  }
  return out;
}

Tensor Tape::token_logprobs(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "token_logprobs");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("token_logprobs: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.shape()));
  }
  for (const int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ShapeError("token_logprobs: target " + std::to_string(t) + " out of range");
    }
  }
  require_finite(logits, "token_logprobs logits");
  const double* ld = logits.data().data();
  Tensor out = Tensor::zeros({n});
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = ld + i * v;
    od[i] = row[targets[i]] - kernels::log_sum_exp(row, v);
  }
  if (wants_grad({&logits})) {
    std::vector<int> tv(targets.begin(), targets.end());
    record("token_logprobs", {logits}, out, [logits, out, tv = std::move(tv), n, v]() mutable {
      const auto g = out.grad();
      const double* ld = logits.data().data();
      double* gl = logits.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        if (g[i] == 0.0) continue;
        const double* row = ld + i * v;
        const double lse = kernels::log_sum_exp(row, v);
        for (std::size_t j = 0; j < v; ++j) gl[i * v + j] -= g[i] * std::exp(row[j] - lse);
        gl[i * v + static_cast<std::size_t>(tv[i])] += g[i];
      }
    });
  }
  return out;
}

Tensor Tape::entropy(const Tensor& logits) {
  require_rank(logits, 2, "entropy");
  require_finite(logits, "entropy logits");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  const double* ld = logits.data().data();
  Tensor out = Tensor::zeros({n});
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = ld + i * v;
    const double lse = kernels::log_sum_exp(row, v);
    double h = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double lp = row[j] - lse;
      h -= std::exp(lp) * lp;
    }
    od[i] = h;
  }
  if (wants_grad({&logits})) {
    record("entropy", {logits}, out, [logits, out, n, v]() mutable {
      const auto g = out.grad();
      const auto od = out.data();
      const double* ld = logits.data().data();
      double* gl = logits.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = ld + i * v;
        const double lse = kernels::log_sum_exp(row, v);
        for (std::size_t j = 0; j < v; ++j) {
          const double lp = row[j] - lse;
          gl[i * v + j] -= g[i] * std::exp(lp) * (lp + od[i]);
        }
      }
    });
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  std::size_t end = nodes_.size();
  while (end > 0 && !nodes_[end - 1].output.shares_storage(loss)) --end;
  if (end == 0) {
    if (loss.requires_grad()) {
      Tensor l = loss;
      l.grad()[0] += 1.0;
      return;
    }
    throw Error("backward: loss was not produced by this tape");
  }
  Tensor l = loss;
  l.grad()[0] += 1.0;
  for (std::size_t i = end; i-- > 0;) nodes_[i].backward();
}

}  // namespace gcnforge
