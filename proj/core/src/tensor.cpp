#include "slpmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace slpmt {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::vector<double>& ensure_grad(TensorStorage& s) {
  if (s.grad.empty()) s.grad.assign(s.value.size(), 0.0);
  return s.grad;
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto s = std::make_shared<TensorStorage>();
  s->value.assign(numel(shape), fill);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size())
    throw ShapeError("from_values: shape " + shape_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  auto s = std::make_shared<TensorStorage>();
  s->shape = std::move(shape);
  s->value = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::normal(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.s_->value) v = stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return s_->value[0];
}

std::vector<double> Tensor::grad_or_zero() const {
  if (has_grad()) return s_->grad;
  return std::vector<double>(size(), 0.0);
}

std::span<double> Tensor::grad_buffer() { return ensure_grad(*s_); }

double Tensor::grad_norm() const {
  double acc = 0.0;
  for (double g : s_->grad) acc += g * g;
  return std::sqrt(acc);
}

Tensor Tensor::clone() const {
  auto s = std::make_shared<TensorStorage>();
  s->shape = s_->shape;
  s->value = s_->value;
  s->requires_grad = s_->requires_grad;
  return Tensor(std::move(s));
}

bool Tensor::all_finite() const {
  return std::all_of(s_->value.begin(), s_->value.end(), [](double v) { return std::isfinite(v); });
}

bool Tape::wants_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Tape::make_output(Shape shape, bool requires_grad) const { return Tensor::zeros(std::move(shape), requires_grad); }

Tensor Tape::matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) mismatch("matmul", a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  const bool rec = wants_record({&a, &b});
  Storage as = a.storage(), bs = b.storage();

  if (b.rank() == 2) {
    const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
    const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
    if (bk != k) mismatch("matmul", a.shape(), b.shape());
    const std::size_t m = a.size() / k;
    Shape os = a.shape();
    os.back() = n;
    Tensor out = make_output(os, rec);
    ConstMap A(a.data(), m, k);
    ConstMap B(b.data(), b.dim(0), b.dim(1));
    MutMap C(out.mutable_values().data(), m, n);
    if (transpose_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
    if (rec) {
      Storage os_ = out.storage();
      record([as, bs, os_, m, k, n, transpose_b] {
        if (os_->grad.empty()) return;
        ConstMap dC(os_->grad.data(), m, n);
        ConstMap A(as->value.data(), m, k);
        const std::size_t br = transpose_b ? n : k, bc = transpose_b ? k : n;
        ConstMap B(bs->value.data(), br, bc);
        if (as->requires_grad) {
          MutMap dA(ensure_grad(*as).data(), m, k);
          if (transpose_b)
            dA.noalias() += dC * B;
          else
            dA.noalias() += dC * B.transpose();
        }
        if (bs->requires_grad) {
          MutMap dB(ensure_grad(*bs).data(), br, bc);
          if (transpose_b)
            dB.noalias() += dC.transpose() * A;
          else
            dB.noalias() += A.transpose() * dC;
        }
      });
    }
    return out;
  }

  const std::size_t r = a.rank();
  if (b.rank() != r || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(r - 2);
  const std::size_t bk = transpose_b ? b.dim(r - 1) : b.dim(r - 2);
  const std::size_t n = transpose_b ? b.dim(r - 2) : b.dim(r - 1);
  if (bk != k) mismatch("matmul", a.shape(), b.shape());
  const std::size_t batches = a.size() / (m * k);
  Shape os = a.shape();
  os.back() = n;
  Tensor out = make_output(os, rec);
  const std::size_t br = transpose_b ? n : k, bc = transpose_b ? k : n;
  double* cdata = out.mutable_values().data();
  for (std::size_t i = 0; i < batches; ++i) {
    ConstMap A(a.data() + i * m * k, m, k);
    ConstMap B(b.data() + i * k * n, br, bc);
    MutMap C(cdata + i * m * n, m, n);
    if (transpose_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
  }
  if (rec) {
    Storage os_ = out.storage();
    record([as, bs, os_, batches, m, k, n, br, bc, transpose_b] {
      if (os_->grad.empty()) return;
      double* ga = as->requires_grad ? ensure_grad(*as).data() : nullptr;
      double* gb = bs->requires_grad ? ensure_grad(*bs).data() : nullptr;
      for (std::size_t i = 0; i < batches; ++i) {
        ConstMap dC(os_->grad.data() + i * m * n, m, n);
        ConstMap A(as->value.data() + i * m * k, m, k);
        ConstMap B(bs->value.data() + i * k * n, br, bc);
        if (ga) {
          MutMap dA(ga + i * m * k, m, k);
          if (transpose_b)
            dA.noalias() += dC * B;
          else
            dA.noalias() += dC * B.transpose();
        }
        if (gb) {
          MutMap dB(gb + i * k * n, br, bc);
          if (transpose_b)
            dB.noalias() += dC.transpose() * A;
          else
            dB.noalias() += A.transpose() * dC;
        }
      }
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const bool rec = wants_record({&a, &b});
  Storage as = a.storage(), bs = b.storage();
  if (a.shape() == b.shape()) {
    Tensor out = make_output(a.shape(), rec);
    double* o = out.mutable_values().data();
    const double *x = a.data(), *y = b.data();
    for (std::size_t i = 0, n = a.size(); i < n; ++i) o[i] = x[i] + y[i];
    if (rec) {
      Storage os = out.storage();
      record([as, bs, os] {
        if (os->grad.empty()) return;
        const std::size_t n = os->grad.size();
        for (Storage s : {as, bs}) {
          if (!s->requires_grad) continue;
          double* g = ensure_grad(*s).data();
          for (std::size_t i = 0; i < n; ++i) g[i] += os->grad[i];
        }
      });
    }
    return out;
  }
  if (b.rank() != 1 || a.rank() == 0 || b.dim(0) != a.shape().back()) mismatch("add", a.shape(), b.shape());
  const std::size_t d = b.dim(0), rows = a.size() / d;
  Tensor out = make_output(a.shape(), rec);
  double* o = out.mutable_values().data();
  const double *x = a.data(), *y = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = x[r * d + j] + y[j];
  if (rec) {
    Storage os = out.storage();
    record([as, bs, os, rows, d] {
      if (os->grad.empty()) return;
      const double* go = os->grad.data();
      if (as->requires_grad) {
        double* g = ensure_grad(*as).data();
        for (std::size_t i = 0; i < rows * d; ++i) g[i] += go[i];
      }
      if (bs->requires_grad) {
        double* g = ensure_grad(*bs).data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += go[r * d + j];
      }
    });
  }
  return out;
}

Tensor Tape::multiply(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("multiply", a.shape(), b.shape());
  const bool rec = wants_record({&a, &b});
  Tensor out = make_output(a.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) o[i] = a[i] * b[i];
  if (rec) {
    Storage as = a.storage(), bs = b.storage(), os = out.storage();
    record([as, bs, os] {
      if (os->grad.empty()) return;
      const std::size_t n = os->grad.size();
      if (as->requires_grad) {
        double* g = ensure_grad(*as).data();
        for (std::size_t i = 0; i < n; ++i) g[i] += os->grad[i] * bs->value[i];
      }
      if (bs->requires_grad) {
        double* g = ensure_grad(*bs).data();
        for (std::size_t i = 0; i < n; ++i) g[i] += os->grad[i] * as->value[i];
      }
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& x) {
  const bool rec = wants_record({&x});
  Tensor out = make_output(x.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (rec) {
    Storage xs = x.storage(), os = out.storage();
    record([xs, os] {
      if (os->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t i = 0, n = os->grad.size(); i < n; ++i)
        if (xs->value[i] > 0.0) g[i] += os->grad[i];
    });
  }
  return out;
}

Tensor Tape::softmax(const Tensor& x) {
  if (x.rank() == 0) mismatch("softmax", x.shape(), {});
  const bool rec = wants_record({&x});
  const std::size_t d = last_dim(x.shape()), rows = x.size() / d;
  Tensor out = make_output(x.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double* y = o + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  if (rec) {
    Storage xs = x.storage(), os = out.storage();
    record([xs, os, rows, d] {
      if (os->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = os->value.data() + r * d;
        const double* dy = os->grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor Tape::log_softmax(const Tensor& x) {
  if (x.rank() == 0) mismatch("log_softmax", x.shape(), {});
  const bool rec = wants_record({&x});
  const std::size_t d = last_dim(x.shape()), rows = x.size() / d;
  Tensor out = make_output(x.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double* y = o + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) y[j] = in[j] - lse;
  }
  if (rec) {
    Storage xs = x.storage(), os = out.storage();
    record([xs, os, rows, d] {
      if (os->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = os->value.data() + r * d;
        const double* dy = os->grad.data() + r * d;
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) total += dy[j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dy[j] - std::exp(y[j]) * total;
      }
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0 || gain.rank() != 1 || gain.shape() != bias.shape() || gain.dim(0) != x.shape().back())
    mismatch("layer_norm", x.shape(), gain.shape());
  const bool rec = wants_record({&x, &gain, &bias});
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  Tensor out = make_output(x.shape(), rec);
  auto normed = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  double* o = out.mutable_values().data();
  const double *g = gain.data(), *b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = s;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * s;
      (*normed)[r * d + j] = h;
      o[r * d + j] = h * g[j] + b[j];
    }
  }
  if (rec) {
    Storage xs = x.storage(), gs = gain.storage(), bs = bias.storage(), os = out.storage();
    record([xs, gs, bs, os, normed, rstd, rows, d] {
      if (os->grad.empty()) return;
      const double* dy = os->grad.data();
      const double* h = normed->data();
      if (gs->requires_grad) {
        double* dg = ensure_grad(*gs).data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * h[r * d + j];
      }
      if (bs->requires_grad) {
        double* db = ensure_grad(*bs).data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
      }
      if (xs->requires_grad) {
        double* dx = ensure_grad(*xs).data();
        const double* gv = gs->value.data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[r * d + j] * gv[j];
            m1 += dh;
            m2 += dh * h[r * d + j];
          }
          m1 *= inv_d;
          m2 *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[r * d + j] * gv[j];
            dx[r * d + j] += (*rstd)[r] * (dh - m1 - h[r * d + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::embedding(const Tensor& table, std::span<const int> ids, const Shape& prefix) {
  if (table.rank() != 2) mismatch("embedding", table.shape(), prefix);
  if (numel(prefix) != ids.size())
    throw ShapeError("embedding: prefix " + shape_string(prefix) + " does not match " + std::to_string(ids.size()) +
                     " ids");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= rows)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(rows) +
                              " rows");
  const bool rec = wants_record({&table});
  Shape os = prefix;
  os.push_back(d);
  Tensor out = make_output(os, rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, o + i * d);
  if (rec) {
    Storage ts = table.storage(), outs = out.storage();
    std::vector<int> saved(ids.begin(), ids.end());
    record([ts, outs, saved = std::move(saved), d] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*ts).data();
      for (std::size_t i = 0; i < saved.size(); ++i) {
        double* row = g + static_cast<std::size_t>(saved[i]) * d;
        const double* src = outs->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
      }
    });
  }
  return out;
}

Tensor Tape::concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) mismatch("concat", first, {axis});
  Shape os = first;
  os[axis] = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) mismatch("concat", first, p.shape());
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i]) mismatch("concat", first, p.shape());
    os[axis] += p.dim(axis);
    rec = rec || wants_record({&p});
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Tensor out = make_output(os, rec);
  double* o = out.mutable_values().data();
  const std::size_t out_row = os[axis] * inner;
  std::size_t offset = 0;
  std::vector<Storage> stores;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t r = 0; r < outer; ++r) std::copy_n(p.data() + r * chunk, chunk, o + r * out_row + offset);
    stores.push_back(p.storage());
    offsets.push_back(offset);
    offset += chunk;
  }
  if (rec) {
    Storage outs = out.storage();
    record([stores, offsets, outs, outer, inner, out_row, axis] {
      if (outs->grad.empty()) return;
      for (std::size_t k = 0; k < stores.size(); ++k) {
        if (!stores[k]->requires_grad) continue;
        const std::size_t chunk = stores[k]->shape[axis] * inner;
        double* g = ensure_grad(*stores[k]).data();
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t j = 0; j < chunk; ++j) g[r * chunk + j] += outs->grad[r * out_row + offsets[k] + j];
      }
    });
  }
  return out;
}

Tensor Tape::slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) mismatch("slice", x.shape(), {axis, begin, end});
  const bool rec = wants_record({&x});
  Shape os = x.shape();
  os[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t in_row = x.dim(axis) * inner, chunk = (end - begin) * inner, off = begin * inner;
  Tensor out = make_output(os, rec);
  double* o = out.mutable_values().data();
  for (std::size_t r = 0; r < outer; ++r) std::copy_n(x.data() + r * in_row + off, chunk, o + r * chunk);
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    record([xs, outs, outer, in_row, chunk, off] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < chunk; ++j) g[r * in_row + off + j] += outs->grad[r * chunk + j];
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= x.rank() || axis1 >= x.rank()) mismatch("transpose", x.shape(), {axis0, axis1});
  const bool rec = wants_record({&x});
  const std::size_t r = x.rank();
  Shape os = x.shape();
  std::swap(os[axis0], os[axis1]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.dim(i + 1);
  std::vector<std::size_t> stride = in_stride;
  std::swap(stride[axis0], stride[axis1]);  // input stride of each output axis

  auto source = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < x.size(); ++o) {
    (*source)[o] = src;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += stride[a];
      if (idx[a] < os[a]) break;
      src -= stride[a] * idx[a];
      idx[a] = 0;
    }
  }
  Tensor out = make_output(os, rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[(*source)[i]];
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    record([xs, outs, source] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t i = 0; i < source->size(); ++i) g[(*source)[i]] += outs->grad[i];
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) mismatch("reshape", x.shape(), shape);
  const bool rec = wants_record({&x});
  Tensor out = make_output(std::move(shape), rec);
  std::copy_n(x.data(), x.size(), out.mutable_values().data());
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    record([xs, outs] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t i = 0; i < outs->grad.size(); ++i) g[i] += outs->grad[i];
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& x, double factor) {
  const bool rec = wants_record({&x});
  Tensor out = make_output(x.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] * factor;
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    record([xs, outs, factor] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t i = 0; i < outs->grad.size(); ++i) g[i] += outs->grad[i] * factor;
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& x) {
  const bool rec = wants_record({&x});
  Tensor out = make_output({}, rec);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  out.mutable_values()[0] = acc;
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    record([xs, outs] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      const double up = outs->grad[0];
      for (std::size_t i = 0; i < xs->value.size(); ++i) g[i] += up;
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor Tape::masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double fill) {
  if (mask.size() != x.size()) mismatch("masked_fill", x.shape(), {mask.size()});
  const bool rec = wants_record({&x});
  Tensor out = make_output(x.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = mask[i] ? fill : x[i];
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    std::vector<std::uint8_t> saved(mask.begin(), mask.end());
    record([xs, outs, saved = std::move(saved)] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t i = 0; i < saved.size(); ++i)
        if (!saved[i]) g[i] += outs->grad[i];
    });
  }
  return out;
}

Tensor Tape::dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be below 1");
  const bool rec = wants_record({&x});
  const double keep_scale = 1.0 / (1.0 - rate);
  auto factor = std::make_shared<std::vector<double>>(x.size());
  for (double& f : *factor) f = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = make_output(x.shape(), rec);
  double* o = out.mutable_values().data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] * (*factor)[i];
  if (rec) {
    Storage xs = x.storage(), outs = out.storage();
    record([xs, outs, factor] {
      if (outs->grad.empty()) return;
      double* g = ensure_grad(*xs).data();
      for (std::size_t i = 0; i < factor->size(); ++i) g[i] += outs->grad[i] * (*factor)[i];
    });
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
  auto& g = ensure_grad(*loss.storage());
  g[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
}

double finite_difference_check(const ScalarFunction& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  {
    Tape tape;
    Tensor y = f(tape, probe);
    if (y.size() != 1) throw ShapeError("finite_difference_check: f must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("finite_difference_check: non-finite function value");
    if (tape.size() > 0 && y.requires_grad()) tape.backward(y);
  }
  const std::vector<double> analytic = probe.grad_or_zero();
  auto evaluate = [&] {
    Tape inference(Tape::Mode::inference);
    const double v = f(inference, probe).item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite function value");
    return v;
  };
  auto values = probe.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + step;
    const double plus = evaluate();
    values[i] = original - step;
    const double minus = evaluate();
    values[i] = original;
    const double numeric = (plus - minus) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace slpmt
