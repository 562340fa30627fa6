#include "tlvm/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "tlvm/error.h"

namespace tlvm::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Stride = Eigen::OuterStride<>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Stride>;
using MutStridedMap = Eigen::Map<RowMat, 0, Stride>;

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw Error(ErrorCode::kShapeMismatch, op + ": " + detail);
}

void require_rank2(const std::string& op, const Tensor& t) {
  if (t.rank() != 2) shape_error(op, "expected a 2-D tensor, got " + shape_string(t.shape()));
}

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                  static_cast<Eigen::Index>(t.dim(1)));
}

MutMap grad_matrix(const Tensor& t) {
  return MutMap(t.grad_buffer().data(), static_cast<Eigen::Index>(t.dim(0)),
                static_cast<Eigen::Index>(t.dim(1)));
}

ConstMap grad_matrix_const(const Tensor& t) {
  return ConstMap(t.grad().data(), static_cast<Eigen::Index>(t.dim(0)),
                  static_cast<Eigen::Index>(t.dim(1)));
}

std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", "cannot multiply " + shape_string(a.shape()) + " by " +
                              shape_string(b.shape()));
  }
  Tensor out(Shape{a.dim(0), b.dim(1)});
  MutMap(out.mutable_data().data(), static_cast<Eigen::Index>(a.dim(0)),
         static_cast<Eigen::Index>(b.dim(1)))
      .noalias() = as_matrix(a) * as_matrix(b);
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("matmul", {a, b}, out, [a, b, out] {
      const ConstMap dc = grad_matrix_const(out);
      if (a.requires_grad()) grad_matrix(a).noalias() += dc * as_matrix(b).transpose();
      if (b.requires_grad()) grad_matrix(b).noalias() += as_matrix(a).transpose() * dc;
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error("add", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<double> values(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = x[i] + y[i];
  Tensor out(a.shape(), std::move(values));
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("add", {a, b}, out, [a, b, out] {
      const auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto dst = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error("mul", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<double> values(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = x[i] * y[i];
  Tensor out(a.shape(), std::move(values));
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("mul", {a, b}, out, [a, b, out] {
      const auto g = out.grad();
      const auto x = a.data();
      const auto y = b.data();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> values(x.data().begin(), x.data().end());
  for (double& v : values) v *= factor;
  Tensor out(x.shape(), std::move(values));
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record("scale", {x}, out, [x, out, factor] {
      const auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_extent(x);
  if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != n) {
    shape_error("add_bias", "cannot add bias " + shape_string(bias.shape()) + " to " +
                                shape_string(x.shape()));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += b[i % n];
  Tensor out(x.shape(), std::move(values));
  if (Tape* tape = recording_tape({&x, &bias})) {
    out.set_requires_grad(true);
    tape->record("add_bias", {x, bias}, out, [x, bias, out, n] {
      const auto g = out.grad();
      if (x.requires_grad()) {
        auto dx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) db[i % n] += g[i];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record("sum", {x}, out, [x, out] {
      const double g = out.grad()[0];
      for (double& d : x.grad_buffer()) d += g;
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = last_extent(x);
  const std::size_t rows = x.numel() / n;
  const auto in = x.data();
  std::vector<double> values(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * n;
    double* dst = values.data() + r * n;
    const double peak = *std::max_element(src, src + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - peak);
      total += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
  }
  Tensor out(x.shape(), std::move(values));
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record("softmax", {x}, out, [x, out, n, rows] {
      const auto y = out.data();
      const auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          dx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_extent(x);
  if (x.rank() == 0 || gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    shape_error("layer_norm", "input " + shape_string(x.shape()) + " with gamma " +
                                  shape_string(gamma.shape()) + " and beta " +
                                  shape_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  std::vector<double> normalized(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> values(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += src[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (src[j] - mean) * rstd[r];
      normalized[r * d + j] = xh;
      values[r * d + j] = xh * g[j] + b[j];
    }
  }
  Tensor out(x.shape(), std::move(values));
  if (Tape* tape = recording_tape({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->record("layer_norm", {x, gamma, beta}, out,
                 [x, gamma, beta, out, d, rows, normalized = std::move(normalized),
                  rstd = std::move(rstd)] {
                   const auto dy = out.grad();
                   const auto gam = gamma.data();
                   if (gamma.requires_grad()) {
                     auto dg = gamma.grad_buffer();
                     for (std::size_t i = 0; i < dy.size(); ++i) dg[i % d] += dy[i] * normalized[i];
                   }
                   if (beta.requires_grad()) {
                     auto db = beta.grad_buffer();
                     for (std::size_t i = 0; i < dy.size(); ++i) db[i % d] += dy[i];
                   }
                   if (!x.requires_grad()) return;
                   auto dx = x.grad_buffer();
                   const double inv_d = 1.0 / static_cast<double>(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double mean_dxh = 0.0;
                     double mean_dxh_xh = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dxh = dy[r * d + j] * gam[j];
                       mean_dxh += dxh;
                       mean_dxh_xh += dxh * normalized[r * d + j];
                     }
                     mean_dxh *= inv_d;
                     mean_dxh_xh *= inv_d;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dxh = dy[r * d + j] * gam[j];
                       dx[r * d + j] +=
                           rstd[r] * (dxh - mean_dxh - normalized[r * d + j] * mean_dxh_xh);
                     }
                   }
                 });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  // 0.5 v (1 + tanh(u)) == v * sigmoid(2u), u = k (v + c v^3).
  constexpr double kCoef = 0.044715;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  const auto n = static_cast<Eigen::Index>(x.numel());
  const Eigen::Map<const Eigen::ArrayXd> v(x.data().data(), n);
  auto gate = std::make_shared<Eigen::ArrayXd>(
      (1.0 + (-2.0 * k * (v + kCoef * v.cube())).exp()).inverse());
  std::vector<double> values(x.numel());
  Eigen::Map<Eigen::ArrayXd>(values.data(), n) = v * *gate;
  Tensor out(x.shape(), std::move(values));
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record("gelu", {x}, out, [x, out, k, gate, n] {
      const Eigen::Map<const Eigen::ArrayXd> v(x.data().data(), n);
      const Eigen::Map<const Eigen::ArrayXd> g(out.grad().data(), n);
      Eigen::Map<Eigen::ArrayXd> dx(x.grad_buffer().data(), n);
      const Eigen::ArrayXd& s = *gate;
      dx += g * (s + 2.0 * k * v * s * (1.0 - s) * (1.0 + 3.0 * kCoef * v.square()));
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  require_rank2("cross_entropy", logits);
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    shape_error("cross_entropy", "logits " + shape_string(logits.shape()) + " with " +
                                     std::to_string(targets.size()) + " targets and " +
                                     std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw Error(ErrorCode::kInvalidArgument,
                  "cross_entropy: target " + std::to_string(targets[t]) + " at position " +
                      std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0) {
    throw Error(ErrorCode::kInvalidArgument, "cross_entropy: every position is masked");
  }
  const auto in = logits.data();
  std::vector<double> probs(rows * vocab, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const double* row = in.data() + t * vocab;
    const double peak = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[t * vocab + j] = std::exp(row[j] - peak);
      z += probs[t * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[t * vocab + j] /= z;
    total += peak + std::log(z) - row[targets[t]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  if (Tape* tape = recording_tape({&logits})) {
    out.set_requires_grad(true);
    std::vector<std::int32_t> kept_targets(targets.begin(), targets.end());
    Mask kept_mask(mask.begin(), mask.end());
    tape->record("cross_entropy", {logits}, out,
                 [logits, out, rows, vocab, count, probs = std::move(probs),
                  kept_targets = std::move(kept_targets), kept_mask = std::move(kept_mask)] {
                   const double g = out.grad()[0] / static_cast<double>(count);
                   auto dx = logits.grad_buffer();
                   for (std::size_t t = 0; t < rows; ++t) {
                     if (!kept_mask[t]) continue;
                     for (std::size_t j = 0; j < vocab; ++j) {
                       dx[t * vocab + j] += g * probs[t * vocab + j];
                     }
                     dx[t * vocab + static_cast<std::size_t>(kept_targets[t])] -= g;
                   }
                 });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank2("embedding", table);
  if (ids.empty()) shape_error("embedding", "no ids");
  const std::size_t d = table.dim(1);
  const auto src = table.data();
  std::vector<double> values(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw Error(ErrorCode::kInvalidToken, "embedding: id " + std::to_string(ids[i]) +
                                                " outside table of " +
                                                std::to_string(table.dim(0)) + " rows");
    }
    std::copy_n(src.data() + static_cast<std::size_t>(ids[i]) * d, d, values.data() + i * d);
  }
  Tensor out(Shape{ids.size(), d}, std::move(values));
  if (Tape* tape = recording_tape({&table})) {
    out.set_requires_grad(true);
    std::vector<std::int32_t> kept(ids.begin(), ids.end());
    tape->record("embedding", {table}, out, [table, out, d, kept = std::move(kept)] {
      const auto g = out.grad();
      auto dt = table.grad_buffer();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        double* row = dt.data() + static_cast<std::size_t>(kept[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) shape_error("concat_rows", "no inputs");
  const std::size_t width = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(1) != width) {
      shape_error("concat_rows", "cannot stack " + shape_string(p.shape()) + " under width " +
                                     std::to_string(width));
    }
    rows += p.dim(0);
  }
  std::vector<double> values;
  values.reserve(rows * width);
  bool any_grad = false;
  for (const Tensor& p : parts) {
    values.insert(values.end(), p.data().begin(), p.data().end());
    any_grad = any_grad || p.requires_grad();
  }
  Tensor out(Shape{rows, width}, std::move(values));
  Tape* tape = active_tape();
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape->record("concat_rows", inputs, out, [inputs, out] {
      const auto g = out.grad();
      std::size_t offset = 0;
      for (const Tensor& p : inputs) {
        if (p.requires_grad()) {
          auto dst = p.grad_buffer();
          for (std::size_t i = 0; i < p.numel(); ++i) dst[i] += g[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2("slice_rows", x);
  if (count == 0 || begin + count > x.dim(0)) {
    shape_error("slice_rows", "rows [" + std::to_string(begin) + ", " +
                                  std::to_string(begin + count) + ") of " +
                                  shape_string(x.shape()));
  }
  const std::size_t width = x.dim(1);
  const auto src = x.data().subspan(begin * width, count * width);
  Tensor out(Shape{count, width}, std::vector<double>(src.begin(), src.end()));
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record("slice_rows", {x}, out, [x, out, begin, width] {
      const auto g = out.grad();
      auto dst = x.grad_buffer().subspan(begin * width, g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionOptions& options) {
  require_rank2("attention", q);
  require_rank2("attention", k);
  require_rank2("attention", v);
  const std::size_t d = q.dim(1);
  const std::size_t lq = q.dim(0);
  const std::size_t lk = k.dim(0);
  if (k.dim(1) != d || v.shape() != k.shape() || options.n_heads == 0 ||
      d % options.n_heads != 0) {
    shape_error("attention", "q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                                 ", v " + shape_string(v.shape()) + ", heads " +
                                 std::to_string(options.n_heads));
  }
  if (options.causal && options.q_offset + lq > lk) {
    shape_error("attention", "causal queries at offset " + std::to_string(options.q_offset) +
                                 " need at least " + std::to_string(options.q_offset + lq) +
                                 " keys, got " + std::to_string(lk));
  }
  const std::size_t heads = options.n_heads;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto ei = [](std::size_t n) { return static_cast<Eigen::Index>(n); };

  // probs[h] is the [lq x lk] attention matrix for head h.
  std::vector<double> probs(heads * lq * lk, 0.0);
  Tensor out(Shape{lq, d});
  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap qh(q.data().data() + h * dh, ei(lq), ei(dh), Stride(ei(d)));
    ConstStridedMap kh(k.data().data() + h * dh, ei(lk), ei(dh), Stride(ei(d)));
    ConstStridedMap vh(v.data().data() + h * dh, ei(lk), ei(dh), Stride(ei(d)));
    MutMap p(probs.data() + h * lq * lk, ei(lq), ei(lk));
    p.noalias() = (qh * kh.transpose()) * inv_sqrt;
    for (std::size_t i = 0; i < lq; ++i) {
      const std::size_t visible = options.causal ? options.q_offset + i + 1 : lk;
      double* row = p.data() + i * lk;
      const double peak = *std::max_element(row, row + visible);
      double total = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        row[j] = std::exp(row[j] - peak);
        total += row[j];
      }
      for (std::size_t j = 0; j < visible; ++j) row[j] /= total;
      std::fill(row + visible, row + lk, 0.0);
    }
    MutStridedMap oh(out.mutable_data().data() + h * dh, ei(lq), ei(dh), Stride(ei(d)));
    oh.noalias() = p * vh;
  }

  if (Tape* tape = recording_tape({&q, &k, &v})) {
    out.set_requires_grad(true);
    tape->record("attention", {q, k, v}, out,
                 [q, k, v, out, heads, dh, d, lq, lk, inv_sqrt, ei,
                  probs = std::move(probs)] {
                   RowMat dp(ei(lq), ei(lk));
                   for (std::size_t h = 0; h < heads; ++h) {
                     ConstStridedMap qh(q.data().data() + h * dh, ei(lq), ei(dh), Stride(ei(d)));
                     ConstStridedMap kh(k.data().data() + h * dh, ei(lk), ei(dh), Stride(ei(d)));
                     ConstStridedMap vh(v.data().data() + h * dh, ei(lk), ei(dh), Stride(ei(d)));
                     ConstStridedMap doh(out.grad().data() + h * dh, ei(lq), ei(dh),
                                         Stride(ei(d)));
                     ConstMap p(probs.data() + h * lq * lk, ei(lq), ei(lk));
                     if (v.requires_grad()) {
                       MutStridedMap dvh(v.grad_buffer().data() + h * dh, ei(lk), ei(dh),
                                         Stride(ei(d)));
                       dvh.noalias() += p.transpose() * doh;
                     }
                     if (!q.requires_grad() && !k.requires_grad()) continue;
                     dp.noalias() = doh * vh.transpose();
                     // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale.
                     for (Eigen::Index i = 0; i < ei(lq); ++i) {
                       const double dot = dp.row(i).dot(p.row(i));
                       dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)) * inv_sqrt;
                     }
                     if (q.requires_grad()) {
                       MutStridedMap dqh(q.grad_buffer().data() + h * dh, ei(lq), ei(dh),
                                         Stride(ei(d)));
                       dqh.noalias() += dp * kh;
                     }
                     if (k.requires_grad()) {
                       MutStridedMap dkh(k.grad_buffer().data() + h * dh, ei(lk), ei(dh),
                                         Stride(ei(d)));
                       dkh.noalias() += dp.transpose() * qh;
                     }
                   }
                 });
  }
  return out;
}

}  // namespace tlvm::ops
