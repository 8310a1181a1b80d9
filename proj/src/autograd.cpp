#include "medthink/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "medthink/errors.hpp"

namespace medthink {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(const Tensor& param) {
  Node n;
  n.external = &param;
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward) {
  Node n;
  n.owned = std::move(value);
  if (record_) {
    for (const auto& in : inputs) {
      if (in.tape != this) throw ContractError("operation mixes values from different tapes");
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external ? *n.external : n.owned;
}

std::span<double> Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(value(v).size(), 0.0);
  return n.grad;
}

void Tape::backward(Var output, double seed) {
  if (!record_) throw ContractError("backward on a non-recording tape");
  if (value(output).size() != 1)
    throw DimensionError("backward requires a single-element output, got " +
                         shape_string(value(output).shape()));
  auto g = grad_buffer(output);
  if (g.empty()) return;
  g[0] += seed;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

void Tape::accumulate_into(Var leaf, Tensor& target) const {
  const Node& n = nodes_[leaf.id];
  if (n.grad.empty()) return;
  auto dst = target.grad();
  if (dst.size() != n.grad.size())
    throw DimensionError("accumulate_into: gradient size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
}

void Tape::reset() { nodes_.clear(); }

namespace ops {
namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()) + " differ");
}

void add_into(std::span<double> dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor from_span(const Shape& shape, std::span<const double> g) {
  return Tensor(shape, std::vector<double>(g.begin(), g.end()));
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = medthink::matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, std::span<const double> g) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    const Tensor go = from_span({av.rows(), bv.cols()}, g);
    if (auto ga = tape.grad_buffer(a); !ga.empty()) add_into(ga, medthink::matmul_nt(go, bv));
    if (auto gb = tape.grad_buffer(b); !gb.empty()) add_into(gb, medthink::matmul_tn(av, go));
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = medthink::matmul_nt(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, std::span<const double> g) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    const Tensor go = from_span({av.rows(), bv.rows()}, g);
    if (auto ga = tape.grad_buffer(a); !ga.empty()) add_into(ga, medthink::matmul(go, bv));
    if (auto gb = tape.grad_buffer(b); !gb.empty()) add_into(gb, medthink::matmul_tn(go, av));
  });
}

Var add(Var a, Var b) {
  same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.drop_grad();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::span<const double> g) {
    for (Var v : {a, b})
      if (auto gv = tape.grad_buffer(v); !gv.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
  });
}

Var sub(Var a, Var b) {
  same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.drop_grad();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::span<const double> g) {
    if (auto ga = tape.grad_buffer(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = tape.grad_buffer(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  out.drop_grad();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::span<const double> g) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (auto ga = tape.grad_buffer(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (auto gb = tape.grad_buffer(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  out.drop_grad();
  for (auto& v : out.data()) v *= factor;
  return a.tape->record(std::move(out), {a}, [a, factor](Tape& tape, std::span<const double> g) {
    if (auto ga = tape.grad_buffer(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols())
    throw DimensionError("add_row: bias " + shape_string(bv.shape()) +
                         " does not match columns of " + shape_string(xv.shape()));
  Tensor out = xv;
  out.drop_grad();
  const std::size_t p = xv.rows(), q = xv.cols();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[i * q + j] += bv[j];
  return x.tape->record(std::move(out), {x, bias}, [x, bias, p, q](Tape& tape, std::span<const double> g) {
    if (auto gx = tape.grad_buffer(x); !gx.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (auto gb = tape.grad_buffer(bias); !gb.empty())
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) gb[j] += g[i * q + j];
  });
}

Var sigmoid(Var x) {
  Tensor out = medthink::sigmoid(x.value());
  Tape& tape = *x.tape;
  const std::uint32_t out_id = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(out), {x}, [x, out_id](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    if (gx.empty()) return;
    const Tensor& y = tp.value(Var{&tp, out_id});
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var gelu(Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return x.tape->record(std::move(out), {x}, [x](Tape& tape, std::span<const double> g) {
    auto gx = tape.grad_buffer(x);
    if (gx.empty()) return;
    const Tensor& xv = tape.value(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

Var softmax_rows(Var x, bool causal) {
  const Tensor& xv = x.value();
  const std::size_t p = xv.rows(), q = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < p; ++i) {
    const double* in = xv.data().data() + i * q;
    double* o = out.data().data() + i * q;
    const std::size_t width = causal ? std::min(q, i + 1) : q;
    const double mx = *std::max_element(in, in + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < width; ++j) o[j] /= total;
  }
  // Backward reads the output through the output node's own value.
  Tape& tape = *x.tape;
  const std::uint32_t out_id = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(out), {x}, [x, out_id, p, q](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    if (gx.empty()) return;
    const Tensor& y = tp.value(Var{&tp, out_id});
    for (std::size_t i = 0; i < p; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < q; ++j) dot += g[i * q + j] * y[i * q + j];
      for (std::size_t j = 0; j < q; ++j) gx[i * q + j] += y[i * q + j] * (g[i * q + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t p = xv.rows(), q = xv.cols();
  if (gain.value().size() != q || bias.value().size() != q)
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_string(xv.shape()));
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(p);
  for (std::size_t i = 0; i < p; ++i) {
    const double* row = xv.data().data() + i * q;
    double mean = 0.0;
    for (std::size_t j = 0; j < q; ++j) mean += row[j];
    mean /= static_cast<double>(q);
    double var = 0.0;
    for (std::size_t j = 0; j < q; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(q);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < q; ++j) {
      xhat[i * q + j] = (row[j] - mean) * inv_std[i];
      out[i * q + j] = gv[j] * xhat[i * q + j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, p, q, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& tape, std::span<const double> g) {
        const Tensor& gv = tape.value(gain);
        if (auto gg = tape.grad_buffer(gain); !gg.empty())
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) gg[j] += g[i * q + j] * xhat[i * q + j];
        if (auto gb = tape.grad_buffer(bias); !gb.empty())
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) gb[j] += g[i * q + j];
        auto gx = tape.grad_buffer(x);
        if (gx.empty()) return;
        const double inv_q = 1.0 / static_cast<double>(q);
        for (std::size_t i = 0; i < p; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < q; ++j) {
            const double d = g[i * q + j] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[i * q + j];
          }
          mean_d *= inv_q;
          mean_dx *= inv_q;
          for (std::size_t j = 0; j < q; ++j) {
            const double d = g[i * q + j] * gv[j];
            gx[i * q + j] += inv_std[i] * (d - mean_d - xhat[i * q + j] * mean_dx);
          }
        }
      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  const std::size_t rows = tv.rows(), q = tv.cols();
  Tensor out({ids.size(), q});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) +
                           " outside table " + shape_string(tv.shape()));
    std::copy_n(tv.data().data() + ids[i] * q, q, out.data().data() + i * q);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table}, [table, q, idx = std::move(idx)](Tape& tape, std::span<const double> g) {
    auto gt = tape.grad_buffer(table);
    if (gt.empty()) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < q; ++j) gt[idx[i] * q + j] += g[i * q + j];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  const std::size_t p = xv.rows(), q = xv.cols();
  if (begin + count > q || count == 0)
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_string(xv.shape()));
  Tensor out({p, count});
  for (std::size_t i = 0; i < p; ++i)
    std::copy_n(xv.data().data() + i * q + begin, count, out.data().data() + i * count);
  return x.tape->record(std::move(out), {x}, [x, begin, count, p, q](Tape& tape, std::span<const double> g) {
    auto gx = tape.grad_buffer(x);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * q + begin + j] += g[i * count + j];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t p = parts.front().value().rows();
  std::size_t q = 0;
  for (const Var& v : parts) {
    if (v.value().rows() != p) throw DimensionError("concat_cols: row counts differ");
    q += v.value().cols();
  }
  Tensor out({p, q});
  std::size_t offset = 0;
  for (const Var& v : parts) {
    const Tensor& pv = v.value();
    const std::size_t w = pv.cols();
    for (std::size_t i = 0; i < p; ++i)
      std::copy_n(pv.data().data() + i * w, w, out.data().data() + i * q + offset);
    offset += w;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Tape& tape = *parts.front().tape;
  return tape.record(std::move(out), inputs, [inputs, p, q](Tape& tp, std::span<const double> g) {
    std::size_t offset = 0;
    for (const Var& v : inputs) {
      const std::size_t w = tp.value(v).cols();
      if (auto gv = tp.grad_buffer(v); !gv.empty())
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < w; ++j) gv[i * w + j] += g[i * q + offset + j];
      offset += w;
    }
  });
}

Var lerp(Var a, Var b, Var t) {
  same_shape(a.value(), b.value(), "lerp");
  same_shape(a.value(), t.value(), "lerp");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Tensor& tv = t.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::lerp(av[i], bv[i], tv[i]);
  return a.tape->record(std::move(out), {a, b, t}, [a, b, t](Tape& tape, std::span<const double> g) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    const Tensor& tv = tape.value(t);
    if (auto ga = tape.grad_buffer(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - tv[i]);
    if (auto gb = tape.grad_buffer(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * tv[i];
    if (auto gt = tape.grad_buffer(t); !gt.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i] * (bv[i] - av[i]);
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor({1}, std::vector<double>{s}), {x}, [x](Tape& tape, std::span<const double> g) {
    if (auto gx = tape.grad_buffer(x); !gx.empty())
      for (auto& v : gx) v += g[0];
  });
}

Var nll_sum(Var logits, std::span<const int> targets, const std::vector<bool>& mask) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), vocab = lv.cols();
  if (targets.size() != n || mask.size() != n)
    throw DimensionError("nll: " + std::to_string(n) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  std::vector<double> probs(lv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw DimensionError("nll: target " + std::to_string(targets[i]) + " outside vocabulary");
    const double* row = lv.data().data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[i * vocab + j] = std::exp(row[j] - mx);
      z += probs[i * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<bool> msk(mask.begin(), mask.end());
  return logits.tape->record(
      Tensor({1}, std::vector<double>{total}), {logits},
      [logits, vocab, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](
          Tape& tape, std::span<const double> g) {
        auto gl = tape.grad_buffer(logits);
        if (gl.empty()) return;
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          if (!msk[i]) continue;
          for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] += g[0] * probs[i * vocab + j];
          gl[i * vocab + tgt[i]] -= g[0];
        }
      });
}

}  // namespace ops
}  // namespace medthink
