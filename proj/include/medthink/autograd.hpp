#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "medthink/tensor.hpp"

namespace medthink {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive and not reset.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Operations append nodes in evaluation order; backward()
// walks them in reverse, so each recorded use of an input contributes its
// gradient exactly once.
//
// Parameter leaves reference caller-owned tensors without copying them and
// keep their gradients on the tape; accumulate_into() moves them out. This
// lets several tapes share one read-only parameter set.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::span<const double> out_grad)>;

  // With record == false no backward rules are stored (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(const Tensor& param);
  Var constant(Tensor value);
  // Owned leaf that receives gradients.
  Var variable(Tensor value);

  Var record(Tensor value, std::vector<Var> inputs, Backward backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Gradient accumulated for v; empty if none reached it.
  std::span<const double> grad(Var v) const { return nodes_[v.id].grad; }
  // Mutable gradient buffer for v, allocated on first use.
  std::span<double> grad_buffer(Var v);

  // Seeds d(output)/d(output) = seed for a single-element output.
  void backward(Var output, double seed = 1.0);
  // Adds the gradient of every parameter leaf into the referenced tensor's
  // grad slot.
  void accumulate_into(Var leaf, Tensor& target) const;

  void reset();
  std::size_t size() const noexcept { return nodes_.size(); }
  bool recording() const noexcept { return record_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool record_;
};

// Differentiable operations. All inputs must live on the same tape.
namespace ops {

Var matmul(Var a, Var b);
// a · bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[p×q] + b[q] broadcast over rows.
Var add_row(Var x, Var bias);
Var sigmoid(Var x);
// tanh-approximated GELU.
Var gelu(Var x);
// Row softmax; with causal == true entry (i, j) for j > i is excluded.
Var softmax_rows(Var x, bool causal = false);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Rows of table selected by ids.
Var gather_rows(Var table, std::span<const int> ids);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
// (1 - t) ⊙ a + t ⊙ b with exact endpoints and bounded results (std::lerp).
Var lerp(Var a, Var b, Var t);
Var sum(Var x);
// Σ over masked rows of -log softmax(logits)[row, target]. Returns a 1-element
// tensor.
Var nll_sum(Var logits, std::span<const int> targets, const std::vector<bool>& mask);

}  // namespace ops

}  // namespace medthink
