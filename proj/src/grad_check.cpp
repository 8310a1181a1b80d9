#include "medthink/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "medthink/errors.hpp"

namespace medthink {
namespace {

double evaluate(const LossBuilder& loss, std::span<const NamedParam> params) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.parameter(*p.tensor));
  const Var out = loss(tape, leaves);
  if (out.value().size() != 1) throw DimensionError("grad_check: loss must be a scalar");
  return out.value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss, std::span<const NamedParam> params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.parameter(*p.tensor));
  const Var out = loss(tape, leaves);
  const double base = out.value()[0];
  tape.backward(out);

  const double again = evaluate(loss, params);
  if (again != base || evaluate(loss, params) != again)
    throw OracleInvalidError("grad_check: loss is not deterministic (" + std::to_string(base) +
                             " vs " + std::to_string(again) + ")");

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = *params[k].tensor;
    const auto analytic = tape.grad(leaves[k]);
    GradCheckEntry entry{params[k].name};
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + options.eps;
      const double plus = evaluate(loss, params);
      t[i] = saved - options.eps;
      const double minus = evaluate(loss, params);
      t[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.tensors.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace medthink
