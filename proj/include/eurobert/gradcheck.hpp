#pragma once

// Central finite-difference verification of analytic gradients.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "eurobert/tensor.hpp"

namespace eurobert {

enum class Stencil {
  TwoPoint,   // (f(x+h) - f(x-h)) / 2h, error O(h^2)
  FourPoint,  // (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h, error O(h^4)
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// relative error = |a - n| / max(|a|, |n|, floor), n from central differences
/// with step h. `loss` rebuilds the graph on every call.
///
/// The floor keeps round-off from posing as a gradient error. A difference
/// quotient carries noise near 1e-16 * |loss| / h, about 5e-13 at h = 1e-3, so
/// an exact gradient of 1e-9 can look 1e-4 "relatively" wrong. With the
/// default floor, gradients below 1e-6 must agree to 1e-11 absolute instead.
template <class LossFn>
GradCheckResult check_gradients(const std::vector<std::pair<std::string, Tensor<double>*>>& params, LossFn&& loss,
                                double h = 1e-3, Stencil stencil = Stencil::FourPoint, double floor = 1e-6) {
  for (auto& [name, p] : params) p->zero_grad();
  loss().backward();

  GradCheckResult result;
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p->size(), 0.0);
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.begin());
    auto values = p->mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double offset) {
        NoGradGuard guard;
        values[i] = saved + offset;
        return loss().item();
      };
      double numeric;
      if (stencil == Stencil::TwoPoint) {
        numeric = (at(h) - at(-h)) / (2.0 * h);
      } else {
        const double inner = at(h) - at(-h);
        const double outer = at(2 * h) - at(-2 * h);
        numeric = (8.0 * inner - outer) / (12.0 * h);
      }
      values[i] = saved;
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = name;
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace eurobert
