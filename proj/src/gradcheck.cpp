// ----------------------------------------------------------------------------
// Copyright 2026 The Gformer Dose Simulation Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ----------------------------------------------------------------------------

#include "gformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gformer::train {

GradcheckReport gradcheck(const std::function<ad::Var<double>()>& loss, NamedVars inputs,
                          const GradcheckOptions& options) {
  for (auto& [name, v] : inputs) {
    if (!v.requires_grad()) throw ValidationError("gradcheck: '" + name + "' does not track gradients");
    v.zero_grad();
  }
  ad::backward(loss());

  GradcheckReport report;
  for (auto& [name, v] : inputs) {
    const Tensor<double> analytic = v.grad_or_zeros();
    Tensor<double>& value = v.mutable_value();
    const int64_t n = value.numel();
    int64_t stride = 1;
    if (options.max_entries_per_tensor > 0 && n > options.max_entries_per_tensor) {
      stride = (n + options.max_entries_per_tensor - 1) / options.max_entries_per_tensor;
    }
    GradcheckGroup group{name, 0, 0.0, 0.0};
    for (int64_t i = 0; i < n; i += stride) {
      const double original = value[i];
      value[i] = original + options.step;
      const double up = loss().item();
      value[i] = original - options.step;
      const double down = loss().item();
      value[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[i];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      group.max_rel_error = std::max(group.max_rel_error, err);
      group.max_abs_grad = std::max(group.max_abs_grad, std::abs(a));
      ++group.checked;
    }
    if (group.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = group.max_rel_error;
      report.worst_group = name;
    }
    report.groups.push_back(group);
  }
  return report;
}

}  // namespace gformer::train
