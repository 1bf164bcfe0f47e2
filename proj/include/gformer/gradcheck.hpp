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

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gformer/autograd.hpp"

namespace gformer::train {

struct GradcheckOptions {
  double step = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-5;
  // 0 checks every entry; otherwise an evenly spaced subset per tensor.
  int64_t max_entries_per_tensor = 0;
};

struct GradcheckGroup {
  std::string name;
  int64_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_group;
  std::vector<GradcheckGroup> groups;
};

using NamedVars = std::vector<std::pair<std::string, ad::Var<double>>>;

// Compares reverse-mode gradients of the scalar returned by `loss` against
// central finite differences for every tensor in `inputs`. `loss` must
// rebuild its graph from the current values on every call.
GradcheckReport gradcheck(const std::function<ad::Var<double>()>& loss, NamedVars inputs,
                          const GradcheckOptions& options = {});

}  // namespace gformer::train
