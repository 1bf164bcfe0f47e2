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
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gformer/tensor.hpp"

namespace gformer::ad {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `grad` of the node it is attached to and accumulates into parents.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  void accumulate(const Tensor<T>& g) {
    if (grad.empty() && !g.empty()) {
      grad = g;
      return;
    }
    require_same_shape(grad.shape(), g.shape(), op);
    T* dst = grad.data();
    const T* src = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
  }

  // Accumulates into parent `i` only when that parent tracks gradients.
  void send(size_t i, const Tensor<T>& g) {
    if (parents[i] && parents[i]->requires_grad) parents[i]->accumulate(g);
  }
  bool wants(size_t i) const { return parents[i] && parents[i]->requires_grad; }
};

// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var from_op(Tensor<T> value, std::vector<Var> inputs,
                     std::function<void(Node<T>&)> backward_fn, const char* op) {
    Var out(std::move(value));
    out.node_->op = op;
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      out.node_->requires_grad = true;
      out.node_->backward_fn = std::move(backward_fn);
      for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int64_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T> grad_or_zeros() const {
    return node_->grad.empty() ? Tensor<T>(node_->value.shape()) : node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  T item() const { return node_->value[0]; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Reverse-mode sweep from a scalar root. Intermediate gradients are released
// as soon as they have been propagated; leaves keep theirs.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  if (root.value().numel() != 1) throw ValidationError("backward: root must be a scalar");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Tensor<T>(root.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(*node);
    node->grad = Tensor<T>();
  }
}

}  // namespace gformer::ad
