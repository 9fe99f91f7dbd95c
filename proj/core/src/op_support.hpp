#pragma once

#include <type_traits>
#include <utility>
#include <vector>

#include "jdnet/tensor.hpp"

namespace jdnet::detail {

template <typename T>
using StoragePtr = std::shared_ptr<Storage<T>>;

template <typename T>
void record(const Tensor<T>& output, std::type_identity_t<std::function<void(const std::vector<T>&)>> adjoint) {
  GradTape<T>::current().record(output, std::move(adjoint));
}

/// Gradient buffer of `s` if it participates in differentiation, else null.
template <typename T>
std::vector<T>* grad_sink(const StoragePtr<T>& s) {
  return s->requires_grad ? &s->ensure_grad() : nullptr;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace jdnet::detail
