#include "jdnet/tensor.hpp"

#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace jdnet {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ", " << c << ", " << h << ", " << w << ')';
  return os.str();
}

namespace detail {

void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

}  // namespace detail

void keep_freed_buffers() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc's upper limit on 64-bit
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

bool grad_enabled() { return detail::g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor() : storage_(std::make_shared<detail::Storage<T>>()) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : storage_(std::make_shared<detail::Storage<T>>()) {
  detail::require(shape.n >= 0 && shape.c >= 0 && shape.h >= 0 && shape.w >= 0,
                  "negative extent in shape " + shape.str());
  storage_->shape = shape;
  storage_->data.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<detail::Storage<T>>()) {
  detail::require(values.size() == shape.numel(),
                  "value count " + std::to_string(values.size()) + " does not match shape " + shape.str());
  storage_->shape = shape;
  storage_->data = std::move(values);
}

template <typename T>
T& Tensor<T>::at(int n, int c, int h, int w) {
  const Shape& s = storage_->shape;
  return storage_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
  const Shape& s = storage_->shape;
  return storage_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::item() const {
  detail::require(numel() == 1, "item() on tensor of shape " + shape().str());
  return storage_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  storage_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return storage_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& g = storage_->grad;
  std::fill(g.begin(), g.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>(shape(), storage_->data);
}

template <typename T>
void GradTape<T>::record(const Tensor<T>& output, std::function<void(const std::vector<T>&)> backward) {
  output.storage()->requires_grad = true;
  entries_.push_back(Entry{output.storage(), std::move(backward)});
}

template <typename T>
void GradTape<T>::backward(const Tensor<T>& loss) {
  detail::require(loss.numel() == 1, "backward() needs a scalar loss, got shape " + loss.shape().str());
  detail::require(loss.requires_grad(), "backward() on a loss that does not require grad");

  auto& seed = loss.storage()->ensure_grad();
  seed[0] = T(1);

  // Entries are moved out first so adjoint closures can never observe a
  // half-cleared tape, even if one of them throws.
  std::vector<Entry> entries = std::move(entries_);
  entries_.clear();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    const auto& grad = it->output->grad;
    if (grad.empty()) continue;  // not reachable from the loss
    it->backward(grad);
  }
}

template <typename T>
GradTape<T>& GradTape<T>::current() {
  thread_local GradTape<T> tape;
  return tape;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradTape<float>;
template class GradTape<double>;

}  // namespace jdnet
