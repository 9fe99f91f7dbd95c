#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace jdnet {

/// Thrown for any violated shape/argument precondition.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NCHW extent of a dense 4-D tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first adjoint is accumulated
  bool requires_grad = false;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense NCHW array with optional reverse-mode gradient tracking.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Operations executed while gradient recording is enabled and any input
/// requires a gradient are appended to the thread's GradTape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  [[nodiscard]] const Shape& shape() const { return storage_->shape; }
  [[nodiscard]] std::size_t numel() const { return storage_->data.size(); }
  [[nodiscard]] bool empty() const { return storage_->data.empty(); }

  [[nodiscard]] std::span<T> data() { return storage_->data; }
  [[nodiscard]] std::span<const T> data() const { return storage_->data; }

  [[nodiscard]] T& at(int n, int c, int h, int w);
  [[nodiscard]] T at(int n, int c, int h, int w) const;
  [[nodiscard]] T item() const;

  [[nodiscard]] bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  [[nodiscard]] bool has_grad() const { return !storage_->grad.empty(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  [[nodiscard]] std::span<const T> grad() const;
  [[nodiscard]] std::span<T> mutable_grad() { return storage_->ensure_grad(); }
  void zero_grad();

  /// Deep copy of the values, detached from any tape.
  [[nodiscard]] Tensor clone() const;

  [[nodiscard]] bool shares_storage(const Tensor& other) const {
    return storage_ == other.storage_;
  }

  // Autograd internals; used by operator implementations.
  [[nodiscard]] const std::shared_ptr<detail::Storage<T>>& storage() const { return storage_; }
  explicit Tensor(std::shared_ptr<detail::Storage<T>> storage) : storage_(std::move(storage)) {}

 private:
  std::shared_ptr<detail::Storage<T>> storage_;
};

/// Ordered record of differentiable operations for one thread.
///
/// backward() replays adjoints exactly once per entry in reverse
/// execution order and then clears the record. Not safe to share between
/// concurrent writers; every thread owns its own tape per scalar type.
template <typename T>
class GradTape {
 public:
  struct Entry {
    std::shared_ptr<detail::Storage<T>> output;
    std::function<void(const std::vector<T>& out_grad)> backward;
  };

  void record(const Tensor<T>& output, std::function<void(const std::vector<T>&)> backward);
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Runs all adjoints seeded from `loss` and clears the tape.
  void backward(const Tensor<T>& loss);

  static GradTape& current();

 private:
  std::vector<Entry> entries_;
};

/// Raises the allocator's mmap and trim thresholds (glibc only) so the large
/// per-step buffers of training are recycled from the heap instead of being
/// mapped and faulted in on every allocation. Process-wide; idempotent.
void keep_freed_buffers();

/// True while operations are being recorded on the tape.
bool grad_enabled();

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Populates grad on every requires_grad tensor reachable from `loss`.
/// `loss` must hold exactly one element.
template <typename T>
void backward(const Tensor<T>& loss) {
  GradTape<T>::current().backward(loss);
}

template <typename T>
void clear_tape() {
  GradTape<T>::current().clear();
}

namespace detail {

/// True if the result of an op over `inputs` should be recorded.
template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require(bool condition, const std::string& message);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradTape<float>;
extern template class GradTape<double>;

}  // namespace jdnet
