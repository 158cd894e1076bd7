#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace osvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Row-major strides (last axis has stride 1).
std::vector<std::size_t> row_major_strides(const Shape& shape);

template <typename T>
class BasicTape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  // Identifies the tape recording that produced this tensor; 0 for leaves.
  std::uint64_t tape_id = 0;

  std::span<T> grad_buffer() {
    if (grad.empty() && !data.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major N-D array with optional gradient buffer.
//
// BasicTensor is a shared handle: copies alias the same storage, which is
// what lets the tape route gradients back to parameters. Use clone() for an
// independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  BasicTensor() : impl_(std::make_shared<Impl>()) {}
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value) { return full({}, value); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;
  T& at(std::initializer_list<std::size_t> index);

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool flag = true) {
    impl_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient view; empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  // Produced by an op recorded on a tape (as opposed to a leaf).
  bool on_tape() const { return impl_->tape_id != 0; }

  BasicTensor clone() const;
  // Same values, fresh leaf without gradient tracking.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return BasicTensor<U>(impl_->shape, std::move(out));
  }

  bool same_storage(const BasicTensor& other) const {
    return impl_ == other.impl_;
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::size_t offset_of(std::initializer_list<std::size_t> index) const;

  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Ordered record of differentiable ops executed while the tape is active.
//
// Ops append entries in execution order, so each entry's inputs were produced
// by earlier entries (or are leaves). backward() replays entries once in
// reverse order and consumes the recording.
template <typename T>
class BasicTape {
 public:
  using Impl = detail::TensorImpl<T>;
  using BackwardFn = std::function<void(Impl& output)>;

  BasicTape();
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  std::size_t size() const { return entries_.size(); }
  std::uint64_t id() const { return id_; }

  // Registers `output` as computed from `inputs`. fn reads output.grad and
  // accumulates into the inputs' gradient buffers.
  void record(std::vector<std::shared_ptr<Impl>> inputs,
              const std::shared_ptr<Impl>& output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
  // Gradients accumulate (+=) into existing leaf gradient buffers.
  void backward(const BasicTensor<T>& loss);

  // Drops the recording without propagating.
  void clear();

  // Tape that ops on this thread currently record onto, or nullptr.
  static BasicTape* active();

 private:
  struct Entry {
    std::vector<std::shared_ptr<Impl>> inputs;
    std::shared_ptr<Impl> output;
    BackwardFn fn;
  };

  void renew_id();

  std::vector<Entry> entries_;
  std::uint64_t id_ = 0;
};

// RAII activation of a tape on the current thread; restores the previously
// active tape of the same scalar type on destruction.
template <typename T>
class ActiveTape {
 public:
  explicit ActiveTape(BasicTape<T>& tape);
  ~ActiveTape();
  ActiveTape(const ActiveTape&) = delete;
  ActiveTape& operator=(const ActiveTape&) = delete;

 private:
  BasicTape<T>* previous_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

// Backpropagates from `loss` through the tape active on this thread.
template <typename T>
void backward(const BasicTensor<T>& loss);

}  // namespace osvit
