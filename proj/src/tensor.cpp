#include "osvit/tensor.hpp"

#include <atomic>
#include <numeric>
#include <sstream>

#include "osvit/error.hpp"

namespace osvit {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i > 1; --i) {
    strides[i - 2] = strides[i - 1] * shape[i - 1];
  }
  return strides;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) +
                         " holds " + std::to_string(shape_numel(shape)) +
                         " elements but buffer has " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " +
                         shape_to_string(shape()));
  }
  return impl_->data[0];
}

template <typename T>
std::size_t BasicTensor<T>::offset_of(
    std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank " + std::to_string(index.size()) +
                         " does not match tensor " + shape_to_string(shape()));
  }
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) {
      throw DimensionError("index out of range on axis " +
                           std::to_string(axis) + " of " +
                           shape_to_string(shape()));
    }
    offset = offset * impl_->shape[axis] + i;
    ++axis;
  }
  return offset;
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  return impl_->data[offset_of(index)];
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) {
  return impl_->data[offset_of(index)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  BasicTensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(impl_->shape, impl_->data);
}

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};

template <typename T>
BasicTape<T>*& active_slot() {
  thread_local BasicTape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
BasicTape<T>::BasicTape() {
  renew_id();
}

template <typename T>
void BasicTape<T>::renew_id() {
  id_ = g_next_tape_id.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
BasicTape<T>* BasicTape<T>::active() {
  return active_slot<T>();
}

template <typename T>
void BasicTape<T>::record(std::vector<std::shared_ptr<Impl>> inputs,
                          const std::shared_ptr<Impl>& output, BackwardFn fn) {
  output->requires_grad = true;
  output->tape_id = id_;
  entries_.push_back(Entry{std::move(inputs), output, std::move(fn)});
}

template <typename T>
void BasicTape<T>::backward(const BasicTensor<T>& loss) {
  const auto& root = loss.impl();
  if (root->tape_id != id_ || entries_.empty()) {
    throw UsageError("backward: loss was not recorded on this tape");
  }
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " +
                     shape_to_string(loss.shape()));
  }
  root->grad_buffer()[0] += T(1);

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    Impl& out = *it->output;
    if (!out.grad.empty()) {
      for (const auto& in : it->inputs) {
        if (in->requires_grad) in->grad_buffer();
      }
      it->fn(out);
    }
    // Intermediate gradients are dead once their producer has run.
    if (it->output != root) std::vector<T>().swap(out.grad);
    it->fn = nullptr;
    it->inputs.clear();
  }
  entries_.clear();
  renew_id();
}

template <typename T>
void BasicTape<T>::clear() {
  entries_.clear();
  renew_id();
}

template <typename T>
ActiveTape<T>::ActiveTape(BasicTape<T>& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
ActiveTape<T>::~ActiveTape() {
  active_slot<T>() = previous_;
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  BasicTape<T>* tape = BasicTape<T>::active();
  if (tape == nullptr) {
    throw UsageError("backward: no active tape on this thread");
  }
  tape->backward(loss);
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTape<float>;
template class BasicTape<double>;
template class ActiveTape<float>;
template class ActiveTape<double>;
template void backward<float>(const BasicTensor<float>&);
template void backward<double>(const BasicTensor<double>&);

}  // namespace osvit
