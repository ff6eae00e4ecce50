#include "kpreid/tensor.hpp"

#include <atomic>
#include <sstream>

namespace kpr {

namespace {
std::atomic<std::uint64_t> g_next_id{1};

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}
}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

struct Tensor::Impl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  DType dtype = DType::f32;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

Tensor Tensor::zeros(std::vector<std::size_t> shape, DType dt, bool requires_grad) {
  std::size_t n = shape_product(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0), dt, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, DType dt, bool requires_grad) {
  std::size_t n = shape_product(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), dt, requires_grad);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> values, DType dt,
                         bool requires_grad) {
  if (shape_product(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match value count " +
                         std::to_string(values.size()));
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->dtype = dt;
  t.impl_->requires_grad = requires_grad;
  t.impl_->id = g_next_id.fetch_add(1);
  if (dt == DType::f32) t.round_to_dtype();
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return from_data({1}, {value}, dt, false); }

Tensor Tensor::identity(std::size_t n, DType dt) {
  Tensor t = zeros({n, n}, dt, false);
  for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
  return t;
}

const std::vector<std::size_t>& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() requires rank 2, got " + shape_str(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() requires rank 2, got " + shape_str(shape()));
  return impl_->shape[1];
}

DType Tensor::dtype() const { return impl_->dtype; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
std::uint64_t Tensor::id() const { return impl_->id; }

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }

double Tensor::value() const {
  if (size() != 1) throw ContractError("value() requires a scalar tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_->data.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  return impl_->data.at(i * cols() + j);
}

void Tensor::round_to_dtype() {
  if (impl_->dtype != DType::f32) return;
  for (double& v : impl_->data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace kpr
