#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kpreid/errors.hpp"

namespace kpr {

// f64 is used by the gradient-check tests; f32 (doubles rounded through
// float after every producing op) is the production training precision.
enum class DType { f32, f64 };

std::string shape_str(const std::vector<std::size_t>& shape);

// Dense row-major tensor. Copies are shallow; values are immutable by
// convention once an op has consumed them (the optimizer and the finite
// difference harness mutate leaf buffers in place between tapes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, DType dt = DType::f32,
                      bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, DType dt = DType::f32,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> values,
                          DType dt = DType::f32, bool requires_grad = false);
  static Tensor scalar(double value, DType dt = DType::f64);
  static Tensor identity(std::size_t n, DType dt = DType::f64);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only
  DType dtype() const;
  bool requires_grad() const;
  std::uint64_t id() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;

  double value() const;  // scalar (size-1) tensors
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  // Re-applies f32 rounding after an in-place mutation of the buffer.
  void round_to_dtype();

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

}  // namespace kpr
