#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "kpreid/tensor.hpp"

namespace kpr {

// Reverse-mode tape. Ops execute eagerly and append a backward closure when
// any input is tracked. A tape is confined to one thread; distinct tapes are
// independent. Gradient buffers are zeroed when a leaf is first registered
// and accumulate additively.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- binary / elementwise ---
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);       // identical shapes
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);       // elementwise
  Tensor add_bias(const Tensor& a, const Tensor& b);  // a: [m x n] or [n], b: [n]
  Tensor scale(const Tensor& a, double c);
  Tensor add_const(const Tensor& a, double c);

  // --- unary ---
  Tensor relu(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor sin_op(const Tensor& a);
  Tensor sqrt_op(const Tensor& a);  // subgradient 0 at the origin

  // --- reductions / normalization ---
  Tensor sum(const Tensor& a);   // scalar
  Tensor mean(const Tensor& a);  // scalar
  // Softmax along `axis` of a rank-1 or rank-2 tensor (axis counts from the
  // front; -1 selects the last axis). Max-subtraction keeps it stable.
  Tensor softmax(const Tensor& a, int axis = -1);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
  Tensor l2_normalize_rows(const Tensor& a, double eps);

  // --- structure ---
  Tensor transpose(const Tensor& a);
  Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
  Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
  Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  // Multiplies row k of a by gates[k]; the KPE mask gating primitive.
  Tensor scale_rows(const Tensor& a, const std::vector<double>& gates);

  // --- loss primitives ---
  // Mean over the batch of -log softmax(logits)[label].
  Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
  // Replaces the target-class cosine c with cos(min(acos(c), pi - m) + m);
  // all other entries pass through.
  Tensor arcface_adjust(const Tensor& cosines, const std::vector<std::size_t>& labels, double m);

  // --- gradients ---
  void backward(const Tensor& loss);
  // dLoss/dLeaf; zero tensor when the leaf never participated.
  Tensor grad(const Tensor& leaf) const;

  bool recording() const { return record_; }

 private:
  struct Node {
    std::uint64_t tensor_id = 0;
    std::function<void()> back;  // null for leaves
  };

  int lookup(const Tensor& t) const;
  // Index of t's node, registering a leaf if t requires grad; -1 if untracked.
  int track(const Tensor& t);
  int add_node(const Tensor& out);
  std::vector<double>& grad_buf(int node) { return grads_[static_cast<std::size_t>(node)]; }

  Tensor unary(const Tensor& a, const std::function<double(double)>& f,
               const std::function<double(double, double)>& df);  // df(x, y)

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<std::uint64_t, int> index_;
  bool record_;
  bool backward_done_ = false;
};

// Runs f once with gradients, then compares every analytic leaf gradient
// against central finite differences of f's value. Returns the worst
// relative error with denominator max(|analytic|, |numeric|, 1e-12).
double finite_diff_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& params,
                         double h);

}  // namespace kpr
