#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xct/common.hpp"

namespace xct::diff {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Lightweight handle to a node on a Tape. Copyable; values/grads live on the tape.
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  int64_t size() const;
  const std::vector<double>& value() const;
  bool requires_grad() const;

  // Accumulated gradient of a requires_grad leaf. Throws ConfigError for
  // frozen leaves and interior nodes (they hold no gradient).
  const std::vector<double>& grad() const;
  bool has_grad() const;

  double item() const;  // value of a single-element tensor

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tensor(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape over dense n-d arrays of doubles. Ops append nodes in
// topological order; backward() walks them once in reverse. Forward results
// are checked for NaN/Inf after every op (NumericError) unless disabled.
class Tape {
 public:
  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
  Tensor constant(const Shape& shape, double fill);

  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor div(Tensor a, Tensor b);
  Tensor scale(Tensor a, double c);
  Tensor add_const(Tensor a, double c);
  Tensor log(Tensor a);
  Tensor relu(Tensor a);
  Tensor sigmoid(Tensor a);
  Tensor softmax(Tensor a, int axis);
  Tensor matmul(Tensor a, Tensor b);
  // x: [N,C,H,W], w: [O,C,kh,kw] with odd kernel, optional bias [O]
  Tensor conv2d(Tensor x, Tensor w, int stride, int padding);
  Tensor conv2d(Tensor x, Tensor w, Tensor bias, int stride, int padding);
  Tensor avg_pool2d(Tensor x, int kernel, int stride);
  Tensor upsample_nearest(Tensor x, int factor);
  Tensor concat(const std::vector<Tensor>& xs, int axis);
  Tensor reduce_sum(Tensor a);
  Tensor reduce_mean(Tensor a);
  // per-channel (depthwise) convolution; w: [C,kh,kw] odd, bias: [C] optional
  Tensor depthwise_conv2d(Tensor x, Tensor w, Tensor bias, int stride, int padding);
  // channels [c0, c1) of a [N,C,H,W] tensor
  Tensor slice_channels(Tensor x, int c0, int c1);
  // each channel repeated k times consecutively: [N,C,H,W] -> [N,C*k,H,W]
  Tensor repeat_channels(Tensor x, int k);
  Tensor clamp(Tensor x, double lo, double hi);

  // Propagates d(loss)/d(node) from a scalar loss; accumulates into the
  // grads of requires_grad leaves (repeated calls add up).
  void backward(Tensor loss);
  void zero_grad();

  size_t node_count() const { return nodes_.size(); }

 private:
  friend class Tensor;

  struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<double> grad;      // scratch, valid only during backward()
    std::vector<double> acc_grad;  // requires_grad leaves: accumulated across calls
    std::function<void(Tape&)> backprop;
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int push(Node n, const char* op);
  Tensor handle(int id) { return Tensor(this, id); }
  void check_same_shape(const Tensor& a, const Tensor& b, const char* op) const;
  void check_finite(const Node& n, const char* op) const;

  std::vector<Node> nodes_;
  bool check_finite_ = true;
  int cur_ = -1;  // node whose backprop is running
};

}  // namespace xct::diff
