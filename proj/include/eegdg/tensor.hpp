#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared node. Ops build a graph on the fly;
// each node records its creation sequence number, so reverse topological
// order for backward() is simply descending sequence order over the nodes
// reachable from the loss.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace eegdg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view for parameter updates and buffer maintenance. Mutating a
  // tensor that is already part of a live graph invalidates that graph.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  // Populates gradients of every requires_grad leaf reachable from this
  // scalar. Leaf gradients accumulate across calls.
  void backward() const;

  // Same values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;

  std::uint64_t sequence() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Ops. Every op checks shapes and throws DimensionError on mismatch.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
// Square root whose derivative is taken as 0 where the input is exactly 0.
// Used for Euclidean distances so that coincident points stay finite.
Tensor sqrt_zero_safe(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor elu(const Tensor& a, double alpha = 1.0);
Tensor clamp_min(const Tensor& a, double floor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length);
// out[i] = a[i, index[i]] for a 2-D input.
Tensor pick(const Tensor& a, std::span<const int> index);
// Column j of a 2-D tensor as a 1-D tensor.
Tensor column(const Tensor& a, std::size_t j);
// a[m×n] + b[n] broadcast over rows.
Tensor add_rowwise(const Tensor& a, const Tensor& b);
// a[m×n] with row i multiplied by s[i].
Tensor scale_rows(const Tensor& a, const Tensor& s);

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  std::size_t groups = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_top = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;

  // "same" padding for stride 1; extra padding goes to the bottom/right.
  static Conv2dOptions same(std::size_t kh, std::size_t kw,
                            std::size_t groups = 1);
};

// Cross-correlation. input [B×Cin×H×W], kernel [Cout×Cin/groups×kh×kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel,
              const Conv2dOptions& options = {});

// Non-overlapping average pooling with floor semantics.
Tensor avg_pool2d(const Tensor& input, std::size_t kh, std::size_t kw);

struct BatchNormBuffers {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

// Normalizes over every axis except axis 1. In training mode batch statistics
// are used and the running buffers are updated with an exponential moving
// average; in eval mode the running statistics are used.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffers& buffers, bool train, double momentum = 0.1,
                  double eps = 1e-5);

// Inverted dropout: kept units are scaled by 1/(1-p) at train time.
Tensor dropout(const Tensor& input, double p, bool train, std::mt19937_64& rng);

// Worker threads used by convolution. 1 means fully serial.
void set_num_threads(std::size_t n);
std::size_t num_threads();

}  // namespace eegdg
