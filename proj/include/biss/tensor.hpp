#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace biss {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<double> data;   // row-major
    bool requires_grad = false;
    std::vector<double> grad;   // empty until needed, then same length as data
};

// Shared-handle dense tensor. Values are immutable once produced by an op;
// only grad accumulates during backward.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v);
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad();              // allocates zeros on first use
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();

    double item() const;  // scalar tensors only
    bool all_finite() const;

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Append-only record of backward closures for one forward pass. Ops record
// themselves while a TapeScope is active; backward replays in reverse order,
// visiting each recorded op exactly once.
class Tape {
public:
    void record(std::function<void()> fn);
    void backward(const Tensor& loss);
    void reset();
    std::size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
};

Tape* current_tape();

class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Suspends recording for forward passes whose gradients are never needed.
class TapePause {
public:
    TapePause();
    ~TapePause();
    TapePause(const TapePause&) = delete;
    TapePause& operator=(const TapePause&) = delete;

private:
    Tape* prev_;
};

// Elementwise add; b may alternatively be a bias vector broadcast over the
// last axis of a. No other broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);  // -> scalar

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k] x [B,k,n]

Tensor softmax(const Tensor& x, int axis = -1);
Tensor relu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ids index rows of table [V, d]; output shape = ids_shape + [d].
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        const Shape& ids_shape);

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool train);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// Mean over non-pad rows of -log softmax(logits)[row, target[row]].
// logits is [N, V]; pad_mask is true at padding rows, which contribute zero.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<bool>& pad_mask);

}  // namespace biss
