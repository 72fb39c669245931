#pragma once

#include "cellmtl/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cellmtl {

/// A value in the computation graph together with its gradient accumulator.
///
/// `grad` stays empty until backward reaches the node; parameters that no loss
/// term depends on therefore keep an empty gradient, which the optimizer uses
/// to skip them.
template <typename T>
struct DiffNode {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string op_tag;
    std::vector<std::shared_ptr<DiffNode>> parents;
    std::function<void(DiffNode&)> backward_fn;

    bool has_grad() const { return !grad.empty(); }
    Tensor<T>& grad_buffer();
    void accumulate(const Tensor<T>& g);
};

/// Shared handle to a DiffNode.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false, std::string op_tag = "leaf");

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& op_tag() const { return node_->op_tag; }
    bool defined() const { return static_cast<bool>(node_); }
    T item() const { return node_->value[0]; }

    DiffNode<T>& node() { return *node_; }
    const std::shared_ptr<DiffNode<T>>& ptr() const { return node_; }

    void zero_grad() { node_->grad = Tensor<T>(); }

    /// Runs reverse-mode differentiation from this (scalar) node.
    void backward() const;

private:
    std::shared_ptr<DiffNode<T>> node_;
};

/// Builds an op result. The backward closure reads its inputs through
/// `node.parents` (same order as `parents`). When no parent requires grad, or
/// grad mode is off, neither parents nor closure are retained.
template <typename T>
Var<T> make_result(Tensor<T> value, std::string op_tag, std::vector<Var<T>> parents,
                   std::function<void(DiffNode<T>&)> backward_fn);

/// True while graph recording is enabled on this thread.
bool grad_enabled();

/// Disables graph recording on this thread for its lifetime (evaluation forwards).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

extern template struct DiffNode<float>;
extern template struct DiffNode<double>;
extern template class Var<float>;
extern template class Var<double>;

} // namespace cellmtl
