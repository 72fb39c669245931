#include "cellmtl/autograd.hpp"

#include "cellmtl/errors.hpp"

#include <unordered_set>

namespace cellmtl {
namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled()
{
    return t_grad_enabled;
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled)
{
    t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard()
{
    t_grad_enabled = prev_;
}

template <typename T>
Tensor<T>& DiffNode<T>::grad_buffer()
{
    if (grad.empty())
        grad = Tensor<T>(value.shape());
    return grad;
}

template <typename T>
void DiffNode<T>::accumulate(const Tensor<T>& g)
{
    if (g.numel() != value.numel())
        throw DimensionError("gradient " + shape_str(g.shape()) + " does not match value " +
                             shape_str(value.shape()) + " at op '" + op_tag + "'");
    if (grad.empty()) {
        grad = Tensor<T>(value.shape(), g.storage());
        return;
    }
    T* dst = grad.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < g.numel(); ++i)
        dst[i] += src[i];
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad, std::string op_tag)
  : node_(std::make_shared<DiffNode<T>>())
{
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->op_tag = std::move(op_tag);
}

template <typename T>
void Var<T>::backward() const
{
    if (!node_)
        throw InputError("backward on an undefined variable");
    if (node_->value.numel() != 1)
        throw DimensionError("backward requires a scalar root, got " + shape_str(node_->value.shape()));
    if (!node_->requires_grad)
        return;

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<DiffNode<T>*> order;
    std::unordered_set<DiffNode<T>*> seen;
    std::vector<std::pair<DiffNode<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            DiffNode<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        DiffNode<T>* n = *it;
        if (n->backward_fn && n->has_grad())
            n->backward_fn(*n);
    }
}

template <typename T>
Var<T> make_result(Tensor<T> value, std::string op_tag, std::vector<Var<T>> parents,
                   std::function<void(DiffNode<T>&)> backward_fn)
{
    bool needs = false;
    if (grad_enabled())
        for (const auto& p : parents)
            needs = needs || p.requires_grad();
    Var<T> out(std::move(value), needs, std::move(op_tag));
    if (needs) {
        auto& n = out.node();
        for (const auto& p : parents)
            n.parents.push_back(p.ptr());
        n.backward_fn = std::move(backward_fn);
    }
    return out;
}

template struct DiffNode<float>;
template struct DiffNode<double>;
template class Var<float>;
template class Var<double>;
template Var<float> make_result<float>(Tensor<float>, std::string, std::vector<Var<float>>,
                                       std::function<void(DiffNode<float>&)>);
template Var<double> make_result<double>(Tensor<double>, std::string, std::vector<Var<double>>,
                                         std::function<void(DiffNode<double>&)>);

} // namespace cellmtl
