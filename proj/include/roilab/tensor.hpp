#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace roilab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] void fail(const std::string& msg);
void check(bool cond, const std::string& msg);

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

enum class OpKind {
    Leaf,
    Conv2d,
    Relu,
    BatchNorm,
    GlobalAvgPool,
    Linear,
    MergeAdd,
    MergeMul,
    SoftmaxCrossEntropy,
    ExpandChannels,
    Sum,
};

// One recorded computation step. Nodes reachable from a loss form a DAG; the
// reverse pass walks them once in reverse topological order.
template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // sized lazily; empty means "no gradient yet"

    OpKind op = OpKind::Leaf;
    std::vector<std::shared_ptr<NodeT>> inputs;
    std::vector<int64_t> saved_ints;
    std::vector<std::vector<T>> saved_bufs;
    uint64_t id = 0;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    std::vector<T>& grad_buffer();  // allocates zeros on first use
};

// Dense row-major tensor handle with an optional gradient slot. Copies are
// shallow: they alias the same storage and graph node.
template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

    static TensorT zeros(const Shape& shape, bool requires_grad = false);
    static TensorT full(const Shape& shape, T value, bool requires_grad = false);
    static TensorT from_data(const Shape& shape, std::vector<T> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    std::vector<T>& grad() { return node_->grad_buffer(); }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad();

    T item() const;
    T at(std::initializer_list<int> idx) const;

    const std::shared_ptr<NodeT<T>>& node() const { return node_; }

private:
    std::shared_ptr<NodeT<T>> node_;
};

// Accumulates d(loss)/dp into the grad of every requires_grad tensor that
// influenced the scalar loss. Repeated calls accumulate; leaf gradients are
// only cleared explicitly (sgd step or zero_grad).
template <typename T>
void backward(const TensorT<T>& loss);

template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;
using Parameter = ParameterT<float>;

}  // namespace roilab
