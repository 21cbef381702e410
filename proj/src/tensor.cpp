#include "roilab/tensor.hpp"

#include <atomic>
#include <sstream>

namespace roilab {

void fail(const std::string& msg) { throw Error(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

namespace {
std::atomic<uint64_t> g_next_node_id{1};

template <typename T>
std::shared_ptr<NodeT<T>> make_leaf(const Shape& shape, bool requires_grad) {
    for (int d : shape) check(d > 0, "tensor dims must be positive, got " + shape_str(shape));
    auto node = std::make_shared<NodeT<T>>();
    node->shape = shape;
    node->requires_grad = requires_grad;
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    return node;
}
}  // namespace

template <typename T>
std::vector<T>& NodeT<T>::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
}

template <typename T>
TensorT<T> TensorT<T>::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, T(0), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::full(const Shape& shape, T value, bool requires_grad) {
    auto node = make_leaf<T>(shape, requires_grad);
    node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    return TensorT(node);
}

template <typename T>
TensorT<T> TensorT<T>::from_data(const Shape& shape, std::vector<T> data, bool requires_grad) {
    check(shape_numel(shape) == static_cast<int64_t>(data.size()),
          "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto node = make_leaf<T>(shape, requires_grad);
    node->data = std::move(data);
    return TensorT(node);
}

template <typename T>
void TensorT<T>::zero_grad() {
    node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
T TensorT<T>::item() const {
    check(numel() == 1, "item() needs a scalar tensor, got shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
T TensorT<T>::at(std::initializer_list<int> idx) const {
    const Shape& s = node_->shape;
    check(idx.size() == s.size(), "index rank mismatch for shape " + shape_str(s));
    int64_t flat = 0;
    size_t i = 0;
    for (int v : idx) {
        check(v >= 0 && v < s[i], "index out of range for shape " + shape_str(s));
        flat = flat * s[i] + v;
        ++i;
    }
    return node_->data[static_cast<size_t>(flat)];
}

template struct NodeT<float>;
template struct NodeT<double>;
template class TensorT<float>;
template class TensorT<double>;

}  // namespace roilab
