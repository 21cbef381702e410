#pragma once

#include "roilab/tensor.hpp"

namespace roilab {

enum class MergeMode { Add, Mul };
enum class NormMode { Train, Eval };

std::string merge_mode_name(MergeMode mode);

// Per-channel running statistics owned by a batchnorm layer. Plain buffers,
// never part of the autograd graph.
template <typename T>
struct RunningStatsT {
    std::vector<T> mean;
    std::vector<T> var;
    static RunningStatsT fresh(int channels) {
        RunningStatsT s;
        s.mean.assign(static_cast<size_t>(channels), T(0));
        s.var.assign(static_cast<size_t>(channels), T(1));
        return s;
    }
};

using RunningStats = RunningStatsT<float>;

// input NCHW, weight OIKhKw, bias O -> NOH'W' with H' = (H + 2p - Kh)/s + 1;
// the division must be exact, shapes are validated.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding);

template <typename T>
TensorT<T> relu(const TensorT<T>& input);

// Train mode normalizes with batch statistics and folds them into the running
// stats (exponential moving average, weight `momentum` on the fresh batch).
// Eval mode is a fixed affine map from the running stats.
template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                       RunningStatsT<T>& stats, NormMode mode, T momentum, T eps);

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input);  // NCHW -> NC

// input NF, weight KF, bias K -> NK  (x W^T + b)
template <typename T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias);

// Elementwise a+b / a*b of identically shaped tensors. No broadcasting;
// widening a 1-channel mask is the explicit expand_channels step below.
template <typename T>
TensorT<T> elementwise_merge(const TensorT<T>& a, const TensorT<T>& b, MergeMode mode);

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels);

// Block-mean downsize of NCHW spatial dims; source dims must be divisible by
// the target dims. Not differentiable: inputs carrying grad are rejected
// (masks never carry gradients).
template <typename T>
TensorT<T> area_resize(const TensorT<T>& mask, int target_h, int target_w);

template <typename T>
TensorT<T> expand_channels(const TensorT<T>& mask, int channels);  // N1HW -> NCHW

template <typename T>
TensorT<T> binarize(const TensorT<T>& mask, T threshold);  // forward-only

template <typename T>
TensorT<T> sum(const TensorT<T>& input);  // scalar

// SGD with classical momentum over a fixed parameter set:
//   v <- momentum*v + grad + weight_decay*value;  value <- value - lr*v
// Gradients are zeroed after the step. Every parameter must have a populated
// gradient, anything else is a bug in the calling loop and is rejected.
template <typename T>
class SgdT {
public:
    explicit SgdT(std::vector<ParameterT<T>*> params);
    void step(T lr, T momentum, T weight_decay);

private:
    std::vector<ParameterT<T>*> params_;
    std::vector<std::vector<T>> velocity_;
};

using Sgd = SgdT<float>;

// Test hook: corrupts the relu backward rule so the finite-difference checker
// can demonstrate it catches wrong gradients. Never set outside gradcheck's
// negative control.
void set_backward_fault_injection(bool enabled);
bool backward_fault_injection();

}  // namespace roilab
