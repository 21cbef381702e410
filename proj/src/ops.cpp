#include "roilab/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace roilab {

namespace {

std::atomic<bool> g_fault_injection{false};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

std::atomic<uint64_t> g_op_node_id{1u << 20};

template <typename T>
TensorT<T> make_output(Shape shape, OpKind op, std::vector<TensorT<T>> inputs) {
    auto node = std::make_shared<NodeT<T>>();
    node->shape = std::move(shape);
    node->data.assign(static_cast<size_t>(shape_numel(node->shape)), T(0));
    node->id = g_op_node_id.fetch_add(1, std::memory_order_relaxed);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        // only tensors that feed gradients need to stay linked into the tape
        node->op = op;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node());
    }
    return TensorT<T>(node);
}

// All parallel kernels below split work on fixed grids that do not depend on
// the thread count, so results are bitwise identical for any OMP setting.

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    constexpr int64_t kChunk = 2048;
    const int64_t nchunks = (n + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
    for (int64_t ci = 0; ci < nchunks; ++ci) {
        const int64_t c0 = ci * kChunk;
        const int64_t cols = std::min(kChunk, n - c0);
        ConstMatMap<T> ma(a, m, k);
        ConstStridedMap<T> mb(b + c0, k, cols, Eigen::OuterStride<>(n));
        StridedMap<T> mc(c + c0, m, cols, Eigen::OuterStride<>(n));
        if (accumulate)
            mc.noalias() += ma * mb;
        else
            mc.noalias() = ma * mb;
    }
}

// c[k x n] (+)= a[o x k]^T * b[o x n]
template <typename T>
void gemm_at_b(const T* a, const T* b, T* c, int64_t o, int64_t k, int64_t n, bool accumulate) {
    constexpr int64_t kChunk = 2048;
    const int64_t nchunks = (n + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
    for (int64_t ci = 0; ci < nchunks; ++ci) {
        const int64_t c0 = ci * kChunk;
        const int64_t cols = std::min(kChunk, n - c0);
        ConstMatMap<T> ma(a, o, k);
        ConstStridedMap<T> mb(b + c0, o, cols, Eigen::OuterStride<>(n));
        StridedMap<T> mc(c + c0, k, cols, Eigen::OuterStride<>(n));
        if (accumulate)
            mc.noalias() += ma.transpose() * mb;
        else
            mc.noalias() = ma.transpose() * mb;
    }
}

// c[m x k] (+)= a[m x n] * b[k x n]^T
template <typename T>
void gemm_a_bt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
    constexpr int64_t kChunk = 64;
    const int64_t nchunks = (k + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
    for (int64_t ci = 0; ci < nchunks; ++ci) {
        const int64_t c0 = ci * kChunk;
        const int64_t cols = std::min(kChunk, k - c0);
        ConstMatMap<T> ma(a, m, n);
        ConstMatMap<T> mb(b + c0 * n, cols, n);
        StridedMap<T> mc(c + c0, m, cols, Eigen::OuterStride<>(k));
        if (accumulate)
            mc.noalias() += ma * mb.transpose();
        else
            mc.noalias() = ma * mb.transpose();
    }
}

struct ConvDims {
    int64_t n, in_c, h, w;
    int64_t out_c, kh, kw;
    int64_t stride, pad;
    int64_t ho, wo;
    int64_t krows() const { return in_c * kh * kw; }
    int64_t cols_per_sample() const { return ho * wo; }
    int64_t total_cols() const { return n * ho * wo; }
};

template <typename T>
ConvDims conv_dims(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                   int stride, int padding) {
    check(input.ndim() == 4, "conv2d input must be NCHW, got shape " + shape_str(input.shape()));
    check(weight.ndim() == 4, "conv2d weight must be OIKhKw, got shape " + shape_str(weight.shape()));
    check(bias.ndim() == 1, "conv2d bias must be rank 1, got shape " + shape_str(bias.shape()));
    check(stride >= 1, "conv2d stride must be >= 1, got " + std::to_string(stride));
    check(padding >= 0, "conv2d padding must be >= 0, got " + std::to_string(padding));

    ConvDims d;
    d.n = input.dim(0);
    d.in_c = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.out_c = weight.dim(0);
    d.kh = weight.dim(2);
    d.kw = weight.dim(3);
    d.stride = stride;
    d.pad = padding;

    check(weight.dim(1) == d.in_c, "conv2d channel mismatch: input " + shape_str(input.shape()) +
                                       " vs weight " + shape_str(weight.shape()));
    check(bias.dim(0) == d.out_c, "conv2d bias shape " + shape_str(bias.shape()) +
                                      " does not match weight " + shape_str(weight.shape()));
    check(d.kh <= d.h + 2 * d.pad && d.kw <= d.w + 2 * d.pad,
          "conv2d kernel " + shape_str(weight.shape()) + " exceeds padded input " +
              shape_str(input.shape()));
    check((d.h + 2 * d.pad - d.kh) % d.stride == 0 && (d.w + 2 * d.pad - d.kw) % d.stride == 0,
          "conv2d output size is not exact for input " + shape_str(input.shape()) + ", kernel " +
              shape_str(weight.shape()) + ", stride " + std::to_string(stride) + ", padding " +
              std::to_string(padding));
    d.ho = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
    d.wo = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
    return d;
}

// col[(c*Kh + dy)*Kw + dx][n*Ho*Wo + y*Wo + x] = padded input[n][c][y*s+dy-p][x*s+dx-p]
template <typename T>
void im2col(const T* input, T* col, const ConvDims& d) {
    const int64_t krows = d.krows();
    const int64_t cps = d.cols_per_sample();
    const int64_t total = d.total_cols();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < d.n; ++n) {
        const T* in_n = input + n * d.in_c * d.h * d.w;
        for (int64_t r = 0; r < krows; ++r) {
            const int64_t c = r / (d.kh * d.kw);
            const int64_t dy = (r / d.kw) % d.kh;
            const int64_t dx = r % d.kw;
            const T* src = in_n + c * d.h * d.w;
            T* dst = col + r * total + n * cps;
            for (int64_t y = 0; y < d.ho; ++y) {
                const int64_t sy = y * d.stride + dy - d.pad;
                T* drow = dst + y * d.wo;
                if (sy < 0 || sy >= d.h) {
                    std::fill(drow, drow + d.wo, T(0));
                    continue;
                }
                const T* srow = src + sy * d.w;
                for (int64_t x = 0; x < d.wo; ++x) {
                    const int64_t sx = x * d.stride + dx - d.pad;
                    drow[x] = (sx >= 0 && sx < d.w) ? srow[sx] : T(0);
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* dcol, T* dinput, const ConvDims& d) {
    const int64_t krows = d.krows();
    const int64_t cps = d.cols_per_sample();
    const int64_t total = d.total_cols();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < d.n; ++n) {
        T* din_n = dinput + n * d.in_c * d.h * d.w;
        for (int64_t r = 0; r < krows; ++r) {
            const int64_t c = r / (d.kh * d.kw);
            const int64_t dy = (r / d.kw) % d.kh;
            const int64_t dx = r % d.kw;
            T* dst = din_n + c * d.h * d.w;
            const T* src = dcol + r * total + n * cps;
            for (int64_t y = 0; y < d.ho; ++y) {
                const int64_t sy = y * d.stride + dy - d.pad;
                if (sy < 0 || sy >= d.h) continue;
                const T* srow = src + y * d.wo;
                T* drow = dst + sy * d.w;
                for (int64_t x = 0; x < d.wo; ++x) {
                    const int64_t sx = x * d.stride + dx - d.pad;
                    if (sx >= 0 && sx < d.w) drow[sx] += srow[x];
                }
            }
        }
    }
}

template <typename T>
ConvDims conv_dims_from_node(NodeT<T>& node) {
    const auto& in = node.inputs[0];
    const auto& wt = node.inputs[1];
    ConvDims d;
    d.n = in->shape[0];
    d.in_c = in->shape[1];
    d.h = in->shape[2];
    d.w = in->shape[3];
    d.out_c = wt->shape[0];
    d.kh = wt->shape[2];
    d.kw = wt->shape[3];
    d.stride = node.saved_ints[0];
    d.pad = node.saved_ints[1];
    d.ho = node.shape[2];
    d.wo = node.shape[3];
    return d;
}

template <typename T>
void backward_conv2d(NodeT<T>& node) {
    const ConvDims d = conv_dims_from_node(node);
    auto& in = *node.inputs[0];
    auto& wt = *node.inputs[1];
    auto& bs = *node.inputs[2];
    const std::vector<T>& col = node.saved_bufs[0];
    const int64_t total = d.total_cols();
    const int64_t cps = d.cols_per_sample();

    // node.grad is NOHW; the GEMMs want [O x total_cols]
    std::vector<T> gmat(static_cast<size_t>(d.out_c * total));
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t o = 0; o < d.out_c; ++o) {
            const T* src = node.grad.data() + (n * d.out_c + o) * cps;
            std::memcpy(gmat.data() + o * total + n * cps, src, sizeof(T) * static_cast<size_t>(cps));
        }
    }

    if (wt.requires_grad) {
        gemm_a_bt<T>(gmat.data(), col.data(), wt.grad_buffer().data(), d.out_c, total, d.krows(), true);
    }
    if (bs.requires_grad) {
        auto& bg = bs.grad_buffer();
        for (int64_t o = 0; o < d.out_c; ++o) {
            T acc = T(0);
            const T* row = gmat.data() + o * total;
            for (int64_t j = 0; j < total; ++j) acc += row[j];
            bg[static_cast<size_t>(o)] += acc;
        }
    }
    if (in.requires_grad) {
        std::vector<T> dcol(static_cast<size_t>(d.krows() * total));
        gemm_at_b<T>(wt.data.data(), gmat.data(), dcol.data(), d.out_c, d.krows(), total, false);
        col2im_add<T>(dcol.data(), in.grad_buffer().data(), d);
    }
}

template <typename T>
void backward_relu(NodeT<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& gin = in.grad_buffer();
    const T fault = g_fault_injection.load(std::memory_order_relaxed) ? T(1.05) : T(1);
    const int64_t n = node.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (in.data[static_cast<size_t>(i)] > T(0))
            gin[static_cast<size_t>(i)] += fault * node.grad[static_cast<size_t>(i)];
    }
}

template <typename T>
void backward_batchnorm(NodeT<T>& node) {
    auto& in = *node.inputs[0];
    auto& gamma = *node.inputs[1];
    auto& beta = *node.inputs[2];
    const bool train = node.saved_ints[0] != 0;
    const std::vector<T>& xhat = node.saved_bufs[0];
    const std::vector<T>& istd = node.saved_bufs[1];

    const int64_t n = in.shape[0], c = in.shape[1], hw = int64_t(in.shape[2]) * in.shape[3];
    const int64_t per_channel = n * hw;

    std::vector<T>* gin = in.requires_grad ? &in.grad_buffer() : nullptr;
    std::vector<T>* ggamma = gamma.requires_grad ? &gamma.grad_buffer() : nullptr;
    std::vector<T>* gbeta = beta.requires_grad ? &beta.grad_buffer() : nullptr;

#pragma omp parallel for schedule(static)
    for (int64_t ch = 0; ch < c; ++ch) {
        T sum_g = T(0), sum_gx = T(0);
        for (int64_t b = 0; b < n; ++b) {
            const int64_t base = (b * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const T g = node.grad[static_cast<size_t>(base + i)];
                sum_g += g;
                sum_gx += g * xhat[static_cast<size_t>(base + i)];
            }
        }
        if (ggamma) (*ggamma)[static_cast<size_t>(ch)] += sum_gx;
        if (gbeta) (*gbeta)[static_cast<size_t>(ch)] += sum_g;
        if (gin) {
            const T gs = gamma.data[static_cast<size_t>(ch)] * istd[static_cast<size_t>(ch)];
            if (train) {
                const T mean_g = sum_g / T(per_channel);
                const T mean_gx = sum_gx / T(per_channel);
                for (int64_t b = 0; b < n; ++b) {
                    const int64_t base = (b * c + ch) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const size_t k = static_cast<size_t>(base + i);
                        (*gin)[k] += gs * (node.grad[k] - mean_g - xhat[k] * mean_gx);
                    }
                }
            } else {
                for (int64_t b = 0; b < n; ++b) {
                    const int64_t base = (b * c + ch) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const size_t k = static_cast<size_t>(base + i);
                        (*gin)[k] += gs * node.grad[k];
                    }
                }
            }
        }
    }
}

template <typename T>
void backward_global_avg_pool(NodeT<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    const int64_t n = in.shape[0], c = in.shape[1], hw = int64_t(in.shape[2]) * in.shape[3];
    auto& gin = in.grad_buffer();
    const T inv = T(1) / T(hw);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T g = node.grad[static_cast<size_t>(b * c + ch)] * inv;
            T* dst = gin.data() + (b * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] += g;
        }
}

template <typename T>
void backward_linear(NodeT<T>& node) {
    auto& in = *node.inputs[0];
    auto& wt = *node.inputs[1];
    auto& bs = *node.inputs[2];
    const int64_t n = in.shape[0], f = in.shape[1], k = wt.shape[0];
    ConstMatMap<T> g(node.grad.data(), n, k);
    if (in.requires_grad) {
        MatMap<T> gin(in.grad_buffer().data(), n, f);
        ConstMatMap<T> w(wt.data.data(), k, f);
        gin.noalias() += g * w;
    }
    if (wt.requires_grad) {
        MatMap<T> gw(wt.grad_buffer().data(), k, f);
        ConstMatMap<T> x(in.data.data(), n, f);
        gw.noalias() += g.transpose() * x;
    }
    if (bs.requires_grad) {
        auto& gb = bs.grad_buffer();
        for (int64_t j = 0; j < k; ++j) {
            T acc = T(0);
            for (int64_t b = 0; b < n; ++b) acc += node.grad[static_cast<size_t>(b * k + j)];
            gb[static_cast<size_t>(j)] += acc;
        }
    }
}

template <typename T>
void backward_merge(NodeT<T>& node, bool mul) {
    auto& a = *node.inputs[0];
    auto& b = *node.inputs[1];
    const int64_t n = node.numel();
    if (a.requires_grad) {
        auto& ga = a.grad_buffer();
        for (int64_t i = 0; i < n; ++i) {
            const size_t k = static_cast<size_t>(i);
            ga[k] += mul ? node.grad[k] * b.data[k] : node.grad[k];
        }
    }
    if (b.requires_grad) {
        auto& gb = b.grad_buffer();
        for (int64_t i = 0; i < n; ++i) {
            const size_t k = static_cast<size_t>(i);
            gb[k] += mul ? node.grad[k] * a.data[k] : node.grad[k];
        }
    }
}

template <typename T>
void backward_softmax_ce(NodeT<T>& node) {
    auto& logits = *node.inputs[0];
    if (!logits.requires_grad) return;
    const std::vector<T>& probs = node.saved_bufs[0];
    const int64_t n = logits.shape[0], k = logits.shape[1];
    const T g = node.grad[0] / T(n);
    auto& gin = logits.grad_buffer();
    for (int64_t b = 0; b < n; ++b) {
        const int64_t label = node.saved_ints[static_cast<size_t>(b)];
        for (int64_t j = 0; j < k; ++j) {
            const size_t idx = static_cast<size_t>(b * k + j);
            gin[idx] += g * (probs[idx] - (j == label ? T(1) : T(0)));
        }
    }
}

template <typename T>
void backward_expand_channels(NodeT<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    const int64_t n = node.shape[0], c = node.shape[1], hw = int64_t(node.shape[2]) * node.shape[3];
    auto& gin = in.grad_buffer();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = node.grad.data() + (b * c + ch) * hw;
            T* dst = gin.data() + b * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
        }
}

template <typename T>
void backward_sum(NodeT<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& gin = in.grad_buffer();
    const T g = node.grad[0];
    for (auto& v : gin) v += g;
}

template <typename T>
void dispatch_backward(NodeT<T>& node) {
    switch (node.op) {
        case OpKind::Leaf: return;
        case OpKind::Conv2d: backward_conv2d(node); return;
        case OpKind::Relu: backward_relu(node); return;
        case OpKind::BatchNorm: backward_batchnorm(node); return;
        case OpKind::GlobalAvgPool: backward_global_avg_pool(node); return;
        case OpKind::Linear: backward_linear(node); return;
        case OpKind::MergeAdd: backward_merge(node, false); return;
        case OpKind::MergeMul: backward_merge(node, true); return;
        case OpKind::SoftmaxCrossEntropy: backward_softmax_ce(node); return;
        case OpKind::ExpandChannels: backward_expand_channels(node); return;
        case OpKind::Sum: backward_sum(node); return;
    }
    fail("unhandled op kind in backward");
}

}  // namespace

void set_backward_fault_injection(bool enabled) {
    g_fault_injection.store(enabled, std::memory_order_relaxed);
}
bool backward_fault_injection() { return g_fault_injection.load(std::memory_order_relaxed); }

std::string merge_mode_name(MergeMode mode) { return mode == MergeMode::Add ? "add" : "mul"; }

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding) {
    const ConvDims d = conv_dims(input, weight, bias, stride, padding);
    const int64_t total = d.total_cols();
    const int64_t cps = d.cols_per_sample();

    std::vector<T> col(static_cast<size_t>(d.krows() * total));
    im2col(input.data().data(), col.data(), d);

    std::vector<T> ymat(static_cast<size_t>(d.out_c * total));
    gemm<T>(weight.data().data(), col.data(), ymat.data(), d.out_c, d.krows(), total, false);

    TensorT<T> out = make_output<T>({int(d.n), int(d.out_c), int(d.ho), int(d.wo)}, OpKind::Conv2d,
                                    {input, weight, bias});
    auto& od = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t o = 0; o < d.out_c; ++o) {
            const T b = bias.data()[static_cast<size_t>(o)];
            const T* src = ymat.data() + o * total + n * cps;
            T* dst = od.data() + (n * d.out_c + o) * cps;
            for (int64_t i = 0; i < cps; ++i) dst[i] = src[i] + b;
        }
    }
    if (out.requires_grad()) {
        out.node()->saved_ints = {stride, padding};
        out.node()->saved_bufs.push_back(std::move(col));
    }
    return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
    TensorT<T> out = make_output<T>(input.shape(), OpKind::Relu, {input});
    const auto& x = input.data();
    auto& y = out.data();
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                       RunningStatsT<T>& stats, NormMode mode, T momentum, T eps) {
    check(input.ndim() == 4, "batchnorm2d input must be NCHW, got " + shape_str(input.shape()));
    const int64_t n = input.dim(0), c = input.dim(1), hw = int64_t(input.dim(2)) * input.dim(3);
    check(gamma.ndim() == 1 && gamma.dim(0) == c,
          "batchnorm2d gamma shape " + shape_str(gamma.shape()) + " does not match channels " +
              std::to_string(c));
    check(beta.ndim() == 1 && beta.dim(0) == c,
          "batchnorm2d beta shape " + shape_str(beta.shape()) + " does not match channels " +
              std::to_string(c));
    check(stats.mean.size() == static_cast<size_t>(c) && stats.var.size() == static_cast<size_t>(c),
          "batchnorm2d running stats sized for " + std::to_string(stats.mean.size()) +
              " channels, input has " + std::to_string(c));
    check(eps > T(0), "batchnorm2d eps must be positive");
    const int64_t per_channel = n * hw;
    if (mode == NormMode::Train)
        check(per_channel >= 2, "batchnorm2d train mode needs N*H*W >= 2, got " +
                                    std::to_string(per_channel));

    TensorT<T> out = make_output<T>(input.shape(), OpKind::BatchNorm, {input, gamma, beta});
    std::vector<T> xhat(input.data().size());
    std::vector<T> istd(static_cast<size_t>(c));
    const auto& x = input.data();
    auto& y = out.data();

#pragma omp parallel for schedule(static)
    for (int64_t ch = 0; ch < c; ++ch) {
        T mean, inv;
        if (mode == NormMode::Train) {
            T sum = T(0);
            for (int64_t b = 0; b < n; ++b) {
                const T* src = x.data() + (b * c + ch) * hw;
                for (int64_t i = 0; i < hw; ++i) sum += src[i];
            }
            mean = sum / T(per_channel);
            T sq = T(0);
            for (int64_t b = 0; b < n; ++b) {
                const T* src = x.data() + (b * c + ch) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const T dv = src[i] - mean;
                    sq += dv * dv;
                }
            }
            const T var = sq / T(per_channel);
            inv = T(1) / std::sqrt(var + eps);
            stats.mean[static_cast<size_t>(ch)] =
                (T(1) - momentum) * stats.mean[static_cast<size_t>(ch)] + momentum * mean;
            stats.var[static_cast<size_t>(ch)] =
                (T(1) - momentum) * stats.var[static_cast<size_t>(ch)] + momentum * var;
        } else {
            mean = stats.mean[static_cast<size_t>(ch)];
            inv = T(1) / std::sqrt(stats.var[static_cast<size_t>(ch)] + eps);
        }
        istd[static_cast<size_t>(ch)] = inv;
        const T g = gamma.data()[static_cast<size_t>(ch)];
        const T bt = beta.data()[static_cast<size_t>(ch)];
        for (int64_t b = 0; b < n; ++b) {
            const int64_t base = (b * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const size_t k = static_cast<size_t>(base + i);
                const T xh = (x[k] - mean) * inv;
                xhat[k] = xh;
                y[k] = g * xh + bt;
            }
        }
    }
    if (out.requires_grad()) {
        out.node()->saved_ints = {mode == NormMode::Train ? 1 : 0};
        out.node()->saved_bufs.push_back(std::move(xhat));
        out.node()->saved_bufs.push_back(std::move(istd));
    }
    return out;
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
    check(input.ndim() == 4, "global_avg_pool input must be NCHW, got " + shape_str(input.shape()));
    const int64_t n = input.dim(0), c = input.dim(1), hw = int64_t(input.dim(2)) * input.dim(3);
    TensorT<T> out = make_output<T>({int(n), int(c)}, OpKind::GlobalAvgPool, {input});
    const auto& x = input.data();
    auto& y = out.data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = x.data() + (b * c + ch) * hw;
            T acc = T(0);
            for (int64_t i = 0; i < hw; ++i) acc += src[i];
            y[static_cast<size_t>(b * c + ch)] = acc / T(hw);
        }
    return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
    check(input.ndim() == 2, "linear input must be NF, got " + shape_str(input.shape()));
    check(weight.ndim() == 2, "linear weight must be KF, got " + shape_str(weight.shape()));
    check(input.dim(1) == weight.dim(1), "linear inner dim mismatch: input " +
                                             shape_str(input.shape()) + " vs weight " +
                                             shape_str(weight.shape()));
    const int64_t n = input.dim(0), f = input.dim(1), k = weight.dim(0);
    check(bias.ndim() == 1 && bias.dim(0) == k, "linear bias shape " + shape_str(bias.shape()) +
                                                    " does not match weight " +
                                                    shape_str(weight.shape()));
    TensorT<T> out = make_output<T>({int(n), int(k)}, OpKind::Linear, {input, weight, bias});
    ConstMatMap<T> x(input.data().data(), n, f);
    ConstMatMap<T> w(weight.data().data(), k, f);
    MatMap<T> y(out.data().data(), n, k);
    y.noalias() = x * w.transpose();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t j = 0; j < k; ++j)
            out.data()[static_cast<size_t>(b * k + j)] += bias.data()[static_cast<size_t>(j)];
    return out;
}

template <typename T>
TensorT<T> elementwise_merge(const TensorT<T>& a, const TensorT<T>& b, MergeMode mode) {
    check(a.shape() == b.shape(), "elementwise_merge shape mismatch: " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
    TensorT<T> out = make_output<T>(a.shape(), mode == MergeMode::Add ? OpKind::MergeAdd : OpKind::MergeMul,
                                    {a, b});
    const auto& xa = a.data();
    const auto& xb = b.data();
    auto& y = out.data();
    if (mode == MergeMode::Add)
        for (size_t i = 0; i < xa.size(); ++i) y[i] = xa[i] + xb[i];
    else
        for (size_t i = 0; i < xa.size(); ++i) y[i] = xa[i] * xb[i];
    return out;
}

template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    check(logits.ndim() == 2, "softmax_cross_entropy logits must be NK, got " + shape_str(logits.shape()));
    const int64_t n = logits.dim(0), k = logits.dim(1);
    check(static_cast<int64_t>(labels.size()) == n,
          "softmax_cross_entropy got " + std::to_string(labels.size()) + " labels for batch " +
              std::to_string(n));
    for (int64_t b = 0; b < n; ++b)
        check(labels[static_cast<size_t>(b)] >= 0 && labels[static_cast<size_t>(b)] < k,
              "label " + std::to_string(labels[static_cast<size_t>(b)]) + " out of range [0," +
                  std::to_string(k) + ")");

    TensorT<T> out = make_output<T>({1}, OpKind::SoftmaxCrossEntropy, {logits});
    std::vector<T> probs(logits.data().size());
    const auto& x = logits.data();
    T loss = T(0);
    for (int64_t b = 0; b < n; ++b) {
        const T* row = x.data() + b * k;
        T mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (int64_t j = 0; j < k; ++j) {
            const T e = std::exp(row[j] - mx);
            probs[static_cast<size_t>(b * k + j)] = e;
            denom += e;
        }
        const T inv = T(1) / denom;
        for (int64_t j = 0; j < k; ++j) probs[static_cast<size_t>(b * k + j)] *= inv;
        loss -= std::log(probs[static_cast<size_t>(b * k + labels[static_cast<size_t>(b)])]);
    }
    out.data()[0] = loss / T(n);
    if (out.requires_grad()) {
        out.node()->saved_bufs.push_back(std::move(probs));
        out.node()->saved_ints.assign(labels.begin(), labels.end());
    }
    return out;
}

template <typename T>
TensorT<T> area_resize(const TensorT<T>& mask, int target_h, int target_w) {
    check(mask.ndim() == 4, "area_resize input must be NCHW, got " + shape_str(mask.shape()));
    check(!mask.requires_grad(), "area_resize does not propagate gradients; input must not require grad");
    check(target_h >= 1 && target_w >= 1, "area_resize target size must be positive");
    const int64_t n = mask.dim(0), c = mask.dim(1), h = mask.dim(2), w = mask.dim(3);
    check(h % target_h == 0 && w % target_w == 0,
          "area_resize needs source dims divisible by target: source " + std::to_string(h) + "x" +
              std::to_string(w) + ", target " + std::to_string(target_h) + "x" +
              std::to_string(target_w));
    const int64_t bh = h / target_h, bw = w / target_w;
    TensorT<T> out = TensorT<T>::zeros({int(n), int(c), target_h, target_w});
    const auto& x = mask.data();
    auto& y = out.data();
    const T inv = T(1) / T(bh * bw);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = x.data() + (b * c + ch) * h * w;
            T* dst = y.data() + (b * c + ch) * target_h * target_w;
            for (int64_t ty = 0; ty < target_h; ++ty)
                for (int64_t tx = 0; tx < target_w; ++tx) {
                    T acc = T(0);
                    for (int64_t dy = 0; dy < bh; ++dy) {
                        const T* row = src + (ty * bh + dy) * w + tx * bw;
                        for (int64_t dx = 0; dx < bw; ++dx) acc += row[dx];
                    }
                    dst[ty * target_w + tx] = acc * inv;
                }
        }
    return out;
}

template <typename T>
TensorT<T> expand_channels(const TensorT<T>& mask, int channels) {
    check(mask.ndim() == 4 && mask.dim(1) == 1,
          "expand_channels input must be N1HW, got " + shape_str(mask.shape()));
    check(channels >= 1, "expand_channels needs channels >= 1");
    const int64_t n = mask.dim(0), h = mask.dim(2), w = mask.dim(3), hw = h * w;
    TensorT<T> out = make_output<T>({int(n), channels, int(h), int(w)}, OpKind::ExpandChannels, {mask});
    const auto& x = mask.data();
    auto& y = out.data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < channels; ++ch)
            std::memcpy(y.data() + (b * channels + ch) * hw, x.data() + b * hw,
                        sizeof(T) * static_cast<size_t>(hw));
    return out;
}

template <typename T>
TensorT<T> binarize(const TensorT<T>& mask, T threshold) {
    check(!mask.requires_grad(), "binarize does not propagate gradients; input must not require grad");
    TensorT<T> out = TensorT<T>::zeros(mask.shape());
    const auto& x = mask.data();
    auto& y = out.data();
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > threshold ? T(1) : T(0);
    return out;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& input) {
    TensorT<T> out = make_output<T>({1}, OpKind::Sum, {input});
    T acc = T(0);
    for (const T v : input.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

template <typename T>
void backward(const TensorT<T>& loss) {
    check(loss.defined(), "backward called on an undefined tensor");
    check(loss.numel() == 1,
          "backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    NodeT<T>* root = loss.node().get();
    if (!root->requires_grad) return;  // nothing reachable requires grad

    std::vector<NodeT<T>*> topo;
    std::unordered_set<const NodeT<T>*> seen;
    struct Frame {
        NodeT<T>* node;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->inputs.size()) {
            NodeT<T>* child = f.node->inputs[f.next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }
    // interior gradients belong to this pass; leaf (parameter) gradients accumulate
    for (NodeT<T>* nd : topo)
        if (nd->op != OpKind::Leaf) nd->grad.assign(nd->data.size(), T(0));
    root->grad_buffer();
    root->grad[0] += T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) dispatch_backward(**it);
}

template <typename T>
SgdT<T>::SgdT(std::vector<ParameterT<T>*> params) : params_(std::move(params)) {
    velocity_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
        velocity_[i].assign(params_[i]->value.data().size(), T(0));
}

template <typename T>
void SgdT<T>::step(T lr, T momentum, T weight_decay) {
    for (auto* p : params_)
        check(p->value.has_grad(), "sgd step: missing gradient for parameter " + p->name);
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& value = params_[i]->value.data();
        auto& grad = params_[i]->value.grad();
        auto& vel = velocity_[i];
        for (size_t j = 0; j < value.size(); ++j) {
            vel[j] = momentum * vel[j] + grad[j] + weight_decay * value[j];
            value[j] -= lr * vel[j];
        }
        params_[i]->value.zero_grad();
    }
}

#define ROILAB_INSTANTIATE_OPS(T)                                                                  \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int,   \
                                  int);                                                            \
    template TensorT<T> relu<T>(const TensorT<T>&);                                               \
    template TensorT<T> batchnorm2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                       RunningStatsT<T>&, NormMode, T, T);                        \
    template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                                    \
    template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);       \
    template TensorT<T> elementwise_merge<T>(const TensorT<T>&, const TensorT<T>&, MergeMode);    \
    template TensorT<T> softmax_cross_entropy<T>(const TensorT<T>&, const std::vector<int>&);     \
    template TensorT<T> area_resize<T>(const TensorT<T>&, int, int);                              \
    template TensorT<T> expand_channels<T>(const TensorT<T>&, int);                               \
    template TensorT<T> binarize<T>(const TensorT<T>&, T);                                        \
    template TensorT<T> sum<T>(const TensorT<T>&);                                                \
    template void backward<T>(const TensorT<T>&);                                                 \
    template class SgdT<T>;

ROILAB_INSTANTIATE_OPS(float)
ROILAB_INSTANTIATE_OPS(double)

#undef ROILAB_INSTANTIATE_OPS

}  // namespace roilab
