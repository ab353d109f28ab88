#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "convctx/error.hpp"
#include "convctx/rng.hpp"

namespace convctx {

// ---------------------------------------------------------------------------
// Precision mode
// ---------------------------------------------------------------------------
// Arithmetic runs in double throughout; in f32 mode every operation result,
// gradient accumulation, and optimizer update is rounded through IEEE float
// so all live values stay exactly representable in the 32-bit checkpoint
// format. The mode is process-global, not per-tensor.

enum class Precision { f64, f32 };

Precision precision();
void set_precision(Precision p);

// Rounds a value through float when the global mode is f32.
double quantized(double v);
void quantize_buffer(std::vector<double>& buf);

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct TensorData {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated lazily by backward()
    bool requires_grad = false;
};

// Shared-ownership handle to a dense row-major array. Copies alias the same
// storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value,
                       bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // Entries drawn i.i.d. uniform in [lo, hi).
    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo,
                          double hi, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int>& shape() const { return d_->shape; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    int extent(int axis) const;
    std::int64_t size() const { return static_cast<std::int64_t>(d_->values.size()); }

    std::span<double> values() { return d_->values; }
    std::span<const double> values() const { return d_->values; }
    double item() const;  // requires size() == 1

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        d_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();

    Tensor clone() const;

    std::shared_ptr<TensorData> data_ptr() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

std::string shape_str(const std::vector<int>& shape);
std::int64_t shape_numel(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------
// Records executed primitives in execution (hence topological) order. A Tape
// activates itself for the constructing thread; operations record onto the
// innermost active tape whenever any input requires a gradient. backward()
// replays adjoints in reverse; it may be called repeatedly and never
// consumes the tape.

class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Tensor& loss);

    std::size_t num_nodes() const { return nodes_.size(); }

    static Tape* active();

    struct Node {
        std::shared_ptr<TensorData> out;
        std::function<void()> adjoint;
    };

    void record(std::shared_ptr<TensorData> out, std::function<void()> adjoint);

private:
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
};

// Disables recording for the current scope (inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_ = nullptr;
};

// Populates gradients of loss (a scalar) w.r.t. every tensor recorded on the
// currently active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Boolean masks (non-differentiable operand of attention)
// ---------------------------------------------------------------------------

struct Mask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> allow;  // row-major; nonzero = attend

    static Mask all(int rows, int cols, bool allowed = true);
    // allow[q][k] iff k <= q
    static Mask causal(int n);
    bool at(int r, int c) const { return allow[static_cast<std::size_t>(r) * cols + c] != 0; }
};

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------
// All primitives are differentiable (masks and index lists are constants).
// Broadcasting is never implicit; the *_rowwise variants are the only
// sanctioned broadcast and operate over the last axis.

// Batched matrix product: [.., M, K] x [.., K, N] -> [.., M, N]; leading
// extents must agree.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);

// x: [.., D] plus b: [D] broadcast over all leading axes.
Tensor add_rowwise(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& a);

// Softmax along `axis`. Entries equal to -infinity act as a masking sentinel
// and map to exactly zero; a slice with every entry masked is a caller bug.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax_lastdim(const Tensor& a);

// Swaps the last two axes.
Tensor transpose(const Tensor& a);

Tensor reshape(const Tensor& a, std::vector<int> shape);

Tensor concat(const std::vector<Tensor>& parts, int axis);

// Rows of x selected by index: out[i, :] = x[indices[i], :].
Tensor take_rows(const Tensor& x, const std::vector<int>& indices);

// out = x where allowed, -infinity where blocked. x must be [rows, cols].
Tensor mask_fill(const Tensor& x, const Mask& mask);

Tensor sum(const Tensor& a);  // scalar

// Mean over rows of -logprobs[i, targets[i]].
Tensor nll_from_logprobs(const Tensor& logprobs, const std::vector<int>& targets);

// [C, T, F] -> [T, C*F] with out[t, c*F + f] = x[c, t, f].
Tensor flatten_channels(const Tensor& x);

// 2-D convolution, stride 1, zero same-padding (odd kernels only).
// x: [Cin, T, F], w: [Cout, Cin, kt, kf], b: [Cout] -> [Cout, T, F]
Tensor conv2d_same(const Tensor& x, const Tensor& w, const Tensor& b);

// Max pool with window p x p, stride p, over the trailing two axes;
// partial windows at the ends are kept (ceil semantics).
Tensor maxpool2d(const Tensor& x, int p);

// Causal 1-D convolution over time. Step t reads inputs t-k+1..t with zero
// left-padding. x: [T, Din], w: [Dout, Din, k], b: [Dout] -> [T, Dout]
Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalizes each slice along the last axis to mean 0 / variance 1 (up to
// eps), then applies gain and bias. x: [.., D], gain, bias: [D].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Normalizes across channels independently at each (t, f) position.
// x: [C, T, F], gain, bias: [C].
Tensor layer_norm_channels(const Tensor& x, const Tensor& gain,
                           const Tensor& bias, double eps);

// Inverted dropout; identity when rate == 0. Draws one uniform per element.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace convctx
