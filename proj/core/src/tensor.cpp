#include "convctx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace convctx {

namespace {

Precision g_precision = Precision::f64;
thread_local Tape* g_active_tape = nullptr;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void ensure_grad(TensorData& td) {
    if (td.grad.empty()) td.grad.assign(td.values.size(), 0.0);
}

// Gradient accumulation; every write goes through the precision mode.
inline void acc(double& g, double v) { g = quantized(g + v); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

double quantized(double v) {
    if (g_precision == Precision::f32) return static_cast<double>(static_cast<float>(v));
    return v;
}

void quantize_buffer(std::vector<double>& buf) {
    if (g_precision != Precision::f32) return;
    for (double& v : buf) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const std::vector<int>& shape) { return checked_numel(shape); }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto d = std::make_shared<TensorData>();
    d->values.assign(static_cast<std::size_t>(checked_numel(shape)), 0.0);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    const double q = quantized(value);
    for (double& v : t.d_->values) v = q;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values,
                    bool requires_grad) {
    if (checked_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(values);
    d->requires_grad = requires_grad;
    quantize_buffer(d->values);
    return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.d_->values) v = quantized(rng.uniform(lo, hi));
    return t;
}

int Tensor::extent(int axis) const {
    if (axis < 0) axis += ndim();
    if (axis < 0 || axis >= ndim()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                             shape_str(shape()));
    }
    return d_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return d_->values[0];
}

std::span<const double> Tensor::grad() const {
    if (d_->grad.empty()) throw ContractError("gradient not populated");
    return d_->grad;
}

std::span<double> Tensor::grad_mut() {
    ensure_grad(*d_);
    return d_->grad;
}

void Tensor::zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    auto d = std::make_shared<TensorData>(*d_);
    return Tensor(std::move(d));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorData> out, std::function<void()> adjoint) {
    nodes_.push_back(Node{std::move(out), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward() requires a scalar loss");
    }
    // Intermediate grads are recomputed from scratch on every call; leaf
    // grads accumulate until explicitly zeroed.
    for (Node& n : nodes_) {
        if (!n.out->requires_grad || n.out->grad.empty()) continue;
        n.out->grad.clear();
    }
    auto ld = loss.data_ptr();
    ld->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->out->grad.empty()) continue;
        it->adjoint();
    }
}

void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw ContractError("backward() with no active tape");
    t->backward(loss);
}

NoGradGuard::NoGradGuard() {
    saved_ = g_active_tape;
    g_active_tape = nullptr;
}

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

Mask Mask::all(int rows, int cols, bool allowed) {
    Mask m;
    m.rows = rows;
    m.cols = cols;
    m.allow.assign(static_cast<std::size_t>(rows) * cols, allowed ? 1 : 0);
    return m;
}

Mask Mask::causal(int n) {
    Mask m = all(n, n, false);
    for (int q = 0; q < n; ++q) {
        for (int k = 0; k <= q; ++k) m.allow[static_cast<std::size_t>(q) * n + k] = 1;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace {

bool recording_for(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

Tensor finish_op(Tensor out, std::function<void()> adjoint, bool needs_grad) {
    if (needs_grad) {
        out.set_requires_grad(true);
        Tape::active()->record(out.data_ptr(), std::move(adjoint));
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2 || a.ndim() != b.ndim()) {
        throw DimensionError("matmul: ranks " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const int nd = a.ndim();
    const int M = a.extent(nd - 2), K = a.extent(nd - 1);
    const int Kb = b.extent(nd - 2), N = b.extent(nd - 1);
    std::int64_t batch = 1;
    for (int i = 0; i < nd - 2; ++i) {
        if (a.extent(i) != b.extent(i)) {
            throw DimensionError("matmul: batch extents differ " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
        }
        batch *= a.extent(i);
    }
    if (K != Kb) {
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    std::vector<int> oshape(a.shape().begin(), a.shape().end() - 2);
    oshape.push_back(M);
    oshape.push_back(N);
    std::vector<double> ov(static_cast<std::size_t>(batch) * M * N, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::int64_t g = 0; g < batch; ++g) {
        const double* pa = av.data() + g * M * K;
        const double* pb = bv.data() + g * K * N;
        double* po = ov.data() + g * static_cast<std::int64_t>(M) * N;
        for (int m = 0; m < M; ++m) {
            for (int k = 0; k < K; ++k) {
                const double amk = pa[m * K + k];
                const double* brow = pb + k * N;
                double* orow = po + m * N;
                for (int n = 0; n < N; ++n) orow[n] += amk * brow[n];
            }
        }
    }
    Tensor out = Tensor::from(std::move(oshape), std::move(ov));

    const bool rec = recording_for({&a, &b});
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, bd, od, batch, M, K, N] {
            const std::span<const double> go = od->grad;
            if (ad->requires_grad) {
                ensure_grad(*ad);
                for (std::int64_t g = 0; g < batch; ++g) {
                    const double* pg = go.data() + g * static_cast<std::int64_t>(M) * N;
                    const double* pb = bd->values.data() + g * static_cast<std::int64_t>(K) * N;
                    double* pda = ad->grad.data() + g * static_cast<std::int64_t>(M) * K;
                    // dA = dC * B^T
                    for (int m = 0; m < M; ++m) {
                        for (int k = 0; k < K; ++k) {
                            double s = 0.0;
                            for (int n = 0; n < N; ++n) s += pg[m * N + n] * pb[k * N + n];
                            acc(pda[m * K + k], s);
                        }
                    }
                }
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::int64_t g = 0; g < batch; ++g) {
                    const double* pg = go.data() + g * static_cast<std::int64_t>(M) * N;
                    const double* pa = ad->values.data() + g * static_cast<std::int64_t>(M) * K;
                    double* pdb = bd->grad.data() + g * static_cast<std::int64_t>(K) * N;
                    // dB = A^T * dC
                    for (int k = 0; k < K; ++k) {
                        for (int m = 0; m < M; ++m) {
                            const double amk = pa[m * K + k];
                            const double* grow = pg + m * N;
                            double* brow = pdb + k * N;
                            for (int n = 0; n < N; ++n) acc(brow[n], amk * grow[n]);
                        }
                    }
                }
            }
        },
        rec);
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> ov(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a, &b});
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, bd, od] {
            for (auto* side : {ad.get(), bd.get()}) {
                if (!side->requires_grad) continue;
                ensure_grad(*side);
                for (std::size_t i = 0; i < od->grad.size(); ++i) acc(side->grad[i], od->grad[i]);
            }
        },
        rec);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> ov(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a, &b});
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, bd, od] {
            if (ad->requires_grad) {
                ensure_grad(*ad);
                for (std::size_t i = 0; i < od->grad.size(); ++i) acc(ad->grad[i], od->grad[i]);
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::size_t i = 0; i < od->grad.size(); ++i) acc(bd->grad[i], -od->grad[i]);
            }
        },
        rec);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> ov(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a, &b});
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, bd, od] {
            if (ad->requires_grad) {
                ensure_grad(*ad);
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    acc(ad->grad[i], od->grad[i] * bd->values[i]);
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    acc(bd->grad[i], od->grad[i] * ad->values[i]);
            }
        },
        rec);
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> ov(a.values().begin(), a.values().end());
    for (double& v : ov) v *= c;
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, od, c] {
            ensure_grad(*ad);
            for (std::size_t i = 0; i < od->grad.size(); ++i) acc(ad->grad[i], c * od->grad[i]);
        },
        rec);
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    if (b.ndim() != 1 || x.ndim() < 1 || x.extent(-1) != b.extent(0)) {
        throw DimensionError("add_rowwise: " + shape_str(x.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const int D = b.extent(0);
    std::vector<double> ov(x.values().begin(), x.values().end());
    const auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i % D];
    Tensor out = Tensor::from(x.shape(), std::move(ov));
    const bool rec = recording_for({&x, &b});
    auto xd = x.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, bd, od, D] {
            if (xd->requires_grad) {
                ensure_grad(*xd);
                for (std::size_t i = 0; i < od->grad.size(); ++i) acc(xd->grad[i], od->grad[i]);
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    acc(bd->grad[i % D], od->grad[i]);
            }
        },
        rec);
}

Tensor relu(const Tensor& a) {
    std::vector<double> ov(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, od] {
            ensure_grad(*ad);
            // Subgradient at zero is zero.
            for (std::size_t i = 0; i < od->grad.size(); ++i) {
                if (ad->values[i] > 0.0) acc(ad->grad[i], od->grad[i]);
            }
        },
        rec);
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::from({1}, {s});
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, od] {
            ensure_grad(*ad);
            const double g = od->grad[0];
            for (double& gv : ad->grad) acc(gv, g);
        },
        rec);
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace {

// Applies fn to every line along `axis`; a line has `extent` elements spaced
// by `stride` starting at `base`.
template <typename Fn>
void for_each_line(const std::vector<int>& shape, int axis, Fn&& fn) {
    const int nd = static_cast<int>(shape.size());
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= shape[static_cast<std::size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    const int extent = shape[static_cast<std::size_t>(axis)];
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            fn(o * extent * inner + in, inner, extent);
        }
    }
}

int normalize_axis(const Tensor& t, int axis, const char* op) {
    int a = axis < 0 ? axis + t.ndim() : axis;
    if (a < 0 || a >= t.ndim()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(t.shape()));
    }
    return a;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    const int ax = normalize_axis(a, axis, "softmax");
    std::vector<double> ov(a.size());
    const auto av = a.values();
    for_each_line(a.shape(), ax, [&](std::int64_t base, std::int64_t stride, int extent) {
        double mx = kNegInf;
        for (int i = 0; i < extent; ++i) mx = std::max(mx, av[base + i * stride]);
        if (mx == kNegInf) {
            throw ContractError("softmax: fully masked slice (all entries -inf)");
        }
        double denom = 0.0;
        for (int i = 0; i < extent; ++i) {
            const double e = std::exp(av[base + i * stride] - mx);
            ov[base + i * stride] = e;
            denom += e;
        }
        for (int i = 0; i < extent; ++i) ov[base + i * stride] /= denom;
    });
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    auto shape = a.shape();
    return finish_op(
        std::move(out),
        [ad, od, shape, ax] {
            ensure_grad(*ad);
            for_each_line(shape, ax, [&](std::int64_t base, std::int64_t stride, int extent) {
                double dot = 0.0;
                for (int i = 0; i < extent; ++i)
                    dot += od->grad[base + i * stride] * od->values[base + i * stride];
                for (int i = 0; i < extent; ++i) {
                    const std::int64_t k = base + i * stride;
                    acc(ad->grad[k], od->values[k] * (od->grad[k] - dot));
                }
            });
        },
        rec);
}

Tensor log_softmax_lastdim(const Tensor& a) {
    if (a.ndim() < 1) throw DimensionError("log_softmax: rank-0 input");
    const int ax = a.ndim() - 1;
    std::vector<double> ov(a.size());
    const auto av = a.values();
    for_each_line(a.shape(), ax, [&](std::int64_t base, std::int64_t stride, int extent) {
        double mx = kNegInf;
        for (int i = 0; i < extent; ++i) mx = std::max(mx, av[base + i * stride]);
        if (mx == kNegInf) {
            throw ContractError("log_softmax: fully masked slice (all entries -inf)");
        }
        double denom = 0.0;
        for (int i = 0; i < extent; ++i) denom += std::exp(av[base + i * stride] - mx);
        const double lse = mx + std::log(denom);
        for (int i = 0; i < extent; ++i) ov[base + i * stride] = av[base + i * stride] - lse;
    });
    Tensor out = Tensor::from(a.shape(), std::move(ov));
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    auto shape = a.shape();
    return finish_op(
        std::move(out),
        [ad, od, shape, ax] {
            ensure_grad(*ad);
            for_each_line(shape, ax, [&](std::int64_t base, std::int64_t stride, int extent) {
                double gsum = 0.0;
                for (int i = 0; i < extent; ++i) gsum += od->grad[base + i * stride];
                for (int i = 0; i < extent; ++i) {
                    const std::int64_t k = base + i * stride;
                    acc(ad->grad[k], od->grad[k] - std::exp(od->values[k]) * gsum);
                }
            });
        },
        rec);
}

Tensor nll_from_logprobs(const Tensor& logprobs, const std::vector<int>& targets) {
    if (logprobs.ndim() != 2) {
        throw DimensionError("nll: expected [N, V], got " + shape_str(logprobs.shape()));
    }
    const int N = logprobs.extent(0), V = logprobs.extent(1);
    if (static_cast<int>(targets.size()) != N) {
        throw DimensionError("nll: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(N) + " rows");
    }
    if (N == 0) throw ContractError("nll: no valid positions");
    double s = 0.0;
    const auto lv = logprobs.values();
    for (int i = 0; i < N; ++i) {
        const int t = targets[i];
        if (t < 0 || t >= V) {
            throw InputError("nll: target id " + std::to_string(t) + " out of range [0, " +
                             std::to_string(V) + ")");
        }
        s -= lv[static_cast<std::size_t>(i) * V + t];
    }
    Tensor out = Tensor::from({1}, {s / N});
    const bool rec = recording_for({&logprobs});
    auto ld = logprobs.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ld, od, targets, N, V] {
            ensure_grad(*ld);
            const double g = od->grad[0] / N;
            for (int i = 0; i < N; ++i)
                acc(ld->grad[static_cast<std::size_t>(i) * V + targets[i]], -g);
        },
        rec);
}

// ---------------------------------------------------------------------------
// Shape primitives
// ---------------------------------------------------------------------------

Tensor transpose(const Tensor& a) {
    if (a.ndim() < 2) throw DimensionError("transpose: rank < 2: " + shape_str(a.shape()));
    const int nd = a.ndim();
    const int R = a.extent(nd - 2), C = a.extent(nd - 1);
    std::int64_t batch = 1;
    for (int i = 0; i < nd - 2; ++i) batch *= a.extent(i);
    std::vector<int> oshape = a.shape();
    std::swap(oshape[static_cast<std::size_t>(nd - 2)], oshape[static_cast<std::size_t>(nd - 1)]);
    std::vector<double> ov(a.size());
    const auto av = a.values();
    for (std::int64_t g = 0; g < batch; ++g) {
        const double* p = av.data() + g * R * C;
        double* q = ov.data() + g * R * C;
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) q[c * R + r] = p[r * C + c];
    }
    Tensor out = Tensor::from(std::move(oshape), std::move(ov));
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, od, batch, R, C] {
            ensure_grad(*ad);
            for (std::int64_t g = 0; g < batch; ++g) {
                const double* gq = od->grad.data() + g * R * C;
                double* ga = ad->grad.data() + g * R * C;
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) acc(ga[r * C + c], gq[c * R + r]);
            }
        },
        rec);
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (checked_numel(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                             " changes element count");
    }
    Tensor out = Tensor::from(std::move(shape),
                              std::vector<double>(a.values().begin(), a.values().end()));
    const bool rec = recording_for({&a});
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [ad, od] {
            ensure_grad(*ad);
            for (std::size_t i = 0; i < od->grad.size(); ++i) acc(ad->grad[i], od->grad[i]);
        },
        rec);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const int ax = normalize_axis(parts[0], axis, "concat");
    const int nd = parts[0].ndim();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != nd) throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i) {
            if (i != ax && p.extent(i) != parts[0].extent(i)) {
                throw DimensionError("concat: extent mismatch at axis " + std::to_string(i) +
                                     ": " + shape_str(p.shape()) + " vs " +
                                     shape_str(parts[0].shape()));
            }
        }
        total += p.extent(ax);
    }
    std::vector<int> oshape = parts[0].shape();
    oshape[static_cast<std::size_t>(ax)] = total;
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < nd; ++i) inner *= oshape[static_cast<std::size_t>(i)];
    for (int i = 0; i < ax; ++i) outer *= oshape[static_cast<std::size_t>(i)];

    std::vector<double> ov(static_cast<std::size_t>(checked_numel(oshape)));
    std::int64_t off = 0;  // offset along the concat axis, in elements
    std::vector<std::int64_t> part_offsets;
    for (const Tensor& p : parts) {
        part_offsets.push_back(off);
        const std::int64_t block = p.extent(ax) * inner;
        const auto pv = p.values();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(pv.data() + o * block, block,
                        ov.data() + o * total * inner + off * inner);
        }
        off += p.extent(ax);
    }
    Tensor out = Tensor::from(std::move(oshape), std::move(ov));

    bool rec = Tape::active() != nullptr;
    if (rec) {
        bool any = false;
        for (const Tensor& p : parts) any = any || p.requires_grad();
        rec = any;
    }
    std::vector<std::shared_ptr<TensorData>> pds;
    std::vector<int> extents;
    for (const Tensor& p : parts) {
        pds.push_back(p.data_ptr());
        extents.push_back(p.extent(ax));
    }
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [pds, part_offsets, extents, od, outer, inner, total] {
            for (std::size_t pi = 0; pi < pds.size(); ++pi) {
                TensorData& pd = *pds[pi];
                if (!pd.requires_grad) continue;
                ensure_grad(pd);
                const std::int64_t block = extents[pi] * inner;
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = od->grad.data() + o * total * inner + part_offsets[pi] * inner;
                    double* dst = pd.grad.data() + o * block;
                    for (std::int64_t i = 0; i < block; ++i) acc(dst[i], src[i]);
                }
            }
        },
        rec);
}

Tensor take_rows(const Tensor& x, const std::vector<int>& indices) {
    if (x.ndim() < 2) throw DimensionError("take_rows: rank < 2: " + shape_str(x.shape()));
    const int R = x.extent(0);
    const std::int64_t row = x.size() / R;
    for (int idx : indices) {
        if (idx < 0 || idx >= R) {
            throw InputError("take_rows: index " + std::to_string(idx) + " out of range [0, " +
                             std::to_string(R) + ")");
        }
    }
    std::vector<int> oshape = x.shape();
    oshape[0] = static_cast<int>(indices.size());
    std::vector<double> ov(static_cast<std::size_t>(indices.size()) * row);
    const auto xv = x.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(xv.data() + static_cast<std::int64_t>(indices[i]) * row, row,
                    ov.data() + static_cast<std::int64_t>(i) * row);
    }
    Tensor out = Tensor::from(std::move(oshape), std::move(ov));
    const bool rec = recording_for({&x});
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, od, indices, row] {
            ensure_grad(*xd);
            for (std::size_t i = 0; i < indices.size(); ++i) {
                const double* src = od->grad.data() + static_cast<std::int64_t>(i) * row;
                double* dst = xd->grad.data() + static_cast<std::int64_t>(indices[i]) * row;
                for (std::int64_t k = 0; k < row; ++k) acc(dst[k], src[k]);
            }
        },
        rec);
}

Tensor mask_fill(const Tensor& x, const Mask& mask) {
    if (x.ndim() != 2 || x.extent(0) != mask.rows || x.extent(1) != mask.cols) {
        throw DimensionError("mask_fill: tensor " + shape_str(x.shape()) + " vs mask [" +
                             std::to_string(mask.rows) + ", " + std::to_string(mask.cols) + "]");
    }
    std::vector<double> ov(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < ov.size(); ++i) {
        if (!mask.allow[i]) ov[i] = kNegInf;
    }
    Tensor out = Tensor::from(x.shape(), std::move(ov));
    const bool rec = recording_for({&x});
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    auto allow = mask.allow;
    return finish_op(
        std::move(out),
        [xd, od, allow] {
            ensure_grad(*xd);
            for (std::size_t i = 0; i < od->grad.size(); ++i) {
                if (allow[i]) acc(xd->grad[i], od->grad[i]);
            }
        },
        rec);
}

Tensor flatten_channels(const Tensor& x) {
    if (x.ndim() != 3) {
        throw DimensionError("flatten_channels: expected [C,T,F], got " + shape_str(x.shape()));
    }
    const int C = x.extent(0), T = x.extent(1), F = x.extent(2);
    std::vector<double> ov(x.size());
    const auto xv = x.values();
    for (int c = 0; c < C; ++c) {
        for (int t = 0; t < T; ++t) {
            const double* src = xv.data() + (static_cast<std::int64_t>(c) * T + t) * F;
            double* dst = ov.data() + (static_cast<std::int64_t>(t) * C + c) * F;
            std::copy_n(src, F, dst);
        }
    }
    Tensor out = Tensor::from({T, C * F}, std::move(ov));
    const bool rec = recording_for({&x});
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, od, C, T, F] {
            ensure_grad(*xd);
            for (int c = 0; c < C; ++c) {
                for (int t = 0; t < T; ++t) {
                    const double* src = od->grad.data() + (static_cast<std::int64_t>(t) * C + c) * F;
                    double* dst = xd->grad.data() + (static_cast<std::int64_t>(c) * T + t) * F;
                    for (int f = 0; f < F; ++f) acc(dst[f], src[f]);
                }
            }
        },
        rec);
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

Tensor conv2d_same(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 3 || w.ndim() != 4 || b.ndim() != 1) {
        throw DimensionError("conv2d: expected x [C,T,F], w [Co,Ci,kt,kf], b [Co]; got " +
                             shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                             shape_str(b.shape()));
    }
    const int Ci = x.extent(0), T = x.extent(1), F = x.extent(2);
    const int Co = w.extent(0), kt = w.extent(2), kf = w.extent(3);
    if (w.extent(1) != Ci || b.extent(0) != Co) {
        throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    }
    if (kt % 2 == 0 || kf % 2 == 0) {
        throw ConfigError("conv2d: same-padding requires odd kernels, got " +
                          std::to_string(kt) + "x" + std::to_string(kf));
    }
    if (T < kt || F < kf) {
        throw DimensionError("conv2d: input " + std::to_string(T) + "x" + std::to_string(F) +
                             " smaller than kernel " + std::to_string(kt) + "x" +
                             std::to_string(kf));
    }
    const int ct = kt / 2, cf = kf / 2;
    std::vector<double> ov(static_cast<std::size_t>(Co) * T * F);
    const auto xv = x.values();
    const auto wv = w.values();
    const auto bv = b.values();
    for (int co = 0; co < Co; ++co) {
        double* oplane = ov.data() + static_cast<std::int64_t>(co) * T * F;
        std::fill_n(oplane, static_cast<std::int64_t>(T) * F, bv[co]);
        for (int ci = 0; ci < Ci; ++ci) {
            const double* xplane = xv.data() + static_cast<std::int64_t>(ci) * T * F;
            for (int dt = 0; dt < kt; ++dt) {
                for (int df = 0; df < kf; ++df) {
                    const double wv1 =
                        wv[((static_cast<std::int64_t>(co) * Ci + ci) * kt + dt) * kf + df];
                    if (wv1 == 0.0) continue;
                    const int t0 = std::max(0, ct - dt), t1 = std::min(T, T + ct - dt);
                    const int f0 = std::max(0, cf - df), f1 = std::min(F, F + cf - df);
                    for (int t = t0; t < t1; ++t) {
                        const double* xrow = xplane + static_cast<std::int64_t>(t + dt - ct) * F;
                        double* orow = oplane + static_cast<std::int64_t>(t) * F;
                        for (int f = f0; f < f1; ++f) orow[f] += wv1 * xrow[f + df - cf];
                    }
                }
            }
        }
    }
    Tensor out = Tensor::from({Co, T, F}, std::move(ov));
    const bool rec = recording_for({&x, &w, &b});
    auto xd = x.data_ptr(), wd = w.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, wd, bd, od, Ci, Co, T, F, kt, kf, ct, cf] {
            const auto& go = od->grad;
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (int co = 0; co < Co; ++co) {
                    double s = 0.0;
                    const double* gplane = go.data() + static_cast<std::int64_t>(co) * T * F;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(T) * F; ++i)
                        s += gplane[i];
                    acc(bd->grad[co], s);
                }
            }
            if (wd->requires_grad) {
                ensure_grad(*wd);
                for (int co = 0; co < Co; ++co) {
                    const double* gplane = go.data() + static_cast<std::int64_t>(co) * T * F;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const double* xplane =
                            xd->values.data() + static_cast<std::int64_t>(ci) * T * F;
                        for (int dt = 0; dt < kt; ++dt) {
                            for (int df = 0; df < kf; ++df) {
                                const int t0 = std::max(0, ct - dt), t1 = std::min(T, T + ct - dt);
                                const int f0 = std::max(0, cf - df), f1 = std::min(F, F + cf - df);
                                double s = 0.0;
                                for (int t = t0; t < t1; ++t) {
                                    const double* xrow =
                                        xplane + static_cast<std::int64_t>(t + dt - ct) * F;
                                    const double* grow = gplane + static_cast<std::int64_t>(t) * F;
                                    for (int f = f0; f < f1; ++f) s += grow[f] * xrow[f + df - cf];
                                }
                                acc(wd->grad[((static_cast<std::int64_t>(co) * Ci + ci) * kt + dt) *
                                                 kf +
                                             df],
                                    s);
                            }
                        }
                    }
                }
            }
            if (xd->requires_grad) {
                ensure_grad(*xd);
                for (int co = 0; co < Co; ++co) {
                    const double* gplane = go.data() + static_cast<std::int64_t>(co) * T * F;
                    for (int ci = 0; ci < Ci; ++ci) {
                        double* dxplane = xd->grad.data() + static_cast<std::int64_t>(ci) * T * F;
                        for (int dt = 0; dt < kt; ++dt) {
                            for (int df = 0; df < kf; ++df) {
                                const double wv1 =
                                    wd->values[((static_cast<std::int64_t>(co) * Ci + ci) * kt +
                                                dt) *
                                                   kf +
                                               df];
                                if (wv1 == 0.0) continue;
                                const int t0 = std::max(0, ct - dt), t1 = std::min(T, T + ct - dt);
                                const int f0 = std::max(0, cf - df), f1 = std::min(F, F + cf - df);
                                for (int t = t0; t < t1; ++t) {
                                    const double* grow = gplane + static_cast<std::int64_t>(t) * F;
                                    double* dxrow =
                                        dxplane + static_cast<std::int64_t>(t + dt - ct) * F;
                                    for (int f = f0; f < f1; ++f)
                                        acc(dxrow[f + df - cf], wv1 * grow[f]);
                                }
                            }
                        }
                    }
                }
            }
        },
        rec);
}

Tensor maxpool2d(const Tensor& x, int p) {
    if (x.ndim() != 3) throw DimensionError("maxpool2d: expected [C,T,F], got " + shape_str(x.shape()));
    if (p < 1) throw ConfigError("maxpool2d: pool extent must be >= 1");
    const int C = x.extent(0), T = x.extent(1), F = x.extent(2);
    const int Tp = (T + p - 1) / p, Fp = (F + p - 1) / p;
    std::vector<double> ov(static_cast<std::size_t>(C) * Tp * Fp);
    std::vector<std::int64_t> argmax(ov.size());
    const auto xv = x.values();
    for (int c = 0; c < C; ++c) {
        for (int tp = 0; tp < Tp; ++tp) {
            for (int fp = 0; fp < Fp; ++fp) {
                double best = kNegInf;
                std::int64_t best_idx = -1;
                for (int t = tp * p; t < std::min(T, (tp + 1) * p); ++t) {
                    for (int f = fp * p; f < std::min(F, (fp + 1) * p); ++f) {
                        const std::int64_t idx = (static_cast<std::int64_t>(c) * T + t) * F + f;
                        if (xv[idx] > best) {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                }
                const std::int64_t oidx = (static_cast<std::int64_t>(c) * Tp + tp) * Fp + fp;
                ov[oidx] = best;
                argmax[oidx] = best_idx;
            }
        }
    }
    Tensor out = Tensor::from({C, Tp, Fp}, std::move(ov));
    const bool rec = recording_for({&x});
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, od, argmax] {
            ensure_grad(*xd);
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                acc(xd->grad[static_cast<std::size_t>(argmax[i])], od->grad[i]);
        },
        rec);
}

Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 3 || b.ndim() != 1) {
        throw DimensionError("conv1d: expected x [T,Di], w [Do,Di,k], b [Do]; got " +
                             shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                             shape_str(b.shape()));
    }
    const int T = x.extent(0), Di = x.extent(1);
    const int Do = w.extent(0), k = w.extent(2);
    if (w.extent(1) != Di || b.extent(0) != Do) {
        throw DimensionError("conv1d: width mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    }
    // Tap j == k-1 reads the current step; earlier taps read history.
    std::vector<double> ov(static_cast<std::size_t>(T) * Do);
    const auto xv = x.values();
    const auto wv = w.values();
    const auto bv = b.values();
    for (int t = 0; t < T; ++t) {
        double* orow = ov.data() + static_cast<std::int64_t>(t) * Do;
        for (int d = 0; d < Do; ++d) orow[d] = bv[d];
        for (int j = 0; j < k; ++j) {
            const int ti = t - (k - 1) + j;
            if (ti < 0) continue;
            const double* xrow = xv.data() + static_cast<std::int64_t>(ti) * Di;
            for (int d = 0; d < Do; ++d) {
                const double* wrow = wv.data() + (static_cast<std::int64_t>(d) * Di) * k;
                double s = 0.0;
                for (int di = 0; di < Di; ++di) s += xrow[di] * wrow[di * k + j];
                orow[d] += s;
            }
        }
    }
    Tensor out = Tensor::from({T, Do}, std::move(ov));
    const bool rec = recording_for({&x, &w, &b});
    auto xd = x.data_ptr(), wd = w.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, wd, bd, od, T, Di, Do, k] {
            const auto& go = od->grad;
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (int d = 0; d < Do; ++d) {
                    double s = 0.0;
                    for (int t = 0; t < T; ++t) s += go[static_cast<std::int64_t>(t) * Do + d];
                    acc(bd->grad[d], s);
                }
            }
            if (wd->requires_grad) {
                ensure_grad(*wd);
                for (int d = 0; d < Do; ++d) {
                    for (int di = 0; di < Di; ++di) {
                        for (int j = 0; j < k; ++j) {
                            double s = 0.0;
                            for (int t = 0; t < T; ++t) {
                                const int ti = t - (k - 1) + j;
                                if (ti < 0) continue;
                                s += go[static_cast<std::int64_t>(t) * Do + d] *
                                     xd->values[static_cast<std::int64_t>(ti) * Di + di];
                            }
                            acc(wd->grad[(static_cast<std::int64_t>(d) * Di + di) * k + j], s);
                        }
                    }
                }
            }
            if (xd->requires_grad) {
                ensure_grad(*xd);
                for (int t = 0; t < T; ++t) {
                    const double* grow = go.data() + static_cast<std::int64_t>(t) * Do;
                    for (int j = 0; j < k; ++j) {
                        const int ti = t - (k - 1) + j;
                        if (ti < 0) continue;
                        double* dxrow = xd->grad.data() + static_cast<std::int64_t>(ti) * Di;
                        for (int d = 0; d < Do; ++d) {
                            const double* wrow =
                                wd->values.data() + (static_cast<std::int64_t>(d) * Di) * k;
                            const double g = grow[d];
                            for (int di = 0; di < Di; ++di) acc(dxrow[di], g * wrow[di * k + j]);
                        }
                    }
                }
            }
        },
        rec);
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

namespace {

// Shared normalization core over strided lines.
struct NormLine {
    std::int64_t base;
    std::int64_t stride;
};

void layer_norm_impl(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                     const std::vector<NormLine>& lines, int D, Tensor& out_holder,
                     bool channels_layout) {
    std::vector<double> ov(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> istd_all(lines.size());
    const auto xv = x.values();
    const auto gv = gain.values();
    const auto bv = bias.values();
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const auto [base, stride] = lines[li];
        double mean = 0.0;
        for (int i = 0; i < D; ++i) mean += xv[base + i * stride];
        mean /= D;
        double var = 0.0;
        for (int i = 0; i < D; ++i) {
            const double d = xv[base + i * stride] - mean;
            var += d * d;
        }
        var /= D;
        const double istd = 1.0 / std::sqrt(var + eps);
        istd_all[li] = istd;
        for (int i = 0; i < D; ++i) {
            const std::int64_t k = base + i * stride;
            const double h = (xv[k] - mean) * istd;
            xhat[k] = h;
            ov[k] = gv[i] * h + bv[i];
        }
    }
    Tensor out = Tensor::from(x.shape(), std::move(ov));
    const bool rec = recording_for({&x, &gain, &bias});
    auto xd = x.data_ptr(), gd = gain.data_ptr(), bd = bias.data_ptr(), od = out.data_ptr();
    out_holder = finish_op(
        std::move(out),
        [xd, gd, bd, od, lines, D, xhat = std::move(xhat), istd_all = std::move(istd_all)] {
            const auto& go = od->grad;
            if (gd->requires_grad) ensure_grad(*gd);
            if (bd->requires_grad) ensure_grad(*bd);
            if (xd->requires_grad) ensure_grad(*xd);
            for (std::size_t li = 0; li < lines.size(); ++li) {
                const auto [base, stride] = lines[li];
                if (gd->requires_grad || bd->requires_grad) {
                    for (int i = 0; i < D; ++i) {
                        const std::int64_t k = base + i * stride;
                        if (gd->requires_grad) acc(gd->grad[i], go[k] * xhat[k]);
                        if (bd->requires_grad) acc(bd->grad[i], go[k]);
                    }
                }
                if (xd->requires_grad) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (int i = 0; i < D; ++i) {
                        const std::int64_t k = base + i * stride;
                        const double dh = go[k] * gd->values[i];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[k];
                    }
                    mean_dh /= D;
                    mean_dh_h /= D;
                    const double istd = istd_all[li];
                    for (int i = 0; i < D; ++i) {
                        const std::int64_t k = base + i * stride;
                        const double dh = go[k] * gd->values[i];
                        acc(xd->grad[k], istd * (dh - mean_dh - xhat[k] * mean_dh_h));
                    }
                }
            }
        },
        rec);
    (void)channels_layout;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.ndim() < 1) throw DimensionError("layer_norm: rank-0 input");
    const int D = x.extent(-1);
    if (gain.ndim() != 1 || gain.extent(0) != D || bias.ndim() != 1 || bias.extent(0) != D) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                             shape_str(bias.shape()) + " vs feature width " + std::to_string(D));
    }
    const std::int64_t rows = x.size() / D;
    std::vector<NormLine> lines;
    lines.reserve(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) lines.push_back({r * D, 1});
    Tensor out;
    layer_norm_impl(x, gain, bias, eps, lines, D, out, false);
    return out;
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gain, const Tensor& bias,
                           double eps) {
    if (x.ndim() != 3) {
        throw DimensionError("layer_norm_channels: expected [C,T,F], got " + shape_str(x.shape()));
    }
    const int C = x.extent(0), T = x.extent(1), F = x.extent(2);
    if (gain.ndim() != 1 || gain.extent(0) != C || bias.ndim() != 1 || bias.extent(0) != C) {
        throw DimensionError("layer_norm_channels: gain/bias vs channel count " +
                             std::to_string(C));
    }
    const std::int64_t plane = static_cast<std::int64_t>(T) * F;
    std::vector<NormLine> lines;
    lines.reserve(static_cast<std::size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) lines.push_back({i, plane});
    Tensor out;
    layer_norm_impl(x, gain, bias, eps, lines, C, out, true);
    return out;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate " + std::to_string(rate) + " outside [0, 1)");
    }
    if (rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> factor(x.size());
    std::vector<double> ov(x.size());
    const auto xv = x.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const bool keep = rng.uniform() >= rate;
        factor[i] = keep ? keep_scale : 0.0;
        ov[i] = xv[i] * factor[i];
    }
    Tensor out = Tensor::from(x.shape(), std::move(ov));
    const bool rec = recording_for({&x});
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    return finish_op(
        std::move(out),
        [xd, od, factor = std::move(factor)] {
            ensure_grad(*xd);
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                acc(xd->grad[i], od->grad[i] * factor[i]);
        },
        rec);
}

}  // namespace convctx
