#pragma once

// Dense 64-bit tensors with tape-based reverse-mode autodiff.
//
// Tensors are immutable after creation except for grad buffers and explicit
// leaf mutation through mutable_data() (parameter init, optimizer updates,
// finite-difference probes). Ops executed inside a Graph::RecordScope append
// tape nodes whenever an input requires grad; outside a scope they only
// compute values. Every op validates that its output is finite.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lindistill/rng.hpp"

namespace lindistill {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Allocation accounting. Thread-local so concurrent trials stay independent.
// Tracks bytes held by tensor buffers; bench uses live/peak to witness the
// O(L^2) vs O(d^2) working-set claim.

struct AllocStats {
    std::uint64_t live_bytes = 0;
    std::uint64_t peak_bytes = 0;
};

AllocStats& alloc_stats();
void reset_peak_bytes(); // peak := live

namespace detail {

void track_alloc(std::size_t bytes);
void track_free(std::size_t bytes);

// Row-major matmul kernels shared with composite ops that implement their
// own backward. acc variants accumulate into the destination.
void matmul_kernel(const double* a, const double* b, double* out, int m, int k, int n);
void matmul_acc_nt(const double* dy, const double* b, double* da, int m, int n, int k);
void matmul_acc_tn(const double* a, const double* dy, double* db, int m, int k, int n);

// Accounting-aware buffer of doubles. Allocates uninitialized storage.
class TrackedVec {
public:
    TrackedVec() = default;
    explicit TrackedVec(std::size_t n) : p_(n ? new double[n] : nullptr), n_(n) {
        track_alloc(n_ * sizeof(double));
    }
    TrackedVec(const TrackedVec& o) : TrackedVec(o.n_) {
        for (std::size_t i = 0; i < n_; ++i) p_[i] = o.p_[i];
    }
    TrackedVec(TrackedVec&& o) noexcept : p_(std::move(o.p_)), n_(o.n_) { o.n_ = 0; }
    TrackedVec& operator=(TrackedVec o) noexcept {
        std::swap(p_, o.p_);
        std::swap(n_, o.n_);
        return *this;
    }
    ~TrackedVec() { track_free(n_ * sizeof(double)); }

    static TrackedVec zeros(std::size_t n) {
        TrackedVec t(n);
        for (std::size_t i = 0; i < n; ++i) t.p_[i] = 0.0;
        return t;
    }

    std::size_t size() const { return n_; }
    bool empty() const { return n_ == 0; }
    double* data() { return p_.get(); }
    const double* data() const { return p_.get(); }
    double& operator[](std::size_t i) { return p_[i]; }
    double operator[](std::size_t i) const { return p_[i]; }

private:
    std::unique_ptr<double[]> p_;
    std::size_t n_ = 0;
};

struct TensorImpl {
    std::vector<int> shape;
    TrackedVec data;
    TrackedVec grad; // empty until ensure_grad()
    bool requires_grad = false;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad = TrackedVec::zeros(data.size());
    }
};

} // namespace detail

std::string shape_str(const std::vector<int>& shape);

class Tensor;

namespace detail {
// Internal factory: fresh tensor with uninitialized storage.
Tensor make_tensor(std::vector<int> shape);
} // namespace detail

// ---------------------------------------------------------------------------
// Tensor: shared handle to an immutable value (plus mutable grad buffer).

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->numel(); }
    int rows() const;
    int cols() const;

    std::span<const double> data() const { return {impl_->data.data(), impl_->data.size()}; }
    // Leaf mutation only (init, optimizer, finite-difference probes).
    std::span<double> mutable_data() { return {impl_->data.data(), impl_->data.size()}; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    std::span<const double> grad() const;
    void zero_grad();

    double item() const;
    double at(int i, int j) const; // rank-2 convenience

    // Same values, detached from any tape; result does not require grad.
    Tensor detached() const;
    // Deep copy of values (fresh buffer), preserving requires_grad.
    Tensor clone() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    friend Tensor detail::make_tensor(std::vector<int>);
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Graph: ordered tape of recorded primitive ops. One graph per training step
// (or per independent trial); recording is scoped and thread-local.

enum class OpKind : std::uint8_t {
    kMatmul,
    kTranspose,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kScale,
    kExp,
    kSqrt,
    kSoftplus,
    kGelu,
    kSoftmaxRows,
    kSum,
    kMean,
    kRowSums,
    kMulRows,
    kDivRows,
    kSubRows,
    kMulCols,
    kAddCols,
    kSelectRows,
    kConcatRows,
    kReshape,
    kSubstituteRows,
    kSmoothL1,
    kMamba2Scan, // composite with a hand-written backward
};

const char* op_name(OpKind kind);

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // RAII recording scope; nests by saving/restoring the thread-local current graph.
    class RecordScope {
    public:
        explicit RecordScope(Graph& g);
        ~RecordScope();
        RecordScope(const RecordScope&) = delete;
        RecordScope& operator=(const RecordScope&) = delete;

    private:
        Graph* prev_;
    };

    static Graph* current();

    std::size_t size() const { return records_.size(); }

    // Reverse-mode sweep from a scalar loss. Visits each contributing node
    // exactly once; leaf grads accumulate across repeated calls, interior
    // grads are per-call.
    void backward(const Tensor& loss);

    struct OpRecord {
        OpKind kind;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backprop; // reads output->grad, accumulates into inputs' grads
    };

    void record(OpRecord rec) { records_.push_back(std::move(rec)); }
    const std::vector<OpRecord>& records() const { return records_; }

private:
    std::vector<OpRecord> records_;
};

// backward via the active recording graph (must be in scope).
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Primitive ops. All differentiable; broadcasting only between identical
// shapes or scalar-vs-tensor.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_sums(const Tensor& a);                      // m*n -> m*1
Tensor mul_rows(const Tensor& a, const Tensor& r);     // scale row i by r[i]
Tensor div_rows(const Tensor& a, const Tensor& r);
Tensor sub_rows(const Tensor& a, const Tensor& r);
Tensor mul_cols(const Tensor& a, const Tensor& v);     // scale col j by v[j]
Tensor add_cols(const Tensor& a, const Tensor& v);
Tensor select_rows(const Tensor& a, const std::vector<int>& indices);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, std::vector<int> shape);
// Copy of `a` with rows[indices] replaced by `row` (1*n); grad flows to both.
Tensor substitute_rows(const Tensor& a, const std::vector<int>& indices, const Tensor& row);
// Elementwise Smooth-L1: 0.5*e^2/beta for |e| < beta, else |e| - 0.5*beta.
Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta);

double softplus_scalar(double x);
double gelu_scalar(double x);

// ---------------------------------------------------------------------------
// Central finite differences: the independent gradient oracle. Perturbs each
// parameter coordinate by +-eps around its current value and re-evaluates f.
std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  const std::vector<Tensor>& params,
                                                  double eps = 1e-5);

} // namespace lindistill
