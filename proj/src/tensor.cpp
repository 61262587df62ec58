#include "lindistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace lindistill {

namespace {

thread_local AllocStats t_alloc_stats;
thread_local Graph* t_current_graph = nullptr;

constexpr double kGeluCoeff = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

} // namespace

namespace detail {

void matmul_kernel(const double* a, const double* b, double* out, int m, int k, int n) {
    std::fill(out, out + static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* orow = out + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// da(m*k) += dy(m*n) * b(k*n)^T
void matmul_acc_nt(const double* dy, const double* b, double* da, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* dyrow = dy + static_cast<std::size_t>(i) * n;
        double* darow = da + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double* brow = b + static_cast<std::size_t>(kk) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += dyrow[j] * brow[j];
            darow[kk] += s;
        }
    }
}

// db(k*n) += a(m*k)^T * dy(m*n)
void matmul_acc_tn(const double* a, const double* dy, double* db, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        const double* dyrow = dy + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            double* dbrow = db + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * dyrow[j];
        }
    }
}

} // namespace detail

namespace {

using detail::matmul_kernel;
using detail::matmul_acc_nt;
using detail::matmul_acc_tn;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

Tensor make_raw(std::vector<int> shape) { return detail::make_tensor(std::move(shape)); }

void check_finite(const Tensor& t, OpKind kind) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite value produced by op '") + op_name(kind) +
                                 "'");
        }
    }
}

bool recording_for(std::initializer_list<const Tensor*> inputs) {
    if (t_current_graph == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void record_op(OpKind kind, std::vector<ImplPtr> inputs, Tensor& out, std::function<void()> back) {
    out.set_requires_grad(true);
    Graph::OpRecord rec;
    rec.kind = kind;
    rec.inputs = std::move(inputs);
    rec.output = out.impl();
    rec.backprop = std::move(back);
    t_current_graph->record(std::move(rec));
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.shape().size() != 2) {
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                         shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Column vector argument for the *_rows ops: numel must equal the row count.
void require_rowvec(const Tensor& a, const Tensor& r, const char* op) {
    require_rank2(a, op);
    if (r.numel() != static_cast<std::size_t>(a.rows())) {
        throw ShapeError(std::string(op) + ": per-row operand " + shape_str(r.shape()) +
                         " does not match row count of " + shape_str(a.shape()));
    }
}

void require_colvec(const Tensor& a, const Tensor& v, const char* op) {
    require_rank2(a, op);
    if (v.numel() != static_cast<std::size_t>(a.cols())) {
        throw ShapeError(std::string(op) + ": per-column operand " + shape_str(v.shape()) +
                         " does not match column count of " + shape_str(a.shape()));
    }
}

enum class BinKind { Add, Sub, Mul, Div };

OpKind bin_opkind(BinKind k) {
    switch (k) {
        case BinKind::Add: return OpKind::kAdd;
        case BinKind::Sub: return OpKind::kSub;
        case BinKind::Mul: return OpKind::kMul;
        case BinKind::Div: return OpKind::kDiv;
    }
    return OpKind::kAdd;
}

// Shared elementwise binary with scalar-vs-tensor broadcast.
Tensor binary_op(BinKind bk, const Tensor& a, const Tensor& b) {
    const OpKind kind = bin_opkind(bk);
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
        throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                         " (only identical shapes or scalar-vs-tensor broadcast)");
    }
    const Tensor& big = b_scalar ? a : b;
    Tensor out = make_raw(big.shape());
    const std::size_t n = out.numel();
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double av = a_scalar ? ad[0] : ad[i];
        const double bv = b_scalar ? bd[0] : bd[i];
        switch (bk) {
            case BinKind::Add: od[i] = av + bv; break;
            case BinKind::Sub: od[i] = av - bv; break;
            case BinKind::Mul: od[i] = av * bv; break;
            case BinKind::Div: od[i] = av / bv; break;
        }
    }
    check_finite(out, kind);
    if (recording_for({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        record_op(kind, {ai, bi}, out, [bk, ai, bi, oi, a_scalar, b_scalar, n]() {
            const double* dy = oi->grad.data();
            const double* ad = ai->data.data();
            const double* bd = bi->data.data();
            if (ai->requires_grad) {
                double* da = ai->grad.data();
                for (std::size_t i = 0; i < n; ++i) {
                    const double bv = b_scalar ? bd[0] : bd[i];
                    double g = 0.0;
                    switch (bk) {
                        case BinKind::Add: g = dy[i]; break;
                        case BinKind::Sub: g = dy[i]; break;
                        case BinKind::Mul: g = dy[i] * bv; break;
                        case BinKind::Div: g = dy[i] / bv; break;
                    }
                    da[a_scalar ? 0 : i] += g;
                }
            }
            if (bi->requires_grad) {
                double* db = bi->grad.data();
                for (std::size_t i = 0; i < n; ++i) {
                    const double av = a_scalar ? ad[0] : ad[i];
                    const double bv = b_scalar ? bd[0] : bd[i];
                    double g = 0.0;
                    switch (bk) {
                        case BinKind::Add: g = dy[i]; break;
                        case BinKind::Sub: g = -dy[i]; break;
                        case BinKind::Mul: g = dy[i] * av; break;
                        case BinKind::Div: g = -dy[i] * av / (bv * bv); break;
                    }
                    db[b_scalar ? 0 : i] += g;
                }
            }
        });
    }
    return out;
}

// Shared elementwise unary: f(value), df(value, out_value).
template <typename F, typename DF>
Tensor unary_op(OpKind kind, const Tensor& a, F f, DF df) {
    Tensor out = make_raw(a.shape());
    const std::size_t n = a.numel();
    const double* ad = a.data().data();
    double* od = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) od[i] = f(ad[i]);
    check_finite(out, kind);
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(kind, {ai}, out, [ai, oi, df, n]() {
            if (!ai->requires_grad) return;
            const double* dy = oi->grad.data();
            const double* ad = ai->data.data();
            const double* od = oi->data.data();
            double* da = ai->grad.data();
            for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * df(ad[i], od[i]);
        });
    }
    return out;
}

} // namespace

namespace detail {

Tensor make_tensor(std::vector<int> shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data = TrackedVec(shape_numel(shape));
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Accounting

AllocStats& alloc_stats() { return t_alloc_stats; }

void reset_peak_bytes() { t_alloc_stats.peak_bytes = t_alloc_stats.live_bytes; }

namespace detail {

void track_alloc(std::size_t bytes) {
    t_alloc_stats.live_bytes += bytes;
    if (t_alloc_stats.live_bytes > t_alloc_stats.peak_bytes) {
        t_alloc_stats.peak_bytes = t_alloc_stats.live_bytes;
    }
}

void track_free(std::size_t bytes) { t_alloc_stats.live_bytes -= bytes; }

} // namespace detail

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::kMatmul: return "matmul";
        case OpKind::kTranspose: return "transpose";
        case OpKind::kAdd: return "add";
        case OpKind::kSub: return "sub";
        case OpKind::kMul: return "mul";
        case OpKind::kDiv: return "div";
        case OpKind::kScale: return "scale";
        case OpKind::kExp: return "exp";
        case OpKind::kSqrt: return "sqrt";
        case OpKind::kSoftplus: return "softplus";
        case OpKind::kGelu: return "gelu";
        case OpKind::kSoftmaxRows: return "softmax_rows";
        case OpKind::kSum: return "sum";
        case OpKind::kMean: return "mean";
        case OpKind::kRowSums: return "row_sums";
        case OpKind::kMulRows: return "mul_rows";
        case OpKind::kDivRows: return "div_rows";
        case OpKind::kSubRows: return "sub_rows";
        case OpKind::kMulCols: return "mul_cols";
        case OpKind::kAddCols: return "add_cols";
        case OpKind::kSelectRows: return "select_rows";
        case OpKind::kConcatRows: return "concat_rows";
        case OpKind::kReshape: return "reshape";
        case OpKind::kSubstituteRows: return "substitute_rows";
        case OpKind::kSmoothL1: return "smooth_l1";
        case OpKind::kMamba2Scan: return "mamba2_scan";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t = make_raw(std::move(shape));
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = make_raw(std::move(shape));
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    Tensor t = make_raw(std::move(shape));
    if (values.size() != t.numel()) {
        throw ShapeError("from_data: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(t.shape()));
    }
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = make_raw(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
    t.impl_->requires_grad = requires_grad;
    return t;
}

int Tensor::rows() const {
    return impl_->shape.empty() ? 1 : impl_->shape[0];
}

int Tensor::cols() const {
    if (impl_->shape.size() >= 3) throw ShapeError("cols: tensor has rank > 2");
    return impl_->shape.size() == 2 ? impl_->shape[1] : 1;
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) return {};
    return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
    if (has_grad()) std::fill(impl_->grad.data(), impl_->grad.data() + impl_->grad.size(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
}

double Tensor::at(int i, int j) const {
    require_rank2(*this, "at");
    return impl_->data[static_cast<std::size_t>(i) * cols() + j];
}

Tensor Tensor::detached() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Graph

Graph::RecordScope::RecordScope(Graph& g) : prev_(t_current_graph) { t_current_graph = &g; }

Graph::RecordScope::~RecordScope() { t_current_graph = prev_; }

Graph* Graph::current() { return t_current_graph; }

void Graph::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward: loss must be a defined scalar tensor");
    }
    detail::TensorImpl* root = loss.impl().get();
    std::unordered_set<detail::TensorImpl*> needed;
    needed.insert(root);
    std::vector<char> active(records_.size(), 0);
    for (std::size_t i = records_.size(); i-- > 0;) {
        OpRecord& rec = records_[i];
        if (needed.count(rec.output.get()) == 0) continue;
        active[i] = 1;
        for (const auto& in : rec.inputs) {
            if (in->requires_grad) needed.insert(in.get());
        }
    }
    // Interior grads are per-sweep; leaf grads persist and accumulate.
    for (std::size_t i = 0; i < records_.size(); ++i) {
        if (!active[i]) continue;
        auto& out = records_[i].output;
        out->ensure_grad();
        std::fill(out->grad.data(), out->grad.data() + out->grad.size(), 0.0);
    }
    for (detail::TensorImpl* t : needed) t->ensure_grad();
    root->grad[0] += 1.0;
    for (std::size_t i = records_.size(); i-- > 0;) {
        if (active[i]) records_[i].backprop();
    }
}

void backward(const Tensor& loss) {
    Graph* g = Graph::current();
    if (g == nullptr) {
        throw std::logic_error("backward: no recording graph is active");
    }
    g->backward(loss);
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = make_raw({m, n});
    matmul_kernel(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    check_finite(out, OpKind::kMatmul);
    if (recording_for({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        record_op(OpKind::kMatmul, {ai, bi}, out, [ai, bi, oi, m, k, n]() {
            const double* dy = oi->grad.data();
            if (ai->requires_grad) matmul_acc_nt(dy, bi->data.data(), ai->grad.data(), m, n, k);
            if (bi->requires_grad) matmul_acc_tn(ai->data.data(), dy, bi->grad.data(), m, k, n);
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const int m = a.rows(), n = a.cols();
    Tensor out = make_raw({n, m});
    const double* ad = a.data().data();
    double* od = out.mutable_data().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) od[static_cast<std::size_t>(j) * m + i] = ad[static_cast<std::size_t>(i) * n + j];
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kTranspose, {ai}, out, [ai, oi, m, n]() {
            if (!ai->requires_grad) return;
            const double* dy = oi->grad.data();
            double* da = ai->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    da[static_cast<std::size_t>(i) * n + j] += dy[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Div, a, b); }

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        OpKind::kScale, a, [c](double x) { return x * c; },
        [c](double, double) { return c; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        OpKind::kExp, a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        OpKind::kSqrt, a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

double softplus_scalar(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double gelu_scalar(double x) {
    const double u = kGeluCoeff * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        OpKind::kSoftplus, a, [](double x) { return softplus_scalar(x); },
        [](double x, double) {
            // sigmoid(x), evaluated on the stable branch
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
}

Tensor gelu(const Tensor& a) {
    return unary_op(
        OpKind::kGelu, a, [](double x) { return gelu_scalar(x); },
        [](double x, double) {
            const double u = kGeluCoeff * (x + kGeluCubic * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluCoeff * (1.0 + 3.0 * kGeluCubic * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

Tensor softmax_rows(const Tensor& a) {
    require_rank2(a, "softmax_rows");
    const int m = a.rows(), n = a.cols();
    Tensor out = make_raw({m, n});
    const double* ad = a.data().data();
    double* od = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
        const double* arow = ad + static_cast<std::size_t>(i) * n;
        double* orow = od + static_cast<std::size_t>(i) * n;
        double mx = arow[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, arow[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(arow[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
    }
    check_finite(out, OpKind::kSoftmaxRows);
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kSoftmaxRows, {ai}, out, [ai, oi, m, n]() {
            if (!ai->requires_grad) return;
            const double* dy = oi->grad.data();
            const double* y = oi->data.data();
            double* da = ai->grad.data();
            for (int i = 0; i < m; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += dy[off + j] * y[off + j];
                for (int j = 0; j < n; ++j) da[off + j] += y[off + j] * (dy[off + j] - dot);
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    check_finite(out, OpKind::kSum);
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kSum, {ai}, out, [ai, oi]() {
            if (!ai->requires_grad) return;
            const double g = oi->grad[0];
            double* da = ai->grad.data();
            for (std::size_t i = 0; i < ai->numel(); ++i) da[i] += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(s * inv);
    check_finite(out, OpKind::kMean);
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kMean, {ai}, out, [ai, oi, inv]() {
            if (!ai->requires_grad) return;
            const double g = oi->grad[0] * inv;
            double* da = ai->grad.data();
            for (std::size_t i = 0; i < ai->numel(); ++i) da[i] += g;
        });
    }
    return out;
}

Tensor row_sums(const Tensor& a) {
    require_rank2(a, "row_sums");
    const int m = a.rows(), n = a.cols();
    Tensor out = make_raw({m, 1});
    const double* ad = a.data().data();
    double* od = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        const double* arow = ad + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) s += arow[j];
        od[i] = s;
    }
    check_finite(out, OpKind::kRowSums);
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kRowSums, {ai}, out, [ai, oi, m, n]() {
            if (!ai->requires_grad) return;
            const double* dy = oi->grad.data();
            double* da = ai->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) da[static_cast<std::size_t>(i) * n + j] += dy[i];
        });
    }
    return out;
}

namespace {

enum class RowKind { Mul, Div, Sub };

Tensor rowwise_op(RowKind rk, const Tensor& a, const Tensor& r) {
    const OpKind kind = rk == RowKind::Mul   ? OpKind::kMulRows
                        : rk == RowKind::Div ? OpKind::kDivRows
                                             : OpKind::kSubRows;
    require_rowvec(a, r, op_name(kind));
    const int m = a.rows(), n = a.cols();
    Tensor out = make_raw(a.shape());
    const double* ad = a.data().data();
    const double* rd = r.data().data();
    double* od = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
        const double rv = rd[i];
        const std::size_t off = static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            switch (rk) {
                case RowKind::Mul: od[off + j] = ad[off + j] * rv; break;
                case RowKind::Div: od[off + j] = ad[off + j] / rv; break;
                case RowKind::Sub: od[off + j] = ad[off + j] - rv; break;
            }
        }
    }
    check_finite(out, kind);
    if (recording_for({&a, &r})) {
        auto ai = a.impl();
        auto ri = r.impl();
        auto oi = out.impl();
        record_op(kind, {ai, ri}, out, [rk, ai, ri, oi, m, n]() {
            const double* dy = oi->grad.data();
            const double* ad = ai->data.data();
            const double* rd = ri->data.data();
            if (ai->requires_grad) {
                double* da = ai->grad.data();
                for (int i = 0; i < m; ++i) {
                    const double rv = rd[i];
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        switch (rk) {
                            case RowKind::Mul: da[off + j] += dy[off + j] * rv; break;
                            case RowKind::Div: da[off + j] += dy[off + j] / rv; break;
                            case RowKind::Sub: da[off + j] += dy[off + j]; break;
                        }
                    }
                }
            }
            if (ri->requires_grad) {
                double* dr = ri->grad.data();
                for (int i = 0; i < m; ++i) {
                    const double rv = rd[i];
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) {
                        switch (rk) {
                            case RowKind::Mul: s += dy[off + j] * ad[off + j]; break;
                            case RowKind::Div: s += -dy[off + j] * ad[off + j] / (rv * rv); break;
                            case RowKind::Sub: s += -dy[off + j]; break;
                        }
                    }
                    dr[i] += s;
                }
            }
        });
    }
    return out;
}

} // namespace

Tensor mul_rows(const Tensor& a, const Tensor& r) { return rowwise_op(RowKind::Mul, a, r); }
Tensor div_rows(const Tensor& a, const Tensor& r) { return rowwise_op(RowKind::Div, a, r); }
Tensor sub_rows(const Tensor& a, const Tensor& r) { return rowwise_op(RowKind::Sub, a, r); }

namespace {

Tensor colwise_op(bool is_mul, const Tensor& a, const Tensor& v) {
    const OpKind kind = is_mul ? OpKind::kMulCols : OpKind::kAddCols;
    require_colvec(a, v, op_name(kind));
    const int m = a.rows(), n = a.cols();
    Tensor out = make_raw(a.shape());
    const double* ad = a.data().data();
    const double* vd = v.data().data();
    double* od = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            od[off + j] = is_mul ? ad[off + j] * vd[j] : ad[off + j] + vd[j];
        }
    }
    check_finite(out, kind);
    if (recording_for({&a, &v})) {
        auto ai = a.impl();
        auto vi = v.impl();
        auto oi = out.impl();
        record_op(kind, {ai, vi}, out, [is_mul, ai, vi, oi, m, n]() {
            const double* dy = oi->grad.data();
            const double* ad = ai->data.data();
            const double* vd = vi->data.data();
            if (ai->requires_grad) {
                double* da = ai->grad.data();
                for (int i = 0; i < m; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        da[off + j] += is_mul ? dy[off + j] * vd[j] : dy[off + j];
                    }
                }
            }
            if (vi->requires_grad) {
                double* dv = vi->grad.data();
                for (int i = 0; i < m; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        dv[j] += is_mul ? dy[off + j] * ad[off + j] : dy[off + j];
                    }
                }
            }
        });
    }
    return out;
}

} // namespace

Tensor mul_cols(const Tensor& a, const Tensor& v) { return colwise_op(true, a, v); }
Tensor add_cols(const Tensor& a, const Tensor& v) { return colwise_op(false, a, v); }

Tensor select_rows(const Tensor& a, const std::vector<int>& indices) {
    require_rank2(a, "select_rows");
    if (indices.empty()) throw ShapeError("select_rows: empty index set");
    const int m = a.rows(), n = a.cols();
    for (int idx : indices) {
        if (idx < 0 || idx >= m) {
            throw ShapeError("select_rows: index " + std::to_string(idx) + " out of range for " +
                             shape_str(a.shape()));
        }
    }
    Tensor out = make_raw({static_cast<int>(indices.size()), n});
    const double* ad = a.data().data();
    double* od = out.mutable_data().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = ad + static_cast<std::size_t>(indices[i]) * n;
        std::copy(src, src + n, od + i * n);
    }
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kSelectRows, {ai}, out, [ai, oi, indices, n]() {
            if (!ai->requires_grad) return;
            const double* dy = oi->grad.data();
            double* da = ai->grad.data();
            for (std::size_t i = 0; i < indices.size(); ++i) {
                double* drow = da + static_cast<std::size_t>(indices[i]) * n;
                const double* dyrow = dy + i * n;
                for (int j = 0; j < n; ++j) drow[j] += dyrow[j];
            }
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int n = parts[0].cols();
    int total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != n) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        }
        total += p.rows();
    }
    Tensor out = make_raw({total, n});
    double* od = out.mutable_data().data();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), od + off);
        off += p.numel();
    }
    bool any_grad = false;
    for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
    if (Graph::current() != nullptr && any_grad) {
        std::vector<ImplPtr> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        record_op(OpKind::kConcatRows, impls, out, [impls, oi]() {
            const double* dy = oi->grad.data();
            std::size_t off = 0;
            for (const auto& pi : impls) {
                if (pi->requires_grad) {
                    double* dp = pi->grad.data();
                    for (std::size_t i = 0; i < pi->numel(); ++i) dp[i] += dy[off + i];
                }
                off += pi->numel();
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor out = make_raw(std::move(shape));
    std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
    if (recording_for({&a})) {
        auto ai = a.impl();
        auto oi = out.impl();
        record_op(OpKind::kReshape, {ai}, out, [ai, oi]() {
            if (!ai->requires_grad) return;
            const double* dy = oi->grad.data();
            double* da = ai->grad.data();
            for (std::size_t i = 0; i < ai->numel(); ++i) da[i] += dy[i];
        });
    }
    return out;
}

Tensor substitute_rows(const Tensor& a, const std::vector<int>& indices, const Tensor& row) {
    require_rank2(a, "substitute_rows");
    const int m = a.rows(), n = a.cols();
    if (row.numel() != static_cast<std::size_t>(n)) {
        throw ShapeError("substitute_rows: row " + shape_str(row.shape()) +
                         " does not match columns of " + shape_str(a.shape()));
    }
    std::vector<char> replaced(static_cast<std::size_t>(m), 0);
    for (int idx : indices) {
        if (idx < 0 || idx >= m) {
            throw ShapeError("substitute_rows: index " + std::to_string(idx) +
                             " out of range for " + shape_str(a.shape()));
        }
        replaced[static_cast<std::size_t>(idx)] = 1;
    }
    Tensor out = make_raw(a.shape());
    const double* ad = a.data().data();
    const double* rd = row.data().data();
    double* od = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        const double* src = replaced[static_cast<std::size_t>(i)] ? rd : ad + off;
        std::copy(src, src + n, od + off);
    }
    if (recording_for({&a, &row})) {
        auto ai = a.impl();
        auto ri = row.impl();
        auto oi = out.impl();
        record_op(OpKind::kSubstituteRows, {ai, ri}, out, [ai, ri, oi, replaced, m, n]() {
            const double* dy = oi->grad.data();
            if (ai->requires_grad) {
                double* da = ai->grad.data();
                for (int i = 0; i < m; ++i) {
                    if (replaced[static_cast<std::size_t>(i)]) continue;
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) da[off + j] += dy[off + j];
                }
            }
            if (ri->requires_grad) {
                double* dr = ri->grad.data();
                for (int i = 0; i < m; ++i) {
                    if (!replaced[static_cast<std::size_t>(i)]) continue;
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) dr[j] += dy[off + j];
                }
            }
        });
    }
    return out;
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta) {
    require_same_shape(a, b, "smooth_l1");
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
    Tensor out = make_raw(a.shape());
    const std::size_t cnt = a.numel();
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.mutable_data().data();
    for (std::size_t i = 0; i < cnt; ++i) {
        const double e = ad[i] - bd[i];
        const double ae = std::abs(e);
        od[i] = ae < beta ? 0.5 * e * e / beta : ae - 0.5 * beta;
    }
    check_finite(out, OpKind::kSmoothL1);
    if (recording_for({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        record_op(OpKind::kSmoothL1, {ai, bi}, out, [ai, bi, oi, beta, cnt]() {
            const double* dy = oi->grad.data();
            const double* ad = ai->data.data();
            const double* bd = bi->data.data();
            for (std::size_t i = 0; i < cnt; ++i) {
                const double e = ad[i] - bd[i];
                const double de = std::abs(e) < beta ? e / beta : (e > 0.0 ? 1.0 : -1.0);
                if (ai->requires_grad) ai->grad[i] += dy[i] * de;
                if (bi->requires_grad) bi->grad[i] -= dy[i] * de;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  const std::vector<Tensor>& params,
                                                  double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (Tensor p : params) {
        std::vector<double> g(p.numel(), 0.0);
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double fp = f();
            values[i] = saved - eps;
            const double fm = f();
            values[i] = saved;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

} // namespace lindistill
