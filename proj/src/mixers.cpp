#include "lindistill/mixers.hpp"

#include <cmath>

namespace lindistill {

namespace {

void require_dim(const Tensor& x, int d, const char* op) {
    if (x.shape().size() != 2 || x.cols() != d) {
        throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) +
                         " does not match params with d=" + std::to_string(d));
    }
}

bool taped(const Tensor& x, std::initializer_list<const Tensor*> params) {
    if (Graph::current() == nullptr) return false;
    if (x.requires_grad()) return true;
    for (const Tensor* p : params) {
        if (p->requires_grad()) return true;
    }
    return false;
}

// Activations the hand-written scan backward needs.
struct ScanSaved {
    int seq_len = 0;
    int dim = 0;
    detail::TrackedVec q, k, v;     // L*d projections
    detail::TrackedVec delta, gate; // per-token delta and decay
    detail::TrackedVec states;      // L stacked d*d hidden states
};

// Forward scan into a fresh output. When `saved` is given, projections and
// the per-token hidden states are kept for the backward sweep; otherwise the
// transient working set is one d*d state plus three d-vectors.
Tensor scan_forward(const Tensor& x, const Mamba2Params& p, ScanSaved* saved) {
    const int L = x.rows();
    const int d = x.cols();
    const double* xd = x.data().data();
    const double* wq = p.w_q.data().data();
    const double* wk = p.w_k.data().data();
    const double* wv = p.w_v.data().data();
    const double* wd = p.w_delta.data().data();
    const double alpha = p.alpha.item();
    const std::size_t dd = static_cast<std::size_t>(d) * d;

    Tensor y = detail::make_tensor({L, d});
    double* yd = y.mutable_data().data();

    detail::TrackedVec local_state;
    detail::TrackedVec local_q, local_k, local_v;
    if (saved != nullptr) {
        saved->seq_len = L;
        saved->dim = d;
        saved->q = detail::TrackedVec(static_cast<std::size_t>(L) * d);
        saved->k = detail::TrackedVec(static_cast<std::size_t>(L) * d);
        saved->v = detail::TrackedVec(static_cast<std::size_t>(L) * d);
        saved->delta = detail::TrackedVec(static_cast<std::size_t>(L));
        saved->gate = detail::TrackedVec(static_cast<std::size_t>(L));
        saved->states = detail::TrackedVec(static_cast<std::size_t>(L) * dd);
    } else {
        local_state = detail::TrackedVec::zeros(dd);
        local_q = detail::TrackedVec(static_cast<std::size_t>(d));
        local_k = detail::TrackedVec(static_cast<std::size_t>(d));
        local_v = detail::TrackedVec(static_cast<std::size_t>(d));
    }

    for (int t = 0; t < L; ++t) {
        const double* xrow = xd + static_cast<std::size_t>(t) * d;
        double* qt = saved ? saved->q.data() + static_cast<std::size_t>(t) * d : local_q.data();
        double* kt = saved ? saved->k.data() + static_cast<std::size_t>(t) * d : local_k.data();
        double* vt = saved ? saved->v.data() + static_cast<std::size_t>(t) * d : local_v.data();
        for (int j = 0; j < d; ++j) {
            qt[j] = 0.0;
            kt[j] = 0.0;
            vt[j] = 0.0;
        }
        double delta = 0.0;
        for (int kk = 0; kk < d; ++kk) {
            const double xv = xrow[kk];
            const double* wq_row = wq + static_cast<std::size_t>(kk) * d;
            const double* wk_row = wk + static_cast<std::size_t>(kk) * d;
            const double* wv_row = wv + static_cast<std::size_t>(kk) * d;
            for (int j = 0; j < d; ++j) {
                qt[j] += xv * wq_row[j];
                kt[j] += xv * wk_row[j];
                vt[j] += xv * wv_row[j];
            }
            delta += xv * wd[kk];
        }
        const double g = std::exp(-softplus_scalar(delta) * alpha);
        double* state = saved ? saved->states.data() + static_cast<std::size_t>(t) * dd
                              : local_state.data();
        const double* prev = t == 0 ? nullptr
                             : saved ? saved->states.data() + static_cast<std::size_t>(t - 1) * dd
                                     : local_state.data();
        for (int i = 0; i < d; ++i) {
            double* srow = state + static_cast<std::size_t>(i) * d;
            const double vi = vt[i];
            if (t == 0) {
                for (int j = 0; j < d; ++j) srow[j] = vi * kt[j];
            } else {
                const double* prow = prev + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) srow[j] = prow[j] * g + vi * kt[j];
            }
        }
        if (saved != nullptr) {
            saved->delta[static_cast<std::size_t>(t)] = delta;
            saved->gate[static_cast<std::size_t>(t)] = g;
        }
        double* yrow = yd + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            const double* srow = state + static_cast<std::size_t>(i) * d;
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += srow[j] * qt[j];
            yrow[i] = s;
        }
    }
    for (double v : y.data()) {
        if (!std::isfinite(v)) throw NonFiniteError("non-finite value produced by op 'mamba2_scan'");
    }
    return y;
}

// Reverse sweep through the recurrence (see mixers.hpp for the forward
// equations). Accumulates into dx/dwq/dwk/dwv/dwd/dalpha when non-null.
void scan_backward(const ScanSaved& s, const Tensor& x, const Mamba2Params& p, const double* dy,
                   double* dx, double* dwq, double* dwk, double* dwv, double* dwd,
                   double* dalpha) {
    const int L = s.seq_len;
    const int d = s.dim;
    const std::size_t dd = static_cast<std::size_t>(d) * d;
    const double alpha = p.alpha.item();

    std::vector<double> dstate(dd, 0.0);
    std::vector<double> dq(static_cast<std::size_t>(L) * d, 0.0);
    std::vector<double> dk(dq.size(), 0.0);
    std::vector<double> dv(dq.size(), 0.0);
    std::vector<double> ddelta(static_cast<std::size_t>(L), 0.0);
    double dalpha_acc = 0.0;

    for (int t = L - 1; t >= 0; --t) {
        const double* qt = s.q.data() + static_cast<std::size_t>(t) * d;
        const double* kt = s.k.data() + static_cast<std::size_t>(t) * d;
        const double* vt = s.v.data() + static_cast<std::size_t>(t) * d;
        const double* st = s.states.data() + static_cast<std::size_t>(t) * dd;
        const double* dyt = dy + static_cast<std::size_t>(t) * d;
        const double g = s.gate[static_cast<std::size_t>(t)];

        // y_t = S_t q_t
        double* dqt = dq.data() + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += st[static_cast<std::size_t>(i) * d + j] * dyt[i];
            dqt[j] += acc;
        }
        for (int i = 0; i < d; ++i) {
            double* drow = dstate.data() + static_cast<std::size_t>(i) * d;
            const double dyi = dyt[i];
            for (int j = 0; j < d; ++j) drow[j] += dyi * qt[j];
        }

        // S_t = g_t S_{t-1} + v_t k_t^T
        double* dkt = dk.data() + static_cast<std::size_t>(t) * d;
        double* dvt = dv.data() + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            const double* drow = dstate.data() + static_cast<std::size_t>(i) * d;
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                acc += drow[j] * kt[j];
                dkt[j] += drow[j] * vt[i];
            }
            dvt[i] += acc;
        }
        double dgate = 0.0;
        if (t > 0) {
            const double* prev = s.states.data() + static_cast<std::size_t>(t - 1) * dd;
            for (std::size_t i = 0; i < dd; ++i) dgate += dstate[i] * prev[i];
            for (std::size_t i = 0; i < dd; ++i) dstate[i] *= g;
        }

        // g_t = exp(-softplus(delta_t) * alpha)
        const double delta = s.delta[static_cast<std::size_t>(t)];
        const double sp = softplus_scalar(delta);
        const double dsp = dgate * g * -alpha;
        dalpha_acc += dgate * g * -sp;
        const double sigmoid = delta >= 0.0 ? 1.0 / (1.0 + std::exp(-delta))
                                            : std::exp(delta) / (1.0 + std::exp(delta));
        ddelta[static_cast<std::size_t>(t)] = dsp * sigmoid;
    }

    const int m = L;
    const double* xd = x.data().data();
    if (dx != nullptr) {
        detail::matmul_acc_nt(dq.data(), p.w_q.data().data(), dx, m, d, d);
        detail::matmul_acc_nt(dk.data(), p.w_k.data().data(), dx, m, d, d);
        detail::matmul_acc_nt(dv.data(), p.w_v.data().data(), dx, m, d, d);
        detail::matmul_acc_nt(ddelta.data(), p.w_delta.data().data(), dx, m, 1, d);
    }
    if (dwq != nullptr) detail::matmul_acc_tn(xd, dq.data(), dwq, m, d, d);
    if (dwk != nullptr) detail::matmul_acc_tn(xd, dk.data(), dwk, m, d, d);
    if (dwv != nullptr) detail::matmul_acc_tn(xd, dv.data(), dwv, m, d, d);
    if (dwd != nullptr) detail::matmul_acc_tn(xd, ddelta.data(), dwd, m, d, 1);
    if (dalpha != nullptr) *dalpha += dalpha_acc;
}

} // namespace

AttentionParams AttentionParams::init(int d, Rng& rng, double stddev, bool requires_grad) {
    AttentionParams p;
    p.w_q = Tensor::randn({d, d}, rng, stddev, requires_grad);
    p.w_k = Tensor::randn({d, d}, rng, stddev, requires_grad);
    p.w_v = Tensor::randn({d, d}, rng, stddev, requires_grad);
    return p;
}

Mamba2Params Mamba2Params::init(int d, Rng& rng, double stddev, bool requires_grad) {
    Mamba2Params p;
    p.w_q = Tensor::randn({d, d}, rng, stddev, requires_grad);
    p.w_k = Tensor::randn({d, d}, rng, stddev, requires_grad);
    p.w_v = Tensor::randn({d, d}, rng, stddev, requires_grad);
    p.w_delta = Tensor::randn({d, 1}, rng, stddev, requires_grad);
    p.alpha = Tensor::scalar(1.0, requires_grad);
    return p;
}

Tensor attention_forward(const Tensor& x, const AttentionParams& p) {
    require_dim(x, p.dim(), "attention_forward");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.dim()));
    Tensor scores;
    {
        Tensor q = matmul(x, p.w_q);
        Tensor k = matmul(x, p.w_k);
        scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    }
    Tensor v = matmul(x, p.w_v);
    Tensor weights = softmax_rows(scores);
    scores = Tensor(); // release the raw score matrix before the weighted sum
    return matmul(weights, v);
}

Tensor mamba2_scan(const Tensor& x, const Mamba2Params& p) {
    require_dim(x, p.dim(), "mamba2_scan");
    if (!taped(x, {&p.w_q, &p.w_k, &p.w_v, &p.w_delta, &p.alpha})) {
        return scan_forward(x, p, nullptr);
    }

    auto saved = std::make_shared<ScanSaved>();
    Tensor y = scan_forward(x, p, saved.get());
    y.set_requires_grad(true);

    Graph::OpRecord rec;
    rec.kind = OpKind::kMamba2Scan;
    rec.inputs = {x.impl(), p.w_q.impl(), p.w_k.impl(), p.w_v.impl(), p.w_delta.impl(),
                  p.alpha.impl()};
    rec.output = y.impl();
    Tensor x_in = x;
    Mamba2Params params = p;
    auto yi = y.impl();
    rec.backprop = [saved, x_in, params, yi]() {
        auto grad_of = [](const Tensor& t) -> double* {
            return t.requires_grad() ? t.impl()->grad.data() : nullptr;
        };
        scan_backward(*saved, x_in, params, yi->grad.data(), grad_of(x_in), grad_of(params.w_q),
                      grad_of(params.w_k), grad_of(params.w_v), grad_of(params.w_delta),
                      grad_of(params.alpha));
    };
    Graph::current()->record(std::move(rec));
    return y;
}

Tensor mamba2_unrolled_oracle(const Tensor& x, const Mamba2Params& p) {
    require_dim(x, p.dim(), "mamba2_unrolled_oracle");
    const int L = x.rows();
    const int d = x.cols();
    const double* xd = x.data().data();
    const double* wq = p.w_q.data().data();
    const double* wk = p.w_k.data().data();
    const double* wv = p.w_v.data().data();
    const double* wd = p.w_delta.data().data();
    const double alpha = p.alpha.item();

    std::vector<double> q(static_cast<std::size_t>(L) * d, 0.0);
    std::vector<double> k(q.size(), 0.0);
    std::vector<double> v(q.size(), 0.0);
    std::vector<double> g(static_cast<std::size_t>(L), 0.0);
    for (int t = 0; t < L; ++t) {
        double delta = 0.0;
        for (int c = 0; c < d; ++c) {
            const double xv = xd[static_cast<std::size_t>(t) * d + c];
            for (int j = 0; j < d; ++j) {
                q[static_cast<std::size_t>(t) * d + j] += xv * wq[static_cast<std::size_t>(c) * d + j];
                k[static_cast<std::size_t>(t) * d + j] += xv * wk[static_cast<std::size_t>(c) * d + j];
                v[static_cast<std::size_t>(t) * d + j] += xv * wv[static_cast<std::size_t>(c) * d + j];
            }
            delta += xv * wd[c];
        }
        // softplus written out so this path shares nothing with the scan
        const double sp = (delta > 0.0 ? delta : 0.0) + std::log1p(std::exp(-std::fabs(delta)));
        g[static_cast<std::size_t>(t)] = std::exp(-sp * alpha);
    }

    Tensor y = Tensor::zeros({L, d});
    double* yd = y.mutable_data().data();
    for (int t = 0; t < L; ++t) {
        for (int i = 0; i <= t; ++i) {
            double decay = 1.0;
            for (int j = i + 1; j <= t; ++j) decay *= g[static_cast<std::size_t>(j)];
            double corr = 0.0;
            for (int c = 0; c < d; ++c) {
                corr += k[static_cast<std::size_t>(i) * d + c] * q[static_cast<std::size_t>(t) * d + c];
            }
            const double w = decay * corr;
            for (int c = 0; c < d; ++c) {
                yd[static_cast<std::size_t>(t) * d + c] += w * v[static_cast<std::size_t>(i) * d + c];
            }
        }
    }
    return y;
}

} // namespace lindistill
