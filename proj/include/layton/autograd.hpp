#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "layton/errors.hpp"
#include "layton/tensor.hpp"

namespace layton {

// ---------------------------------------------------------------------------
// Flat matmul kernels, accumulating into c. The nn/nt/tn variants cover the
// forward and both backward products without materializing transposes.
// ---------------------------------------------------------------------------

template <class R>
inline void matmul_nn_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const R* ar = a + int64_t(i) * k;
        R* cr = c + int64_t(i) * n;
        for (int p = 0; p < k; ++p) {
            R av = ar[p];
            if (av == R(0)) continue;
            const R* br = b + int64_t(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <class R>
inline void matmul_nt_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const R* ar = a + int64_t(i) * k;
        R* cr = c + int64_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const R* br = b + int64_t(j) * k;
            R acc = 0;
            for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

// c[m,n] += a[k,m]^T * b[k,n]
template <class R>
inline void matmul_tn_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const R* ar = a + int64_t(p) * m;
        const R* br = b + int64_t(p) * n;
        for (int i = 0; i < m; ++i) {
            R av = ar[i];
            if (av == R(0)) continue;
            R* cr = c + int64_t(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// im2col for [C,H,W] -> cols[C*kh*kw, Ho*Wo]
template <class R>
inline void im2col(const R* x, int c, int h, int w, int kh, int kw, int stride, int pad,
                   R* cols, int ho, int wo) {
    int64_t plane = int64_t(ho) * wo;
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                R* dst = cols + ((int64_t(ch) * kh + ki) * kw + kj) * plane;
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) {
                        for (int oj = 0; oj < wo; ++oj) dst[int64_t(oi) * wo + oj] = R(0);
                        continue;
                    }
                    const R* src = x + (int64_t(ch) * h + ii) * w;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride + kj - pad;
                        dst[int64_t(oi) * wo + oj] = (jj >= 0 && jj < w) ? src[jj] : R(0);
                    }
                }
            }
        }
    }
}

template <class R>
inline void col2im_acc(const R* cols, int c, int h, int w, int kh, int kw, int stride, int pad,
                       R* x, int ho, int wo) {
    int64_t plane = int64_t(ho) * wo;
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const R* src = cols + ((int64_t(ch) * kh + ki) * kw + kj) * plane;
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    R* dst = x + (int64_t(ch) * h + ii) * w;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride + kj - pad;
                        if (jj >= 0 && jj < w) dst[jj] += src[int64_t(oi) * wo + oj];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes are appended in construction order, so walking the
// tape backwards from the loss is a valid reverse topological order. Gradient
// buffers are allocated lazily; a node whose buffer was never touched carries
// no signal and its backward closure is skipped, which also makes
// stop_gradient cut subgraphs out of the backward pass entirely.
// ---------------------------------------------------------------------------

template <class R>
class TapeT {
public:
    using Real = R;
    using Tensor = TensorT<R>;

    struct Node {
        Tensor value;
        Tensor grad;  // empty until touched
        std::function<void()> back;
        bool needs_grad = false;
    };

    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    int push(Tensor value, bool needs_grad) {
        nodes.push_back(Node{std::move(value), Tensor{}, nullptr, needs_grad});
        return int(nodes.size()) - 1;
    }

    const Tensor& value(int id) const { return nodes[size_t(id)].value; }
    bool needs(int id) const { return nodes[size_t(id)].needs_grad; }

    Tensor& grad_buf(int id) {
        Node& n = nodes[size_t(id)];
        if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    // Gradient of `id` after backward(); zeros if the node received none.
    Tensor grad(int id) const {
        const Node& n = nodes[size_t(id)];
        if (n.grad.empty()) return Tensor::zeros(n.value.shape);
        return n.grad;
    }

    void backward(int loss_id) {
        LAYTON_CHECK(loss_id >= 0 && loss_id < int(nodes.size()), "backward: bad loss id");
        LAYTON_CHECK(nodes[size_t(loss_id)].value.size() == 1, "backward: loss must be scalar");
        double lv = double(nodes[size_t(loss_id)].value[0]);
        if (!std::isfinite(lv)) throw TrainingDivergence("loss is not finite");
        grad_buf(loss_id)[0] = R(1);
        for (int id = loss_id; id >= 0; --id) {
            Node& n = nodes[size_t(id)];
            if (!n.back || !n.needs_grad || n.grad.empty()) continue;
            n.back();
        }
    }

    size_t node_count() const { return nodes.size(); }

    std::vector<Node> nodes;
};

template <class R>
struct VarT {
    TapeT<R>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const TensorT<R>& val() const { return tape->value(id); }
    bool needs_grad() const { return tape->needs(id); }
};

template <class R>
inline VarT<R> constant(TapeT<R>& tape, TensorT<R> v) {
    return VarT<R>{&tape, tape.push(std::move(v), false)};
}

template <class R>
inline VarT<R> input(TapeT<R>& tape, TensorT<R> v, bool needs_grad) {
    return VarT<R>{&tape, tape.push(std::move(v), needs_grad)};
}

namespace detail {

template <class R>
inline void axpy(TensorT<R>& dst, const TensorT<R>& src) {
    R* d = dst.ptr();
    const R* s = src.ptr();
    int64_t n = src.size();
    for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class R>
inline VarT<R> operator+(VarT<R> a, VarT<R> b) {
    auto* tp = a.tape;
    LAYTON_CHECK(a.val().same_shape(b.val()), "add: shape mismatch");
    TensorT<R> out(a.val().shape);
    const R* pa = a.val().ptr();
    const R* pb = b.val().ptr();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, bid]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            if (tp->needs(aid)) detail::axpy(tp->grad_buf(aid), g);
            if (tp->needs(bid)) detail::axpy(tp->grad_buf(bid), g);
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> operator-(VarT<R> a, VarT<R> b) {
    auto* tp = a.tape;
    LAYTON_CHECK(a.val().same_shape(b.val()), "sub: shape mismatch");
    TensorT<R> out(a.val().shape);
    const R* pa = a.val().ptr();
    const R* pb = b.val().ptr();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, bid]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            if (tp->needs(aid)) detail::axpy(tp->grad_buf(aid), g);
            if (tp->needs(bid)) {
                TensorT<R>& gb = tp->grad_buf(bid);
                for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> operator*(VarT<R> a, VarT<R> b) {
    auto* tp = a.tape;
    LAYTON_CHECK(a.val().same_shape(b.val()), "mul: shape mismatch");
    TensorT<R> out(a.val().shape);
    const R* pa = a.val().ptr();
    const R* pb = b.val().ptr();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, bid]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            const R* va = tp->value(aid).ptr();
            const R* vb = tp->value(bid).ptr();
            if (tp->needs(aid)) {
                TensorT<R>& ga = tp->grad_buf(aid);
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (tp->needs(bid)) {
                TensorT<R>& gb = tp->grad_buf(bid);
                for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> scale(VarT<R> a, double c) {
    auto* tp = a.tape;
    TensorT<R> out(a.val().shape);
    const R* pa = a.val().ptr();
    R rc = R(c);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] * rc;
    bool ng = a.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, rc]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            TensorT<R>& ga = tp->grad_buf(aid);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * rc;
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> add_scalar(VarT<R> a, double c) {
    auto* tp = a.tape;
    TensorT<R> out(a.val().shape);
    const R* pa = a.val().ptr();
    R rc = R(c);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = pa[i] + rc;
    bool ng = a.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id;
        tp->nodes[size_t(id)].back = [tp, id, aid]() {
            if (tp->needs(aid)) detail::axpy(tp->grad_buf(aid), tp->nodes[size_t(id)].grad);
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> operator-(VarT<R> a) {
    return scale(a, -1.0);
}

namespace detail {

// Shared skeleton for unary elementwise ops: fwd(x) and dfdx given (x, y).
template <class R, class F, class DF>
inline VarT<R> unary_op(VarT<R> a, F fwd, DF dfdx) {
    auto* tp = a.tape;
    TensorT<R> out(a.val().shape);
    const R* pa = a.val().ptr();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
    bool ng = a.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, dfdx]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            const R* x = tp->value(aid).ptr();
            const R* y = tp->value(id).ptr();
            TensorT<R>& ga = tp->grad_buf(aid);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
        };
    }
    return VarT<R>{tp, id};
}

}  // namespace detail

template <class R>
inline VarT<R> relu(VarT<R> a) {
    return detail::unary_op(
        a, [](R x) { return x > R(0) ? x : R(0); },
        [](R x, R) { return x > R(0) ? R(1) : R(0); });
}

template <class R>
inline VarT<R> sigmoid_op(VarT<R> a) {
    return detail::unary_op(
        a, [](R x) { return R(1) / (R(1) + std::exp(-x)); },
        [](R, R y) { return y * (R(1) - y); });
}

template <class R>
inline VarT<R> silu(VarT<R> a) {
    return detail::unary_op(
        a,
        [](R x) { return x / (R(1) + std::exp(-x)); },
        [](R x, R) {
            R s = R(1) / (R(1) + std::exp(-x));
            return s * (R(1) + x * (R(1) - s));
        });
}

template <class R>
inline VarT<R> tanh_op(VarT<R> a) {
    return detail::unary_op(
        a, [](R x) { return std::tanh(x); },
        [](R, R y) { return R(1) - y * y; });
}

template <class R>
inline VarT<R> exp_op(VarT<R> a) {
    return detail::unary_op(
        a, [](R x) { return std::exp(x); },
        [](R, R y) { return y; });
}

template <class R>
inline VarT<R> log_op(VarT<R> a) {
    return detail::unary_op(
        a, [](R x) { return std::log(x); },
        [](R x, R) { return R(1) / x; });
}

template <class R>
inline VarT<R> square(VarT<R> a) {
    return detail::unary_op(
        a, [](R x) { return x * x; },
        [](R x, R) { return R(2) * x; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class R>
inline VarT<R> sum_all(VarT<R> a) {
    auto* tp = a.tape;
    double acc = 0;
    const R* pa = a.val().ptr();
    for (int64_t i = 0; i < a.val().size(); ++i) acc += double(pa[i]);
    TensorT<R> out({1});
    out[0] = R(acc);
    bool ng = a.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id;
        tp->nodes[size_t(id)].back = [tp, id, aid]() {
            R g = tp->nodes[size_t(id)].grad[0];
            TensorT<R>& ga = tp->grad_buf(aid);
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> mean_all(VarT<R> a) {
    int64_t n = a.val().size();
    return scale(sum_all(a), 1.0 / double(n));
}

template <class R>
inline VarT<R> mse(VarT<R> a, VarT<R> b) {
    return mean_all(square(a - b));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class R>
inline VarT<R> matmul(VarT<R> a, VarT<R> b) {
    auto* tp = a.tape;
    LAYTON_CHECK(a.val().rank() == 2 && b.val().rank() == 2, "matmul: rank-2 required");
    int m = a.val().dim(0), k = a.val().dim(1), n = b.val().dim(1);
    LAYTON_CHECK(b.val().dim(0) == k, "matmul: inner dims differ");
    TensorT<R> out({m, n});
    matmul_nn_acc(a.val().ptr(), b.val().ptr(), out.ptr(), m, k, n);
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, bid, m, k, n]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            if (tp->needs(aid))
                matmul_nt_acc(g.ptr(), tp->value(bid).ptr(), tp->grad_buf(aid).ptr(), m, n, k);
            if (tp->needs(bid))
                matmul_tn_acc(tp->value(aid).ptr(), g.ptr(), tp->grad_buf(bid).ptr(), k, m, n);
        };
    }
    return VarT<R>{tp, id};
}

// Batched matmul over leading group dim. a:[G,M,K], b:[G,K,N] (or [G,N,K]
// when transpose_b), out:[G,M,N].
template <class R>
inline VarT<R> bmm(VarT<R> a, VarT<R> b, bool transpose_b = false) {
    auto* tp = a.tape;
    LAYTON_CHECK(a.val().rank() == 3 && b.val().rank() == 3, "bmm: rank-3 required");
    int grp = a.val().dim(0), m = a.val().dim(1), k = a.val().dim(2);
    LAYTON_CHECK(b.val().dim(0) == grp, "bmm: group dims differ");
    int n = transpose_b ? b.val().dim(1) : b.val().dim(2);
    LAYTON_CHECK((transpose_b ? b.val().dim(2) : b.val().dim(1)) == k, "bmm: inner dims differ");
    TensorT<R> out({grp, m, n});
    for (int gi = 0; gi < grp; ++gi) {
        const R* pa = a.val().ptr() + int64_t(gi) * m * k;
        const R* pb = b.val().ptr() + int64_t(gi) * (transpose_b ? int64_t(n) * k : int64_t(k) * n);
        R* pc = out.ptr() + int64_t(gi) * m * n;
        if (transpose_b)
            matmul_nt_acc(pa, pb, pc, m, k, n);
        else
            matmul_nn_acc(pa, pb, pc, m, k, n);
    }
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, bid, grp, m, k, n, transpose_b]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            for (int gi = 0; gi < grp; ++gi) {
                const R* pg = g.ptr() + int64_t(gi) * m * n;
                const R* pa = tp->value(aid).ptr() + int64_t(gi) * m * k;
                const R* pb = tp->value(bid).ptr() + int64_t(gi) * (transpose_b ? int64_t(n) * k : int64_t(k) * n);
                if (tp->needs(aid)) {
                    R* ga = tp->grad_buf(aid).ptr() + int64_t(gi) * m * k;
                    if (transpose_b)
                        matmul_nn_acc(pg, pb, ga, m, n, k);  // dA = G * B
                    else
                        matmul_nt_acc(pg, pb, ga, m, n, k);  // dA = G * B^T
                }
                if (tp->needs(bid)) {
                    R* gb = tp->grad_buf(bid).ptr() + int64_t(gi) * (transpose_b ? int64_t(n) * k : int64_t(k) * n);
                    if (transpose_b)
                        matmul_tn_acc(pg, pa, gb, n, m, k);  // dB = G^T * A
                    else
                        matmul_tn_acc(pa, pg, gb, k, m, n);  // dB = A^T * G
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

// ---------------------------------------------------------------------------
// Convolution (im2col + matmul). x:[B,C,H,W], w:[Co,C,kh,kw], b:[Co].
// Columns are recomputed in the backward pass instead of stored.
// ---------------------------------------------------------------------------

template <class R>
inline VarT<R> conv2d(VarT<R> x, VarT<R> w, VarT<R> b, int stride, int pad) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4 && w.val().rank() == 4, "conv2d: x [B,C,H,W], w [Co,C,kh,kw]");
    int bs = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), wd = x.val().dim(3);
    int co = w.val().dim(0), kh = w.val().dim(2), kw = w.val().dim(3);
    LAYTON_CHECK(w.val().dim(1) == c, "conv2d: channel mismatch");
    LAYTON_CHECK(b.val().size() == co, "conv2d: bias size mismatch");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    LAYTON_CHECK(ho > 0 && wo > 0, "conv2d: empty output");
    int kdim = c * kh * kw;
    int64_t plane = int64_t(ho) * wo;

    TensorT<R> out({bs, co, ho, wo});
    std::vector<R> cols(size_t(kdim) * plane);
    for (int bi = 0; bi < bs; ++bi) {
        im2col(x.val().ptr() + int64_t(bi) * c * h * wd, c, h, wd, kh, kw, stride, pad, cols.data(), ho, wo);
        R* po = out.ptr() + int64_t(bi) * co * plane;
        matmul_nn_acc(w.val().ptr(), cols.data(), po, co, kdim, int(plane));
        for (int oc = 0; oc < co; ++oc) {
            R bias = b.val()[oc];
            R* row = po + int64_t(oc) * plane;
            for (int64_t i = 0; i < plane; ++i) row[i] += bias;
        }
    }
    bool ng = x.needs_grad() || w.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id, wid = w.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, wid, bid, bs, c, h, wd, co, kh, kw, stride, pad, ho, wo, kdim, plane]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            std::vector<R> cols(size_t(kdim) * plane);
            std::vector<R> dcols;
            if (tp->needs(xid)) dcols.resize(size_t(kdim) * plane);
            for (int bi = 0; bi < bs; ++bi) {
                const R* pg = g.ptr() + int64_t(bi) * co * plane;
                if (tp->needs(wid) || tp->needs(xid))
                    im2col(tp->value(xid).ptr() + int64_t(bi) * c * h * wd, c, h, wd, kh, kw, stride, pad,
                           cols.data(), ho, wo);
                if (tp->needs(wid))
                    matmul_nt_acc(pg, cols.data(), tp->grad_buf(wid).ptr(), co, int(plane), kdim);
                if (tp->needs(bid)) {
                    TensorT<R>& gb = tp->grad_buf(bid);
                    for (int oc = 0; oc < co; ++oc) {
                        const R* row = pg + int64_t(oc) * plane;
                        double acc = 0;
                        for (int64_t i = 0; i < plane; ++i) acc += double(row[i]);
                        gb[oc] += R(acc);
                    }
                }
                if (tp->needs(xid)) {
                    std::fill(dcols.begin(), dcols.end(), R(0));
                    matmul_tn_acc(tp->value(wid).ptr(), pg, dcols.data(), kdim, co, int(plane));
                    col2im_acc(dcols.data(), c, h, wd, kh, kw, stride, pad,
                               tp->grad_buf(xid).ptr() + int64_t(bi) * c * h * wd, ho, wo);
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> upsample_nearest2(VarT<R> x) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4, "upsample: rank-4 required");
    int bs = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    TensorT<R> out({bs, c, h * 2, w * 2});
    const R* px = x.val().ptr();
    R* po = out.ptr();
    for (int64_t bc = 0; bc < int64_t(bs) * c; ++bc) {
        const R* src = px + bc * h * w;
        R* dst = po + bc * h * w * 4;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                R v = src[int64_t(i) * w + j];
                R* d = dst + (int64_t(2 * i) * (2 * w) + 2 * j);
                d[0] = v;
                d[1] = v;
                d[2 * w] = v;
                d[2 * w + 1] = v;
            }
    }
    bool ng = x.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, bs, c, h, w]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            TensorT<R>& gx = tp->grad_buf(xid);
            for (int64_t bc = 0; bc < int64_t(bs) * c; ++bc) {
                const R* src = g.ptr() + bc * h * w * 4;
                R* dst = gx.ptr() + bc * h * w;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const R* s = src + (int64_t(2 * i) * (2 * w) + 2 * j);
                        dst[int64_t(i) * w + j] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
                    }
            }
        };
    }
    return VarT<R>{tp, id};
}

// ---------------------------------------------------------------------------
// Broadcasting bias adds
// ---------------------------------------------------------------------------

// x:[B,C,H,W] + b:[C]
template <class R>
inline VarT<R> add_bias_channel(VarT<R> x, VarT<R> b) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4 && b.val().size() == x.val().dim(1), "add_bias_channel: shape mismatch");
    int bs = x.val().dim(0), c = x.val().dim(1);
    int64_t plane = int64_t(x.val().dim(2)) * x.val().dim(3);
    TensorT<R> out(x.val().shape);
    const R* px = x.val().ptr();
    R* po = out.ptr();
    for (int bi = 0; bi < bs; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            R bv = b.val()[ci];
            int64_t off = (int64_t(bi) * c + ci) * plane;
            for (int64_t i = 0; i < plane; ++i) po[off + i] = px[off + i] + bv;
        }
    bool ng = x.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, bid, bs, c, plane]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            if (tp->needs(xid)) detail::axpy(tp->grad_buf(xid), g);
            if (tp->needs(bid)) {
                TensorT<R>& gb = tp->grad_buf(bid);
                for (int bi = 0; bi < bs; ++bi)
                    for (int ci = 0; ci < c; ++ci) {
                        const R* row = g.ptr() + (int64_t(bi) * c + ci) * plane;
                        double acc = 0;
                        for (int64_t i = 0; i < plane; ++i) acc += double(row[i]);
                        gb[ci] += R(acc);
                    }
            }
        };
    }
    return VarT<R>{tp, id};
}

// x:[B,C,H,W] + tb:[B,C]  (per-sample channel bias, used for time embeddings)
template <class R>
inline VarT<R> add_bias_bc(VarT<R> x, VarT<R> tb) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4 && tb.val().rank() == 2, "add_bias_bc: bad ranks");
    int bs = x.val().dim(0), c = x.val().dim(1);
    LAYTON_CHECK(tb.val().dim(0) == bs && tb.val().dim(1) == c, "add_bias_bc: shape mismatch");
    int64_t plane = int64_t(x.val().dim(2)) * x.val().dim(3);
    TensorT<R> out(x.val().shape);
    const R* px = x.val().ptr();
    R* po = out.ptr();
    for (int64_t bc = 0; bc < int64_t(bs) * c; ++bc) {
        R bv = tb.val()[bc];
        for (int64_t i = 0; i < plane; ++i) po[bc * plane + i] = px[bc * plane + i] + bv;
    }
    bool ng = x.needs_grad() || tb.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id, tid = tb.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, tid, bs, c, plane]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            if (tp->needs(xid)) detail::axpy(tp->grad_buf(xid), g);
            if (tp->needs(tid)) {
                TensorT<R>& gt = tp->grad_buf(tid);
                for (int64_t bc = 0; bc < int64_t(bs) * c; ++bc) {
                    const R* row = g.ptr() + bc * plane;
                    double acc = 0;
                    for (int64_t i = 0; i < plane; ++i) acc += double(row[i]);
                    gt[bc] += R(acc);
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

// x:[M,N] + b:[N]
template <class R>
inline VarT<R> add_row_bias(VarT<R> x, VarT<R> b) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 2 && b.val().size() == x.val().dim(1), "add_row_bias: shape mismatch");
    int m = x.val().dim(0), n = x.val().dim(1);
    TensorT<R> out(x.val().shape);
    const R* px = x.val().ptr();
    const R* pb = b.val().ptr();
    R* po = out.ptr();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[int64_t(i) * n + j] = px[int64_t(i) * n + j] + pb[j];
    bool ng = x.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, bid, m, n]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            if (tp->needs(xid)) detail::axpy(tp->grad_buf(xid), g);
            if (tp->needs(bid)) {
                TensorT<R>& gb = tp->grad_buf(bid);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gb[j] += g[int64_t(i) * n + j];
            }
        };
    }
    return VarT<R>{tp, id};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// GroupNorm over x:[B,C,H,W]; gamma,beta:[C].
template <class R>
inline VarT<R> group_norm(VarT<R> x, VarT<R> gamma, VarT<R> beta, int groups, double eps = 1e-5) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4, "group_norm: rank-4 required");
    int bs = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    LAYTON_CHECK(c % groups == 0, "group_norm: channels not divisible by groups");
    LAYTON_CHECK(gamma.val().size() == c && beta.val().size() == c, "group_norm: affine size mismatch");
    int cg = c / groups;
    int64_t gsz = int64_t(cg) * h * w;
    int64_t plane = int64_t(h) * w;

    TensorT<R> out(x.val().shape);
    // cached stats for backward: mean and rstd per (b, group)
    auto stats = std::make_shared<std::vector<double>>(size_t(bs) * groups * 2);
    const R* px = x.val().ptr();
    R* po = out.ptr();
    for (int bi = 0; bi < bs; ++bi) {
        for (int gi = 0; gi < groups; ++gi) {
            const R* src = px + (int64_t(bi) * c + int64_t(gi) * cg) * plane;
            double mean = 0;
            for (int64_t i = 0; i < gsz; ++i) mean += double(src[i]);
            mean /= double(gsz);
            double var = 0;
            for (int64_t i = 0; i < gsz; ++i) {
                double d = double(src[i]) - mean;
                var += d * d;
            }
            var /= double(gsz);
            double rstd = 1.0 / std::sqrt(var + eps);
            (*stats)[size_t(bi * groups + gi) * 2] = mean;
            (*stats)[size_t(bi * groups + gi) * 2 + 1] = rstd;
            R* dst = po + (int64_t(bi) * c + int64_t(gi) * cg) * plane;
            for (int ci = 0; ci < cg; ++ci) {
                R gm = gamma.val()[gi * cg + ci];
                R bt = beta.val()[gi * cg + ci];
                for (int64_t i = 0; i < plane; ++i) {
                    int64_t off = int64_t(ci) * plane + i;
                    dst[off] = R((double(src[off]) - mean) * rstd) * gm + bt;
                }
            }
        }
    }
    bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id, gid = gamma.id, bid = beta.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, gid, bid, bs, c, groups, cg, plane, gsz, stats]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            const R* px = tp->value(xid).ptr();
            const R* pgamma = tp->value(gid).ptr();
            for (int bi = 0; bi < bs; ++bi) {
                for (int gi = 0; gi < groups; ++gi) {
                    double mean = (*stats)[size_t(bi * groups + gi) * 2];
                    double rstd = (*stats)[size_t(bi * groups + gi) * 2 + 1];
                    int64_t base = (int64_t(bi) * c + int64_t(gi) * cg) * plane;
                    // reductions over the group
                    double sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int ci = 0; ci < cg; ++ci) {
                        double gm = double(pgamma[gi * cg + ci]);
                        for (int64_t i = 0; i < plane; ++i) {
                            int64_t off = base + int64_t(ci) * plane + i;
                            double xhat = (double(px[off]) - mean) * rstd;
                            double dxhat = double(g[off]) * gm;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    double inv_n = 1.0 / double(gsz);
                    if (tp->needs(xid)) {
                        TensorT<R>& gx = tp->grad_buf(xid);
                        for (int ci = 0; ci < cg; ++ci) {
                            double gm = double(pgamma[gi * cg + ci]);
                            for (int64_t i = 0; i < plane; ++i) {
                                int64_t off = base + int64_t(ci) * plane + i;
                                double xhat = (double(px[off]) - mean) * rstd;
                                double dxhat = double(g[off]) * gm;
                                gx[off] += R(rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat));
                            }
                        }
                    }
                    if (tp->needs(gid) || tp->needs(bid)) {
                        for (int ci = 0; ci < cg; ++ci) {
                            double dgm = 0, dbt = 0;
                            for (int64_t i = 0; i < plane; ++i) {
                                int64_t off = base + int64_t(ci) * plane + i;
                                double xhat = (double(px[off]) - mean) * rstd;
                                dgm += double(g[off]) * xhat;
                                dbt += double(g[off]);
                            }
                            if (tp->needs(gid)) tp->grad_buf(gid)[gi * cg + ci] += R(dgm);
                            if (tp->needs(bid)) tp->grad_buf(bid)[gi * cg + ci] += R(dbt);
                        }
                    }
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

// LayerNorm over the last dim of x:[M,N]; gamma,beta:[N].
template <class R>
inline VarT<R> layer_norm(VarT<R> x, VarT<R> gamma, VarT<R> beta, double eps = 1e-5) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 2, "layer_norm: rank-2 required (flatten first)");
    int m = x.val().dim(0), n = x.val().dim(1);
    LAYTON_CHECK(gamma.val().size() == n && beta.val().size() == n, "layer_norm: affine size mismatch");
    TensorT<R> out(x.val().shape);
    auto stats = std::make_shared<std::vector<double>>(size_t(m) * 2);
    const R* px = x.val().ptr();
    R* po = out.ptr();
    for (int i = 0; i < m; ++i) {
        const R* row = px + int64_t(i) * n;
        double mean = 0;
        for (int j = 0; j < n; ++j) mean += double(row[j]);
        mean /= n;
        double var = 0;
        for (int j = 0; j < n; ++j) {
            double d = double(row[j]) - mean;
            var += d * d;
        }
        var /= n;
        double rstd = 1.0 / std::sqrt(var + eps);
        (*stats)[size_t(i) * 2] = mean;
        (*stats)[size_t(i) * 2 + 1] = rstd;
        R* dst = po + int64_t(i) * n;
        for (int j = 0; j < n; ++j)
            dst[j] = R((double(row[j]) - mean) * rstd) * gamma.val()[j] + beta.val()[j];
    }
    bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id, gid = gamma.id, bid = beta.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, gid, bid, m, n, stats]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            const R* px = tp->value(xid).ptr();
            const R* pgamma = tp->value(gid).ptr();
            for (int i = 0; i < m; ++i) {
                double mean = (*stats)[size_t(i) * 2];
                double rstd = (*stats)[size_t(i) * 2 + 1];
                const R* xrow = px + int64_t(i) * n;
                const R* grow = g.ptr() + int64_t(i) * n;
                double sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int j = 0; j < n; ++j) {
                    double xhat = (double(xrow[j]) - mean) * rstd;
                    double dxhat = double(grow[j]) * double(pgamma[j]);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if (tp->needs(xid)) {
                    TensorT<R>& gx = tp->grad_buf(xid);
                    for (int j = 0; j < n; ++j) {
                        double xhat = (double(xrow[j]) - mean) * rstd;
                        double dxhat = double(grow[j]) * double(pgamma[j]);
                        gx[int64_t(i) * n + j] += R(rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n));
                    }
                }
                if (tp->needs(gid)) {
                    TensorT<R>& gg = tp->grad_buf(gid);
                    for (int j = 0; j < n; ++j) {
                        double xhat = (double(xrow[j]) - mean) * rstd;
                        gg[j] += R(double(grow[j]) * xhat);
                    }
                }
                if (tp->needs(bid)) {
                    TensorT<R>& gb = tp->grad_buf(bid);
                    for (int j = 0; j < n; ++j) gb[j] += grow[j];
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

// ---------------------------------------------------------------------------
// Attention / sequence ops
// ---------------------------------------------------------------------------

// Masked softmax over rows of x:[G,L,L]; entry (r, c) participates iff c <= r.
template <class R>
inline VarT<R> causal_softmax(VarT<R> x) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 3 && x.val().dim(1) == x.val().dim(2), "causal_softmax: [G,L,L] required");
    int grp = x.val().dim(0), l = x.val().dim(1);
    TensorT<R> out(x.val().shape);
    const R* px = x.val().ptr();
    R* po = out.ptr();
    for (int gi = 0; gi < grp; ++gi) {
        for (int r = 0; r < l; ++r) {
            const R* row = px + (int64_t(gi) * l + r) * l;
            R* dst = po + (int64_t(gi) * l + r) * l;
            R mx = row[0];
            for (int cc = 1; cc <= r; ++cc) mx = std::max(mx, row[cc]);
            double denom = 0;
            for (int cc = 0; cc <= r; ++cc) denom += std::exp(double(row[cc] - mx));
            for (int cc = 0; cc <= r; ++cc) dst[cc] = R(std::exp(double(row[cc] - mx)) / denom);
            for (int cc = r + 1; cc < l; ++cc) dst[cc] = R(0);
        }
    }
    bool ng = x.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, grp, l]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            const R* py = tp->value(id).ptr();
            TensorT<R>& gx = tp->grad_buf(xid);
            for (int gi = 0; gi < grp; ++gi)
                for (int r = 0; r < l; ++r) {
                    int64_t base = (int64_t(gi) * l + r) * l;
                    double dot = 0;
                    for (int cc = 0; cc <= r; ++cc) dot += double(py[base + cc]) * double(g[base + cc]);
                    for (int cc = 0; cc <= r; ++cc)
                        gx[base + cc] += R(double(py[base + cc]) * (double(g[base + cc]) - dot));
                }
        };
    }
    return VarT<R>{tp, id};
}

// Mean next-token cross entropy. logits:[M,V], targets: M class ids.
template <class R>
inline VarT<R> cross_entropy_logits(VarT<R> logits, std::vector<int> targets) {
    auto* tp = logits.tape;
    LAYTON_CHECK(logits.val().rank() == 2, "cross_entropy: rank-2 logits required");
    int m = logits.val().dim(0), v = logits.val().dim(1);
    LAYTON_CHECK(int(targets.size()) == m, "cross_entropy: target count mismatch");
    for (int t : targets) LAYTON_CHECK(t >= 0 && t < v, "cross_entropy: token out of range");
    const R* pl = logits.val().ptr();
    double loss = 0;
    for (int i = 0; i < m; ++i) {
        const R* row = pl + int64_t(i) * v;
        double mx = double(row[0]);
        for (int j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
        double denom = 0;
        for (int j = 0; j < v; ++j) denom += std::exp(double(row[j]) - mx);
        loss += mx + std::log(denom) - double(row[targets[size_t(i)]]);
    }
    TensorT<R> out({1});
    out[0] = R(loss / m);
    bool ng = logits.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int lid = logits.id;
        auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
        tp->nodes[size_t(id)].back = [tp, id, lid, m, v, tgt]() {
            R gs = tp->nodes[size_t(id)].grad[0];
            const R* pl = tp->value(lid).ptr();
            TensorT<R>& gl = tp->grad_buf(lid);
            for (int i = 0; i < m; ++i) {
                const R* row = pl + int64_t(i) * v;
                double mx = double(row[0]);
                for (int j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
                double denom = 0;
                for (int j = 0; j < v; ++j) denom += std::exp(double(row[j]) - mx);
                for (int j = 0; j < v; ++j) {
                    double p = std::exp(double(row[j]) - mx) / denom;
                    double onehot = (j == (*tgt)[size_t(i)]) ? 1.0 : 0.0;
                    gl[int64_t(i) * v + j] += R(double(gs) * (p - onehot) / m);
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

// Row gather: table:[V,D], ids: M row indices -> [M,D]. Backward scatter-adds.
template <class R>
inline VarT<R> gather_rows(VarT<R> table, std::vector<int> ids) {
    auto* tp = table.tape;
    LAYTON_CHECK(table.val().rank() == 2, "gather_rows: rank-2 table required");
    int v = table.val().dim(0), d = table.val().dim(1);
    for (int i : ids) LAYTON_CHECK(i >= 0 && i < v, "gather_rows: index out of range");
    int m = int(ids.size());
    TensorT<R> out({m, d});
    const R* pt = table.val().ptr();
    for (int i = 0; i < m; ++i)
        std::copy(pt + int64_t(ids[size_t(i)]) * d, pt + int64_t(ids[size_t(i)]) * d + d, out.ptr() + int64_t(i) * d);
    bool ng = table.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int tid = table.id;
        auto idx = std::make_shared<std::vector<int>>(std::move(ids));
        tp->nodes[size_t(id)].back = [tp, id, tid, m, d, idx]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            TensorT<R>& gt = tp->grad_buf(tid);
            for (int i = 0; i < m; ++i) {
                R* dst = gt.ptr() + int64_t((*idx)[size_t(i)]) * d;
                const R* src = g.ptr() + int64_t(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return VarT<R>{tp, id};
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class R>
inline VarT<R> reshape(VarT<R> x, std::vector<int> shape) {
    auto* tp = x.tape;
    LAYTON_CHECK(TensorT<R>::count(shape) == x.val().size(), "reshape: element count mismatch");
    TensorT<R> out(shape, x.val().data);
    bool ng = x.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id;
        tp->nodes[size_t(id)].back = [tp, id, xid]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            TensorT<R>& gx = tp->grad_buf(xid);
            for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> permute4(VarT<R> x, std::array<int, 4> perm) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4, "permute4: rank-4 required");
    const auto& s = x.val().shape;
    std::vector<int> os = {s[size_t(perm[0])], s[size_t(perm[1])], s[size_t(perm[2])], s[size_t(perm[3])]};
    TensorT<R> out(os);
    int64_t st[4] = {int64_t(s[1]) * s[2] * s[3], int64_t(s[2]) * s[3], int64_t(s[3]), 1};
    const R* px = x.val().ptr();
    R* po = out.ptr();
    int64_t n = 0;
    for (int a0 = 0; a0 < os[0]; ++a0)
        for (int a1 = 0; a1 < os[1]; ++a1)
            for (int a2 = 0; a2 < os[2]; ++a2)
                for (int a3 = 0; a3 < os[3]; ++a3)
                    po[n++] = px[a0 * st[perm[0]] + a1 * st[perm[1]] + a2 * st[perm[2]] + a3 * st[perm[3]]];
    bool ng = x.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id;
        auto osh = std::make_shared<std::vector<int>>(os);
        tp->nodes[size_t(id)].back = [tp, id, xid, perm, osh]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            TensorT<R>& gx = tp->grad_buf(xid);
            const auto& s = gx.shape;
            int64_t st[4] = {int64_t(s[1]) * s[2] * s[3], int64_t(s[2]) * s[3], int64_t(s[3]), 1};
            const auto& os = *osh;
            int64_t n = 0;
            for (int a0 = 0; a0 < os[0]; ++a0)
                for (int a1 = 0; a1 < os[1]; ++a1)
                    for (int a2 = 0; a2 < os[2]; ++a2)
                        for (int a3 = 0; a3 < os[3]; ++a3)
                            gx[a0 * st[perm[0]] + a1 * st[perm[1]] + a2 * st[perm[2]] + a3 * st[perm[3]]] += g[n++];
        };
    }
    return VarT<R>{tp, id};
}

template <class R>
inline VarT<R> concat_channels(VarT<R> a, VarT<R> b) {
    auto* tp = a.tape;
    LAYTON_CHECK(a.val().rank() == 4 && b.val().rank() == 4, "concat_channels: rank-4 required");
    int bs = a.val().dim(0), ca = a.val().dim(1), cb = b.val().dim(1);
    int h = a.val().dim(2), w = a.val().dim(3);
    LAYTON_CHECK(b.val().dim(0) == bs && b.val().dim(2) == h && b.val().dim(3) == w, "concat_channels: shape mismatch");
    int64_t plane = int64_t(h) * w;
    TensorT<R> out({bs, ca + cb, h, w});
    for (int bi = 0; bi < bs; ++bi) {
        std::copy(a.val().ptr() + int64_t(bi) * ca * plane, a.val().ptr() + int64_t(bi + 1) * ca * plane,
                  out.ptr() + int64_t(bi) * (ca + cb) * plane);
        std::copy(b.val().ptr() + int64_t(bi) * cb * plane, b.val().ptr() + int64_t(bi + 1) * cb * plane,
                  out.ptr() + int64_t(bi) * (ca + cb) * plane + int64_t(ca) * plane);
    }
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int aid = a.id, bid = b.id;
        tp->nodes[size_t(id)].back = [tp, id, aid, bid, bs, ca, cb, plane]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            for (int bi = 0; bi < bs; ++bi) {
                if (tp->needs(aid)) {
                    TensorT<R>& ga = tp->grad_buf(aid);
                    const R* src = g.ptr() + int64_t(bi) * (ca + cb) * plane;
                    R* dst = ga.ptr() + int64_t(bi) * ca * plane;
                    for (int64_t i = 0; i < int64_t(ca) * plane; ++i) dst[i] += src[i];
                }
                if (tp->needs(bid)) {
                    TensorT<R>& gb = tp->grad_buf(bid);
                    const R* src = g.ptr() + int64_t(bi) * (ca + cb) * plane + int64_t(ca) * plane;
                    R* dst = gb.ptr() + int64_t(bi) * cb * plane;
                    for (int64_t i = 0; i < int64_t(cb) * plane; ++i) dst[i] += src[i];
                }
            }
        };
    }
    return VarT<R>{tp, id};
}

// Channel slice [c0, c1) of x:[B,C,H,W].
template <class R>
inline VarT<R> slice_channels(VarT<R> x, int c0, int c1) {
    auto* tp = x.tape;
    LAYTON_CHECK(x.val().rank() == 4, "slice_channels: rank-4 required");
    int bs = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    LAYTON_CHECK(0 <= c0 && c0 < c1 && c1 <= c, "slice_channels: bad range");
    int64_t plane = int64_t(h) * w;
    int nc = c1 - c0;
    TensorT<R> out({bs, nc, h, w});
    for (int bi = 0; bi < bs; ++bi)
        std::copy(x.val().ptr() + (int64_t(bi) * c + c0) * plane, x.val().ptr() + (int64_t(bi) * c + c1) * plane,
                  out.ptr() + int64_t(bi) * nc * plane);
    bool ng = x.needs_grad();
    int id = tp->push(std::move(out), ng);
    if (ng) {
        int xid = x.id;
        tp->nodes[size_t(id)].back = [tp, id, xid, bs, c, c0, nc, plane]() {
            const TensorT<R>& g = tp->nodes[size_t(id)].grad;
            TensorT<R>& gx = tp->grad_buf(xid);
            for (int bi = 0; bi < bs; ++bi) {
                const R* src = g.ptr() + int64_t(bi) * nc * plane;
                R* dst = gx.ptr() + (int64_t(bi) * c + c0) * plane;
                for (int64_t i = 0; i < int64_t(nc) * plane; ++i) dst[i] += src[i];
            }
        };
    }
    return VarT<R>{tp, id};
}

// Forward identity, backward blocked. The input subgraph never receives
// gradient, so backward() skips it entirely.
template <class R>
inline VarT<R> stop_gradient(VarT<R> x) {
    auto* tp = x.tape;
    TensorT<R> out = x.val();
    int id = tp->push(std::move(out), false);
    return VarT<R>{tp, id};
}

}  // namespace layton
