#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "layton/image.hpp"
#include "layton/nn.hpp"

namespace layton {

inline constexpr double kPsnrCap = 99.0;

template <class R>
inline double mse_tensor(const TensorT<R>& a, const TensorT<R>& b) {
    LAYTON_CHECK(a.same_shape(b), "mse: shape mismatch");
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return acc / double(a.size());
}

// 10*log10(1/MSE) for [0,1] images, capped at 99 dB.
template <class R>
inline double psnr(const TensorT<R>& a, const TensorT<R>& b) {
    double m = mse_tensor(a, b);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

// Mean local SSIM on luminance, 7x7 uniform windows, standard stabilizers.
template <class R>
inline double ssim(const TensorT<R>& a, const TensorT<R>& b) {
    LAYTON_CHECK(a.same_shape(b), "ssim: shape mismatch");
    LAYTON_CHECK(a.rank() == 3 && a.dim(0) == 3, "ssim: [3,H,W] required");
    const int win = 7;
    int h = a.dim(1), w = a.dim(2);
    LAYTON_CHECK(h >= win && w >= win, "ssim: image smaller than window");
    auto la = luminance(a);
    auto lb = luminance(b);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0;
    int windows = 0;
    for (int y = 0; y + win <= h; ++y) {
        for (int x = 0; x + win <= w; ++x) {
            double ma = 0, mb = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    ma += double(la[size_t((y + i) * w + x + j)]);
                    mb += double(lb[size_t((y + i) * w + x + j)]);
                }
            ma /= win * win;
            mb /= win * win;
            double va = 0, vb = 0, cov = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    double da = double(la[size_t((y + i) * w + x + j)]) - ma;
                    double db = double(lb[size_t((y + i) * w + x + j)]) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= win * win;
            vb /= win * win;
            cov /= win * win;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++windows;
        }
    }
    return total / windows;
}

// ---------------------------------------------------------------------------
// Perceptual proxy: fixed, seed-pinned random conv stack. The same frozen
// network backs the training-time perceptual loss and the FID-style metric,
// so it lives on the tape and is differentiable w.r.t. its image inputs.
// ---------------------------------------------------------------------------

template <class R>
struct PerceptualProxyT {
    ParamStoreT<R> params;
    Conv2dT<R> c1, c2, c3;
    uint64_t seed = 1234;

    explicit PerceptualProxyT(uint64_t seed_ = 1234) : seed(seed_) {
        Rng rng = Rng::seeded(seed);
        c1.init(params, "proxy.c1", 3, 8, 3, 2, 1, rng);
        c2.init(params, "proxy.c2", 8, 16, 3, 2, 1, rng);
        c3.init(params, "proxy.c3", 16, 32, 3, 2, 1, rng);
        // nonzero biases keep features informative on flat inputs
        for (auto& p : params) {
            if (p.name.ends_with(".b"))
                for (auto& v : p.value.data) v = R(rng.normal() * 0.05);
            p.trainable = false;
        }
    }

    struct Acts {
        VarT<R> a1, a2, a3;
    };

    Acts activations(const BoundT<R>& bp, VarT<R> img) const {
        Acts acts;
        acts.a1 = relu(c1.forward(bp, img));
        acts.a2 = relu(c2.forward(bp, acts.a1));
        acts.a3 = relu(c3.forward(bp, acts.a2));
        return acts;
    }

    // Mean squared feature distance across the three stages. a,b: [B,3,H,W].
    VarT<R> distance_var(TapeT<R>& tape, const BoundT<R>& bp, VarT<R> a, VarT<R> b) const {
        Acts fa = activations(bp, a);
        Acts fb = activations(bp, b);
        auto d = mse(fa.a1, fb.a1) + mse(fa.a2, fb.a2) + mse(fa.a3, fb.a3);
        return scale(d, 1.0 / 3.0);
    }

    double distance(const TensorT<R>& a, const TensorT<R>& b) const {
        LAYTON_CHECK(a.same_shape(b), "perceptual proxy: shape mismatch");
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        auto va = input(tape, a.rank() == 3 ? stack_images<R>({a}) : a, false);
        auto vb = input(tape, b.rank() == 3 ? stack_images<R>({b}) : b, false);
        return double(distance_var(tape, bp, va, vb).val()[0]);
    }

    // Pooled feature vector for Frechet statistics: global average of the
    // last two stages, 48 dims.
    TensorT<R> features(const TensorT<R>& img) const {
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        auto v = input(tape, img.rank() == 3 ? stack_images<R>({img}) : img, false);
        Acts acts = activations(bp, v);
        auto pool = [](const TensorT<R>& t) {
            int c = t.dim(1);
            int64_t plane = int64_t(t.dim(2)) * t.dim(3);
            std::vector<R> out(static_cast<size_t>(c));
            for (int ci = 0; ci < c; ++ci) {
                double acc = 0;
                for (int64_t i = 0; i < plane; ++i) acc += double(t[int64_t(ci) * plane + i]);
                out[size_t(ci)] = R(acc / double(plane));
            }
            return out;
        };
        auto f2 = pool(acts.a2.val());
        auto f3 = pool(acts.a3.val());
        TensorT<R> out({int(f2.size() + f3.size())});
        std::copy(f2.begin(), f2.end(), out.ptr());
        std::copy(f3.begin(), f3.end(), out.ptr() + f2.size());
        return out;
    }
};

using PerceptualProxy = PerceptualProxyT<float>;

// ---------------------------------------------------------------------------
// Frechet distance on feature clouds
// ---------------------------------------------------------------------------

namespace linalg {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
// Returns eigenvalues; eigenvectors in columns of v if requested.
inline std::vector<double> sym_eig(std::vector<double> a, int n, std::vector<double>* v_out = nullptr) {
    std::vector<double> v(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[size_t(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[size_t(p) * n + q] * a[size_t(p) * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = a[size_t(p) * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[size_t(p) * n + p], aqq = a[size_t(q) * n + q];
                double theta = (aqq - app) / (2 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a[size_t(k) * n + p], akq = a[size_t(k) * n + q];
                    a[size_t(k) * n + p] = c * akp - s * akq;
                    a[size_t(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a[size_t(p) * n + k], aqk = a[size_t(q) * n + k];
                    a[size_t(p) * n + k] = c * apk - s * aqk;
                    a[size_t(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = v[size_t(k) * n + p], vkq = v[size_t(k) * n + q];
                    v[size_t(k) * n + p] = c * vkp - s * vkq;
                    v[size_t(k) * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eig[size_t(i)] = a[size_t(i) * n + i];
    if (v_out) *v_out = std::move(v);
    return eig;
}

// Symmetric PSD square root via eigendecomposition, negative eigenvalues
// clamped to zero.
inline std::vector<double> sym_sqrt(const std::vector<double>& m, int n) {
    std::vector<double> v;
    auto eig = sym_eig(m, n, &v);
    std::vector<double> out(size_t(n) * n, 0.0);
    for (int k = 0; k < n; ++k) {
        double s = std::sqrt(std::max(0.0, eig[size_t(k)]));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) out[size_t(i) * n + j] += s * v[size_t(i) * n + k] * v[size_t(j) * n + k];
    }
    return out;
}

}  // namespace linalg

// features: rows are samples. d = |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
template <class R>
inline double frechet_distance(const TensorT<R>& feats_a, const TensorT<R>& feats_b) {
    LAYTON_CHECK(feats_a.rank() == 2 && feats_b.rank() == 2, "frechet: [N,F] feature matrices required");
    LAYTON_CHECK(feats_a.dim(1) == feats_b.dim(1), "frechet: feature dims differ");
    int f = feats_a.dim(1);

    auto stats = [f](const TensorT<R>& x, std::vector<double>& mu, std::vector<double>& cov) {
        int n = x.dim(0);
        LAYTON_CHECK(n >= 2, "frechet: need at least 2 samples per set");
        mu.assign(size_t(f), 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < f; ++j) mu[size_t(j)] += double(x[int64_t(i) * f + j]);
        for (int j = 0; j < f; ++j) mu[size_t(j)] /= n;
        cov.assign(size_t(f) * f, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < f; ++j) {
                double dj = double(x[int64_t(i) * f + j]) - mu[size_t(j)];
                for (int k = j; k < f; ++k) {
                    double dk = double(x[int64_t(i) * f + k]) - mu[size_t(k)];
                    cov[size_t(j) * f + k] += dj * dk;
                }
            }
        for (int j = 0; j < f; ++j)
            for (int k = j; k < f; ++k) {
                cov[size_t(j) * f + k] /= (n - 1);
                cov[size_t(k) * f + j] = cov[size_t(j) * f + k];
            }
    };

    std::vector<double> mu_a, mu_b, cov_a, cov_b;
    stats(feats_a, mu_a, cov_a);
    stats(feats_b, mu_b, cov_b);

    // near-singular covariances get a small diagonal bump
    auto regularize = [f](std::vector<double>& cov, const char* tag) {
        auto eig = linalg::sym_eig(cov, f);
        double mn = eig[0];
        for (double e : eig) mn = std::min(mn, e);
        if (mn < 1e-8) {
            for (int i = 0; i < f; ++i) cov[size_t(i) * f + i] += 1e-6;
            std::fprintf(stderr, "[warn] frechet: %s covariance near singular, +1e-6 diagonal applied\n", tag);
        }
    };
    regularize(cov_a, "first");
    regularize(cov_b, "second");

    double mean_term = 0;
    for (int j = 0; j < f; ++j) {
        double d = mu_a[size_t(j)] - mu_b[size_t(j)];
        mean_term += d * d;
    }
    double tr_a = 0, tr_b = 0;
    for (int j = 0; j < f; ++j) {
        tr_a += cov_a[size_t(j) * f + j];
        tr_b += cov_b[size_t(j) * f + j];
    }

    // tr((Sa Sb)^{1/2}) = sum sqrt(eig(S Sa S)) with S = sqrt(Sb)
    std::vector<double> s = linalg::sym_sqrt(cov_b, f);
    std::vector<double> tmp(size_t(f) * f, 0.0), m(size_t(f) * f, 0.0);
    for (int i = 0; i < f; ++i)
        for (int k = 0; k < f; ++k) {
            double v = s[size_t(i) * f + k];
            if (v == 0.0) continue;
            for (int j = 0; j < f; ++j) tmp[size_t(i) * f + j] += v * cov_a[size_t(k) * f + j];
        }
    for (int i = 0; i < f; ++i)
        for (int k = 0; k < f; ++k) {
            double v = tmp[size_t(i) * f + k];
            if (v == 0.0) continue;
            for (int j = 0; j < f; ++j) m[size_t(i) * f + j] += v * s[size_t(k) * f + j];
        }
    // symmetrize against accumulation noise
    for (int i = 0; i < f; ++i)
        for (int j = i + 1; j < f; ++j) {
            double avg = 0.5 * (m[size_t(i) * f + j] + m[size_t(j) * f + i]);
            m[size_t(i) * f + j] = avg;
            m[size_t(j) * f + i] = avg;
        }
    auto eig = linalg::sym_eig(m, f);
    double tr_sqrt = 0;
    for (double e : eig) tr_sqrt += std::sqrt(std::max(0.0, e));

    return mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
}

// FID-style distance between two image sets through the pooled proxy features.
template <class R>
inline double fid_proxy(const std::vector<TensorT<R>>& set_a, const std::vector<TensorT<R>>& set_b,
                        const PerceptualProxyT<R>& proxy) {
    LAYTON_CHECK(set_a.size() >= 32 && set_b.size() >= 32, "fid_proxy: each set needs >= 32 images");
    auto featurize = [&proxy](const std::vector<TensorT<R>>& set) {
        TensorT<R> f0 = proxy.features(set[0]);
        TensorT<R> out({int(set.size()), int(f0.size())});
        std::copy(f0.data.begin(), f0.data.end(), out.ptr());
        for (size_t i = 1; i < set.size(); ++i) {
            TensorT<R> fi = proxy.features(set[i]);
            std::copy(fi.data.begin(), fi.data.end(), out.ptr() + int64_t(i) * f0.size());
        }
        return out;
    };
    return frechet_distance(featurize(set_a), featurize(set_b));
}

}  // namespace layton
