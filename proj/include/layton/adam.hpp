#pragma once

#include <cmath>
#include <vector>

#include "layton/nn.hpp"

namespace layton {

struct TrainStats {
    bool reached_target = false;
    double final_metric = 0.0;
    std::vector<double> loss_curve;
};

// Cosine decay from lr to lr * final_frac over the run.
inline double cosine_lr(double lr, double final_frac, int it, int iters) {
    double f = 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(it) / double(std::max(1, iters))));
    return lr * (final_frac + (1.0 - final_frac) * f);
}

// Adam with bias correction. beta2 defaults to 0.99 (not the usual 0.999)
// to match the training setup the rest of the pipeline assumes.
template <class R>
struct AdamT {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    int64_t step_count = 0;

    std::vector<TensorT<R>> m, v;

    void reset(const ParamStoreT<R>& ps) {
        step_count = 0;
        m.assign(size_t(ps.size()), TensorT<R>{});
        v.assign(size_t(ps.size()), TensorT<R>{});
        for (int i = 0; i < ps.size(); ++i) {
            if (!ps.at(i).trainable) continue;
            m[size_t(i)] = TensorT<R>::zeros(ps.at(i).value.shape);
            v[size_t(i)] = TensorT<R>::zeros(ps.at(i).value.shape);
        }
    }

    // grads[i] empty => parameter i receives no update (frozen).
    void step(ParamStoreT<R>& ps, const std::vector<TensorT<R>>& grads) {
        if (m.size() != size_t(ps.size())) reset(ps);
        step_count += 1;
        double bc1 = 1.0 - std::pow(beta1, double(step_count));
        double bc2 = 1.0 - std::pow(beta2, double(step_count));
        for (int i = 0; i < ps.size(); ++i) {
            auto& p = ps.at(i);
            if (!p.trainable || grads[size_t(i)].empty()) continue;
            const auto& g = grads[size_t(i)];
            LAYTON_CHECK(g.same_shape(p.value),
                         "adam_step: gradient shape mismatch for " + p.name);
            auto& mi = m[size_t(i)];
            auto& vi = v[size_t(i)];
            for (int64_t j = 0; j < g.size(); ++j) {
                double gj = double(g[j]);
                double mj = beta1 * double(mi[j]) + (1.0 - beta1) * gj;
                double vj = beta2 * double(vi[j]) + (1.0 - beta2) * gj * gj;
                mi[j] = R(mj);
                vi[j] = R(vj);
                p.value[j] -= R(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps));
            }
            if (!p.value.all_finite())
                throw TrainingDivergence("parameter " + p.name + " became non-finite after adam step");
        }
    }
};

}  // namespace layton
