#pragma once

// Central finite-difference oracle for gradient checks. Lives in test code
// only; it evaluates the loss through fresh tapes with autodiff disabled, so
// it stays independent of the backward implementation it verifies.

#include <limits>
#include <vector>

#include "layton/autograd.hpp"

namespace fdcheck {

using layton::TapeT;
using layton::TensorT;
using layton::VarT;

template <class R>
struct Result {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

// build_loss: (TapeT<R>&, const std::vector<VarT<R>>&) -> VarT<R>
template <class R, class F>
Result<R> run(std::vector<TensorT<R>> inputs, F&& build_loss, double h0 = 0.0) {
    if (h0 <= 0.0) h0 = std::cbrt(double(std::numeric_limits<R>::epsilon()));
    const double floor_denom = sizeof(R) == 4 ? 0.1 : 1e-3;

    // reverse-mode gradients
    TapeT<R> tape;
    std::vector<VarT<R>> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(layton::input(tape, t, true));
    VarT<R> loss = build_loss(tape, vars);
    tape.backward(loss.id);
    std::vector<TensorT<R>> grads;
    grads.reserve(inputs.size());
    for (auto& v : vars) grads.push_back(tape.grad(v.id));

    auto eval = [&](const std::vector<TensorT<R>>& xs) -> double {
        TapeT<R> t2;
        std::vector<VarT<R>> vs;
        vs.reserve(xs.size());
        for (auto& x : xs) vs.push_back(layton::input(t2, x, false));
        return double(build_loss(t2, vs).val()[0]);
    };

    Result<R> res;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        for (int64_t j = 0; j < inputs[ti].size(); ++j) {
            R saved = inputs[ti][j];
            double h = h0 * std::max(1.0, std::abs(double(saved)));
            inputs[ti][j] = R(double(saved) + h);
            double fp = eval(inputs);
            inputs[ti][j] = R(double(saved) - h);
            double fm = eval(inputs);
            inputs[ti][j] = saved;
            double fd = (fp - fm) / (2.0 * h);
            double ad = double(grads[ti][j]);
            double denom = std::max({std::abs(ad), std::abs(fd), floor_denom});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(ad - fd) / denom);
            res.checked += 1;
        }
    }
    return res;
}

}  // namespace fdcheck
