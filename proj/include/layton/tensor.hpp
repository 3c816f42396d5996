#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "layton/errors.hpp"
#include "layton/rng.hpp"

namespace layton {

// Dense row-major tensor. Shape is a plain vector of extents; everything in
// the library works on these plus flat indexing.
template <class R>
struct TensorT {
    std::vector<int> shape;
    std::vector<R> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)), data(size_t(count(shape)), R(0)) {}
    TensorT(std::vector<int> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        LAYTON_CHECK(int64_t(data.size()) == count(shape), "tensor data does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t size() const { return int64_t(data.size()); }
    bool empty() const { return data.empty(); }
    int dim(int i) const { return shape[size_t(i)]; }
    int rank() const { return int(shape.size()); }

    R* ptr() { return data.data(); }
    const R* ptr() const { return data.data(); }
    R& operator[](int64_t i) { return data[size_t(i)]; }
    const R& operator[](int64_t i) const { return data[size_t(i)]; }

    void fill(R v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(R(0)); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (R v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }

    static TensorT full(std::vector<int> s, R v) {
        TensorT t(std::move(s));
        t.fill(v);
        return t;
    }

    static TensorT randn(std::vector<int> s, Rng& rng, R stdev = R(1)) {
        TensorT t(std::move(s));
        for (auto& v : t.data) v = R(rng.normal() * double(stdev));
        return t;
    }

    static TensorT uniform(std::vector<int> s, Rng& rng, R lo, R hi) {
        TensorT t(std::move(s));
        for (auto& v : t.data) v = R(rng.uniform(double(lo), double(hi)));
        return t;
    }

    template <class R2>
    TensorT<R2> cast() const {
        TensorT<R2> o;
        o.shape = shape;
        o.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) o.data[i] = R2(data[i]);
        return o;
    }
};

template <class R>
inline std::string shape_str(const TensorT<R>& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) s += (i ? "," : "") + std::to_string(t.shape[i]);
    return s + "]";
}

using Tensor = TensorT<float>;
using TensorF64 = TensorT<double>;

}  // namespace layton
