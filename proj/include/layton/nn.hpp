#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "layton/autograd.hpp"
#include "layton/tensor.hpp"

namespace layton {

template <class R>
struct ParamT {
    std::string name;
    TensorT<R> value;
    bool trainable = true;
};

// Named parameters in insertion order. Names are unique; iteration order is
// what checkpoints and the optimizer rely on for determinism.
template <class R>
class ParamStoreT {
public:
    int add(const std::string& name, TensorT<R> value, bool trainable = true) {
        LAYTON_CHECK(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
        items_.push_back(ParamT<R>{name, std::move(value), trainable});
        index_[name] = int(items_.size()) - 1;
        return int(items_.size()) - 1;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    ParamT<R>& at(int id) { return items_[size_t(id)]; }
    const ParamT<R>& at(int id) const { return items_[size_t(id)]; }
    int size() const { return int(items_.size()); }

    void freeze_all() {
        for (auto& p : items_) p.trainable = false;
    }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& p : items_)
            if (p.trainable) n += p.value.size();
        return n;
    }

    // FNV-1a over raw parameter bytes; used to assert freeze contracts.
    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ULL;
        for (const auto& p : items_) {
            const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p.value.ptr());
            size_t nb = p.value.data.size() * sizeof(R);
            for (size_t i = 0; i < nb; ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
        }
        return h;
    }

    bool all_finite() const {
        for (const auto& p : items_)
            if (!p.value.all_finite()) return false;
        return true;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<ParamT<R>> items_;
    std::unordered_map<std::string, int> index_;
};

// Parameters bound into a tape for one forward/backward pass.
template <class R>
struct BoundT {
    TapeT<R>* tape = nullptr;
    const ParamStoreT<R>* store = nullptr;
    std::vector<int> node_of;

    VarT<R> operator[](int pid) const { return VarT<R>{tape, node_of[size_t(pid)]}; }
};

template <class R>
inline BoundT<R> bind(TapeT<R>& tape, const ParamStoreT<R>& store, bool with_grads = true) {
    BoundT<R> b;
    b.tape = &tape;
    b.store = &store;
    b.node_of.resize(size_t(store.size()));
    for (int i = 0; i < store.size(); ++i)
        b.node_of[size_t(i)] = tape.push(store.at(i).value, with_grads && store.at(i).trainable);
    return b;
}

// Per-parameter gradients after tape.backward(). Trainable parameters get a
// dense (possibly zero) tensor; frozen ones get an empty placeholder.
template <class R>
inline std::vector<TensorT<R>> collect_grads(const BoundT<R>& bound) {
    std::vector<TensorT<R>> out(size_t(bound.store->size()));
    for (int i = 0; i < bound.store->size(); ++i) {
        if (!bound.store->at(i).trainable) continue;
        out[size_t(i)] = bound.tape->grad(bound.node_of[size_t(i)]);
    }
    return out;
}

// Convenience: bind, run f to build a scalar loss, backward, return grads.
template <class R, class F>
inline std::vector<TensorT<R>> grad(const ParamStoreT<R>& store, F&& build_loss) {
    TapeT<R> tape;
    BoundT<R> bound = bind(tape, store);
    VarT<R> loss = build_loss(tape, bound);
    tape.backward(loss.id);
    return collect_grads(bound);
}

// ---------------------------------------------------------------------------
// Layers. Each holds parameter ids into a ParamStore plus static shape info.
// ---------------------------------------------------------------------------

template <class R>
struct LinearT {
    int w = -1, b = -1;
    int in = 0, out = 0;

    void init(ParamStoreT<R>& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
              bool zero_init = false) {
        in = in_dim;
        out = out_dim;
        R stdev = zero_init ? R(0) : R(std::sqrt(2.0 / in_dim));
        w = ps.add(name + ".w", zero_init ? TensorT<R>::zeros({in_dim, out_dim})
                                          : TensorT<R>::randn({in_dim, out_dim}, rng, stdev));
        b = ps.add(name + ".b", TensorT<R>::zeros({out_dim}));
    }

    // x:[M,in] -> [M,out]
    VarT<R> forward(const BoundT<R>& bp, VarT<R> x) const {
        return add_row_bias(matmul(x, bp[w]), bp[b]);
    }
};

template <class R>
struct Conv2dT {
    int w = -1, b = -1;
    int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;

    void init(ParamStoreT<R>& ps, const std::string& name, int in_c, int out_c, int kernel,
              int stride_, int pad_, Rng& rng, bool zero_init = false) {
        in_ch = in_c;
        out_ch = out_c;
        k = kernel;
        stride = stride_;
        pad = pad_;
        R stdev = zero_init ? R(0) : R(std::sqrt(2.0 / (in_c * kernel * kernel)));
        w = ps.add(name + ".w", zero_init ? TensorT<R>::zeros({out_c, in_c, kernel, kernel})
                                          : TensorT<R>::randn({out_c, in_c, kernel, kernel}, rng, stdev));
        b = ps.add(name + ".b", TensorT<R>::zeros({out_c}));
    }

    VarT<R> forward(const BoundT<R>& bp, VarT<R> x) const {
        return conv2d(x, bp[w], bp[b], stride, pad);
    }
};

template <class R>
struct GroupNormT {
    int gamma = -1, beta = -1;
    int channels = 0, groups = 1;

    void init(ParamStoreT<R>& ps, const std::string& name, int c, int g) {
        channels = c;
        groups = g;
        gamma = ps.add(name + ".gamma", TensorT<R>::full({c}, R(1)));
        beta = ps.add(name + ".beta", TensorT<R>::zeros({c}));
    }

    VarT<R> forward(const BoundT<R>& bp, VarT<R> x) const {
        return group_norm(x, bp[gamma], bp[beta], groups);
    }
};

template <class R>
struct LayerNormT {
    int gamma = -1, beta = -1;
    int dim = 0;

    void init(ParamStoreT<R>& ps, const std::string& name, int d) {
        dim = d;
        gamma = ps.add(name + ".gamma", TensorT<R>::full({d}, R(1)));
        beta = ps.add(name + ".beta", TensorT<R>::zeros({d}));
    }

    VarT<R> forward(const BoundT<R>& bp, VarT<R> x) const {
        return layer_norm(x, bp[gamma], bp[beta]);
    }
};

// Sinusoidal timestep features, computed outside the tape.
template <class R>
inline TensorT<R> timestep_embedding(const std::vector<int>& ts, int dim, int t_max) {
    int half = dim / 2;
    TensorT<R> out({int(ts.size()), dim});
    for (size_t i = 0; i < ts.size(); ++i) {
        double tv = double(ts[i]) / double(t_max);
        for (int j = 0; j < half; ++j) {
            double freq = std::pow(1000.0, double(j) / double(half));
            out[int64_t(i) * dim + j] = R(std::sin(tv * freq));
            out[int64_t(i) * dim + half + j] = R(std::cos(tv * freq));
        }
    }
    return out;
}

}  // namespace layton
