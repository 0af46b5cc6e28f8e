#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "empir/tensor.hpp"

namespace empir {

// Weight / activation bit-widths for one model. 0 means full precision.
struct QuantConfig {
    int weight_bits = 0;
    int act_bits = 0;

    bool full_precision() const { return weight_bits == 0 && act_bits == 0; }

    void validate() const {
        auto check = [](int k, const char* what) {
            if (k < 0 || k > 8)
                throw Error(std::string(what) + " bit-width must be 0 (full precision) or 1..8, got " +
                            std::to_string(k));
        };
        check(weight_bits, "weight");
        check(act_bits, "activation");
    }

    std::string str() const {
        if (full_precision()) return "fp";
        auto one = [](int k) { return k == 0 ? std::string("fp") : std::to_string(k); };
        return "w" + one(weight_bits) + "a" + one(act_bits);
    }

    bool operator==(const QuantConfig&) const = default;
};

// round((2^k-1) x) / (2^k-1) with x in [0,1]. Ties round half away from zero
// (the argument is never negative here, so this is plain std::round).
template <typename T>
T quantize_unit(T x, int k) {
    if (k < 1) throw Error("quantize_unit: k must be >= 1, got " + std::to_string(k));
    if (!(x >= T(0) && x <= T(1)))
        throw Error("quantize_unit: value " + std::to_string(static_cast<double>(x)) +
                    " outside [0,1]; clamp before quantizing");
    T levels = static_cast<T>((1 << k) - 1);
    return std::round(levels * x) / levels;
}

// Activations: clamp to [0,1], then snap to the unit grid elementwise.
template <typename T>
TensorT<T> quantize_activations(const TensorT<T>& a, int k) {
    TensorT<T> out(a.shape());
    T levels = static_cast<T>((1 << k) - 1);
    if (k < 1) throw Error("quantize_activations: k must be >= 1");
    const T* in = a.data();
    T* o = out.data();
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(a.numel()); ++i) {
        T x = std::clamp(in[i], T(0), T(1));
        o[i] = std::round(levels * x) / levels;
    }
    return out;
}

// Straight-through estimator for a clamp-then-round node: the round is
// treated as identity, so the gradient passes wherever the pre-quantization
// value sat inside the clamping domain and is zero where it was clamped.
template <typename T>
T ste_backward(T upstream, T pre_value, T lo, T hi) {
    return (pre_value >= lo && pre_value <= hi) ? upstream : T(0);
}

// Weights: w_k = 2 * quantize_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1.
// The max is taken over the whole tensor (one call per layer weight).
// An all-zero tensor has max|tanh(w)| = 0 and maps to all zeros.
template <typename T>
TensorT<T> quantize_weights(const TensorT<T>& w, int k) {
    if (k < 1) throw Error("quantize_weights: k must be >= 1");
    TensorT<T> out(w.shape());
    const size_t n = w.numel();
    const T* in = w.data();
    T m = T(0);
    for (size_t i = 0; i < n; ++i) m = std::max(m, std::abs(std::tanh(in[i])));
    if (m == T(0)) return out;  // already zero-filled
    T levels = static_cast<T>((1 << k) - 1);
    T* o = out.data();
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        T s = std::tanh(in[i]) / (2 * m) + T(0.5);
        o[i] = 2 * (std::round(levels * s) / levels) - 1;
    }
    return out;
}

// Backward of quantize_weights with round() taken as identity. The
// tanh-normalize chain is differentiated analytically, including the max
// term, which routes an extra contribution to the first element attaining
// max|tanh(w)|.
template <typename T>
TensorT<T> quantize_weights_backward(const TensorT<T>& w, const TensorT<T>& upstream) {
    if (!w.same_shape(upstream))
        throw Error("quantize_weights_backward: shape mismatch " + shape_str(w.shape()) + " vs " +
                    shape_str(upstream.shape()));
    TensorT<T> dw(w.shape());
    const size_t n = w.numel();
    const T* wp = w.data();
    const T* g = upstream.data();

    T m = T(0);
    size_t arg = 0;
    for (size_t i = 0; i < n; ++i) {
        T a = std::abs(std::tanh(wp[i]));
        if (a > m) {
            m = a;
            arg = i;
        }
    }
    if (m == T(0)) return dw;  // constant output, zero gradient

    T dot = T(0);  // sum_i g_i * tanh(w_i), fixed order
    for (size_t i = 0; i < n; ++i) dot += g[i] * std::tanh(wp[i]);

    T* out = dw.data();
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        T t = std::tanh(wp[i]);
        out[i] = g[i] * (1 - t * t) / m;
    }
    T tj = std::tanh(wp[arg]);
    T sgn = tj >= T(0) ? T(1) : T(-1);
    out[arg] -= dot / (m * m) * sgn * (1 - tj * tj);
    return dw;
}

// Smooth surrogate of the weight quantizer (round replaced by identity);
// quantize_weights_backward is its exact derivative. Used by the
// finite-difference oracle.
template <typename T>
TensorT<T> quantize_weights_surrogate(const TensorT<T>& w) {
    TensorT<T> out(w.shape());
    const size_t n = w.numel();
    const T* in = w.data();
    T m = T(0);
    for (size_t i = 0; i < n; ++i) m = std::max(m, std::abs(std::tanh(in[i])));
    if (m == T(0)) return out;
    T* o = out.data();
    for (size_t i = 0; i < n; ++i) o[i] = std::tanh(in[i]) / m;  // 2*(t/(2m)+1/2)-1
    return out;
}

}  // namespace empir
