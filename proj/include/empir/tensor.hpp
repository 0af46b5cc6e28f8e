#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace empir {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(std::span<const int> shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Dense n-dimensional array, row-major. T is float in production code and
// double in the gradient-check test mode.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        size_t n = 1;
        for (int d : shape_) {
            if (d <= 0) throw Error("tensor extent must be positive, got shape " + shape_str(shape_));
            n *= static_cast<size_t>(d);
        }
        data_.assign(n, T(0));
    }

    TensorT(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        size_t n = 1;
        for (int d : shape_) {
            if (d <= 0) throw Error("tensor extent must be positive, got shape " + shape_str(shape_));
            n *= static_cast<size_t>(d);
        }
        if (n != data_.size())
            throw Error("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](size_t i) { return data_[i]; }
    T operator[](size_t i) const { return data_[i]; }

    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    TensorT reshaped(std::vector<int> shape) const {
        TensorT t(std::move(shape), data_);
        return t;
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

inline size_t shape_numel(std::span<const int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

// Seeded random source. mt19937_64 gives a bit-exact stream everywhere; the
// float conversions and the gaussian are spelled out here because the
// std::*_distribution algorithms are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform on [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return gen_() % n; }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Distinct per-example stream for batch-parallel randomness: seed ^ index,
// passed through splitmix64 so adjacent indices decorrelate.
inline uint64_t derive_seed(uint64_t seed, uint64_t index) {
    uint64_t z = (seed ^ index) + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

template <typename T>
void he_normal_init(TensorT<T>& w, int fan_in, Rng& rng) {
    double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(std_dev * rng.normal());
}

}  // namespace empir
