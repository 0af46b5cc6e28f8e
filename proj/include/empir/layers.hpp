#pragma once

#include <map>
#include <memory>
#include <optional>
#include <variant>

#include "empir/gemm.hpp"
#include "empir/quant.hpp"
#include "empir/tensor.hpp"

namespace empir {

enum class Padding { Same, Valid };

namespace layer {
struct Conv {
    int kh = 0, kw = 0, oc = 0;
    int stride = 1;
    Padding pad = Padding::Same;
};
struct Dense {
    int out = 0;
};
struct Relu {};
struct MaxPool {
    int h = 0, w = 0;
};
struct AvgPool {
    int h = 0, w = 0;
};
struct BatchNorm {};
struct Softmax {};
}  // namespace layer

using LayerSpec = std::variant<layer::Conv, layer::Dense, layer::Relu, layer::MaxPool,
                               layer::AvgPool, layer::BatchNorm, layer::Softmax>;

template <typename T>
struct NodeIo {
    TensorT<T> out;
    TensorT<T> aux;          // node-specific (im2col matrix, xhat, ...)
    TensorT<T> aux2;         // node-specific (per-channel invstd, ...)
    std::vector<int> iaux;   // node-specific (argmax indices)
};

// Gradient accumulator keyed by parameter name.
template <typename T>
class GradStoreT {
public:
    TensorT<T>& slot(const std::string& name, const std::vector<int>& shape) {
        auto it = grads_.find(name);
        if (it == grads_.end()) it = grads_.emplace(name, TensorT<T>(shape)).first;
        else if (it->second.shape() != shape)
            throw Error("gradient shape mismatch for " + name);
        return it->second;
    }
    const TensorT<T>* find(const std::string& name) const {
        auto it = grads_.find(name);
        return it == grads_.end() ? nullptr : &it->second;
    }
    void clear() { grads_.clear(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }
    size_t size() const { return grads_.size(); }

private:
    std::map<std::string, TensorT<T>> grads_;
};

template <typename T>
struct StateRef {
    std::string name;
    TensorT<T>* tensor;
    bool trainable;
};

// One recorded primitive. Nodes are stateless across evaluations except for
// parameters (and BatchNorm running statistics, updated only when
// training=true); all per-evaluation intermediates live in the caller's
// NodeIo, so a frozen graph can serve concurrent inference.
template <typename T>
class NodeT {
public:
    virtual ~NodeT() = default;
    const std::string& name() const { return name_; }
    void set_name(std::string n) { name_ = std::move(n); }
    virtual std::string kind() const = 0;
    virtual const std::vector<int>& out_shape() const = 0;  // per example
    virtual void forward(const TensorT<T>& in, NodeIo<T>& io, bool training) const = 0;
    virtual TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>& io, const TensorT<T>& dout,
                                GradStoreT<T>* grads) const = 0;
    virtual void collect_state(std::vector<StateRef<T>>& out) {}
    virtual std::unique_ptr<NodeT<T>> clone() const = 0;
    virtual void init_params(Rng& rng) {}

protected:
    std::string name_;
};

namespace detail {

template <typename T>
void check_rank(const TensorT<T>& in, size_t rank, const std::string& who) {
    if (in.rank() != rank)
        throw Error(who + ": expected rank-" + std::to_string(rank) + " input (batch included), got " +
                    shape_str(in.shape()));
}

inline int conv_out_extent(int in, int k, int stride, Padding pad, const std::string& who) {
    if (pad == Padding::Same) return (in + stride - 1) / stride;
    if (in < k) throw Error(who + ": valid padding needs input >= kernel, got " + std::to_string(in) +
                            " < " + std::to_string(k));
    return (in - k) / stride + 1;
}

inline int pad_before(int in, int out, int k, int stride, Padding pad) {
    if (pad == Padding::Valid) return 0;
    int total = std::max((out - 1) * stride + k - in, 0);
    return total / 2;
}

template <typename T>
void add_bias_rows(TensorT<T>& flat_out, const TensorT<T>& bias, size_t rows, size_t cols) {
    T* o = flat_out.data();
    const T* b = bias.data();
#pragma omp parallel for schedule(static)
    for (long long r = 0; r < static_cast<long long>(rows); ++r)
        for (size_t c = 0; c < cols; ++c) o[r * cols + c] += b[c];
}

template <typename T>
void column_sums(const TensorT<T>& flat, size_t rows, size_t cols, TensorT<T>& out_accum) {
    const T* p = flat.data();
    T* o = out_accum.data();
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) o[c] += p[r * cols + c];
}

}  // namespace detail

template <typename T>
class ConvNode : public NodeT<T> {
public:
    ConvNode(const layer::Conv& spec, const std::vector<int>& in_shape, int weight_bits,
             const std::string& who)
        : spec_(spec), weight_bits_(weight_bits) {
        if (spec.kh <= 0 || spec.kw <= 0 || spec.oc <= 0)
            throw Error(who + ": conv extents must be positive");
        if (spec.stride < 1) throw Error(who + ": conv stride must be >= 1");
        if (in_shape.size() != 3)
            throw Error(who + ": conv expects an HxWxC input, got " + shape_str(in_shape));
        ih_ = in_shape[0];
        iw_ = in_shape[1];
        ic_ = in_shape[2];
        oh_ = detail::conv_out_extent(ih_, spec.kh, spec.stride, spec.pad, who);
        ow_ = detail::conv_out_extent(iw_, spec.kw, spec.stride, spec.pad, who);
        pt_ = detail::pad_before(ih_, oh_, spec.kh, spec.stride, spec.pad);
        pl_ = detail::pad_before(iw_, ow_, spec.kw, spec.stride, spec.pad);
        out_shape_ = {oh_, ow_, spec.oc};
        w_ = TensorT<T>({spec.kh * spec.kw * ic_, spec.oc});
        b_ = TensorT<T>({spec.oc});
    }

    std::string kind() const override { return "conv"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void init_params(Rng& rng) override { he_normal_init(w_, spec_.kh * spec_.kw * ic_, rng); }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool) const override {
        detail::check_rank(in, 4, this->name_);
        int batch = in.dim(0);
        const int kk = spec_.kh * spec_.kw * ic_;
        const size_t rows = static_cast<size_t>(batch) * oh_ * ow_;
        io.aux = TensorT<T>({batch * oh_ * ow_, kk});
        im2col(in, io.aux, batch);
        const TensorT<T>& w = quantize_into(io);
        io.out = TensorT<T>({batch, oh_, ow_, spec_.oc});
        gemm_nn(io.aux.data(), w.data(), io.out.data(), static_cast<int>(rows), kk, spec_.oc);
        detail::add_bias_rows(io.out, b_, rows, static_cast<size_t>(spec_.oc));
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>& io, const TensorT<T>& dout,
                        GradStoreT<T>* grads) const override {
        int batch = in.dim(0);
        const int kk = spec_.kh * spec_.kw * ic_;
        const int rows = batch * oh_ * ow_;
        const TensorT<T>& w = effective_weights(io);

        if (grads) {
            detail::column_sums(dout, static_cast<size_t>(rows), static_cast<size_t>(spec_.oc),
                                grads->slot(this->name_ + "/b", b_.shape()));
            TensorT<T> dwq({kk, spec_.oc});
            gemm_tn(io.aux.data(), dout.data(), dwq.data(), kk, rows, spec_.oc);
            TensorT<T> dw = weight_bits_ > 0 ? quantize_weights_backward(w_, dwq) : std::move(dwq);
            TensorT<T>& slot = grads->slot(this->name_ + "/w", w_.shape());
            for (size_t i = 0; i < slot.numel(); ++i) slot[i] += dw[i];
        }

        TensorT<T> dcol({rows, kk});
        gemm_nt(dout.data(), w.data(), dcol.data(), rows, spec_.oc, kk);
        TensorT<T> dx(in.shape());
        col2im(dcol, dx, batch);
        return dx;
    }

    void collect_state(std::vector<StateRef<T>>& out) override {
        out.push_back({this->name_ + "/w", &w_, true});
        out.push_back({this->name_ + "/b", &b_, true});
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<ConvNode>(*this); }

    int weight_bits() const { return weight_bits_; }

private:
    // The quantized weight snapshot lives in the evaluation workspace so a
    // shared graph stays read-only during inference.
    const TensorT<T>& quantize_into(NodeIo<T>& io) const {
        if (weight_bits_ == 0) return w_;
        io.aux2 = quantize_weights(w_, weight_bits_);
        return io.aux2;
    }
    const TensorT<T>& effective_weights(const NodeIo<T>& io) const {
        return weight_bits_ == 0 ? w_ : io.aux2;
    }

    void im2col(const TensorT<T>& in, TensorT<T>& col, int batch) const {
        const T* x = in.data();
        T* c = col.data();
        const int kk = spec_.kh * spec_.kw * ic_;
        const size_t plane = static_cast<size_t>(ih_) * iw_ * ic_;
#pragma omp parallel for schedule(static)
        for (int b = 0; b < batch; ++b) {
            const T* xb = x + b * plane;
            T* cb = c + static_cast<size_t>(b) * oh_ * ow_ * kk;
            for (int oy = 0; oy < oh_; ++oy)
                for (int ox = 0; ox < ow_; ++ox) {
                    T* row = cb + (static_cast<size_t>(oy) * ow_ + ox) * kk;
                    int iy0 = oy * spec_.stride - pt_;
                    int ix0 = ox * spec_.stride - pl_;
                    for (int ky = 0; ky < spec_.kh; ++ky) {
                        int iy = iy0 + ky;
                        T* dst = row + static_cast<size_t>(ky) * spec_.kw * ic_;
                        if (iy < 0 || iy >= ih_) {
                            std::fill(dst, dst + static_cast<size_t>(spec_.kw) * ic_, T(0));
                            continue;
                        }
                        for (int kx = 0; kx < spec_.kw; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= iw_) {
                                std::fill(dst + kx * ic_, dst + (kx + 1) * ic_, T(0));
                            } else {
                                const T* src = xb + (static_cast<size_t>(iy) * iw_ + ix) * ic_;
                                std::copy(src, src + ic_, dst + kx * ic_);
                            }
                        }
                    }
                }
        }
    }

    void col2im(const TensorT<T>& dcol, TensorT<T>& dx, int batch) const {
        const T* c = dcol.data();
        T* x = dx.data();
        const int kk = spec_.kh * spec_.kw * ic_;
        const size_t plane = static_cast<size_t>(ih_) * iw_ * ic_;
#pragma omp parallel for schedule(static)
        for (int b = 0; b < batch; ++b) {
            T* xb = x + b * plane;
            const T* cb = c + static_cast<size_t>(b) * oh_ * ow_ * kk;
            for (int oy = 0; oy < oh_; ++oy)
                for (int ox = 0; ox < ow_; ++ox) {
                    const T* row = cb + (static_cast<size_t>(oy) * ow_ + ox) * kk;
                    int iy0 = oy * spec_.stride - pt_;
                    int ix0 = ox * spec_.stride - pl_;
                    for (int ky = 0; ky < spec_.kh; ++ky) {
                        int iy = iy0 + ky;
                        if (iy < 0 || iy >= ih_) continue;
                        for (int kx = 0; kx < spec_.kw; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= iw_) continue;
                            T* dst = xb + (static_cast<size_t>(iy) * iw_ + ix) * ic_;
                            const T* src = row + (static_cast<size_t>(ky) * spec_.kw + kx) * ic_;
                            for (int ch = 0; ch < ic_; ++ch) dst[ch] += src[ch];
                        }
                    }
                }
        }
    }

    layer::Conv spec_;
    int ih_ = 0, iw_ = 0, ic_ = 0, oh_ = 0, ow_ = 0, pt_ = 0, pl_ = 0;
    int weight_bits_ = 0;
    std::vector<int> out_shape_;
    TensorT<T> w_, b_;
};

template <typename T>
class DenseNode : public NodeT<T> {
public:
    DenseNode(const layer::Dense& spec, const std::vector<int>& in_shape, int weight_bits,
              const std::string& who)
        : weight_bits_(weight_bits) {
        if (spec.out <= 0) throw Error(who + ": dense output extent must be positive");
        in_features_ = static_cast<int>(shape_numel(in_shape));
        out_shape_ = {spec.out};
        w_ = TensorT<T>({in_features_, spec.out});
        b_ = TensorT<T>({spec.out});
    }

    std::string kind() const override { return "dense"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void init_params(Rng& rng) override { he_normal_init(w_, in_features_, rng); }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool) const override {
        int batch = in.dim(0);
        if (static_cast<int>(in.numel()) != batch * in_features_)
            throw Error(this->name_ + ": expected " + std::to_string(in_features_) +
                        " features per example, got input " + shape_str(in.shape()));
        const TensorT<T>& w = quantize_into(io);
        io.out = TensorT<T>({batch, out_shape_[0]});
        gemm_nn(in.data(), w.data(), io.out.data(), batch, in_features_, out_shape_[0]);
        detail::add_bias_rows(io.out, b_, static_cast<size_t>(batch),
                              static_cast<size_t>(out_shape_[0]));
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>& io, const TensorT<T>& dout,
                        GradStoreT<T>* grads) const override {
        int batch = in.dim(0);
        int out_f = out_shape_[0];
        const TensorT<T>& w = effective_weights(io);
        if (grads) {
            detail::column_sums(dout, static_cast<size_t>(batch), static_cast<size_t>(out_f),
                                grads->slot(this->name_ + "/b", b_.shape()));
            TensorT<T> dwq({in_features_, out_f});
            gemm_tn(in.data(), dout.data(), dwq.data(), in_features_, batch, out_f);
            TensorT<T> dw = weight_bits_ > 0 ? quantize_weights_backward(w_, dwq) : std::move(dwq);
            TensorT<T>& slot = grads->slot(this->name_ + "/w", w_.shape());
            for (size_t i = 0; i < slot.numel(); ++i) slot[i] += dw[i];
        }
        TensorT<T> dx(in.shape());
        gemm_nt(dout.data(), w.data(), dx.data(), batch, out_f, in_features_);
        return dx;
    }

    void collect_state(std::vector<StateRef<T>>& out) override {
        out.push_back({this->name_ + "/w", &w_, true});
        out.push_back({this->name_ + "/b", &b_, true});
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<DenseNode>(*this); }

    int weight_bits() const { return weight_bits_; }

private:
    const TensorT<T>& quantize_into(NodeIo<T>& io) const {
        if (weight_bits_ == 0) return w_;
        io.aux2 = quantize_weights(w_, weight_bits_);
        return io.aux2;
    }
    const TensorT<T>& effective_weights(const NodeIo<T>& io) const {
        return weight_bits_ == 0 ? w_ : io.aux2;
    }

    int in_features_ = 0;
    int weight_bits_ = 0;
    std::vector<int> out_shape_;
    TensorT<T> w_, b_;
};

template <typename T>
class ReluNode : public NodeT<T> {
public:
    explicit ReluNode(const std::vector<int>& in_shape) : out_shape_(in_shape) {}
    std::string kind() const override { return "relu"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool) const override {
        io.out = TensorT<T>(in.shape());
        const T* x = in.data();
        T* o = io.out.data();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(in.numel()); ++i)
            o[i] = x[i] > T(0) ? x[i] : T(0);
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>&, const TensorT<T>& dout,
                        GradStoreT<T>*) const override {
        TensorT<T> dx(in.shape());
        const T* x = in.data();
        const T* g = dout.data();
        T* o = dx.data();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(in.numel()); ++i)
            o[i] = x[i] > T(0) ? g[i] : T(0);
        return dx;
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<ReluNode>(*this); }

private:
    std::vector<int> out_shape_;
};

template <typename T>
class PoolNode : public NodeT<T> {
public:
    PoolNode(int h, int w, bool is_max, const std::vector<int>& in_shape, const std::string& who)
        : ph_(h), pw_(w), is_max_(is_max) {
        if (h <= 0 || w <= 0) throw Error(who + ": pool extents must be positive");
        if (in_shape.size() != 3)
            throw Error(who + ": pooling expects an HxWxC input, got " + shape_str(in_shape));
        ih_ = in_shape[0];
        iw_ = in_shape[1];
        c_ = in_shape[2];
        if (ih_ < h || iw_ < w)
            throw Error(who + ": pool window exceeds input " + shape_str(in_shape));
        // stride equals the window; valid truncation
        oh_ = (ih_ - h) / h + 1;
        ow_ = (iw_ - w) / w + 1;
        out_shape_ = {oh_, ow_, c_};
    }

    std::string kind() const override { return is_max_ ? "maxpool" : "avgpool"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool) const override {
        detail::check_rank(in, 4, this->name_);
        int batch = in.dim(0);
        io.out = TensorT<T>({batch, oh_, ow_, c_});
        if (is_max_) io.iaux.assign(io.out.numel(), 0);
        const T* x = in.data();
        T* o = io.out.data();
        const size_t plane = static_cast<size_t>(ih_) * iw_ * c_;
#pragma omp parallel for schedule(static)
        for (int b = 0; b < batch; ++b) {
            for (int oy = 0; oy < oh_; ++oy)
                for (int ox = 0; ox < ow_; ++ox)
                    for (int ch = 0; ch < c_; ++ch) {
                        size_t oidx = ((static_cast<size_t>(b) * oh_ + oy) * ow_ + ox) * c_ + ch;
                        if (is_max_) {
                            T best = -std::numeric_limits<T>::infinity();
                            size_t best_idx = 0;
                            for (int ky = 0; ky < ph_; ++ky)
                                for (int kx = 0; kx < pw_; ++kx) {
                                    size_t idx = b * plane +
                                                 (static_cast<size_t>(oy * ph_ + ky) * iw_ +
                                                  (ox * pw_ + kx)) * c_ + ch;
                                    if (x[idx] > best) {  // strict: ties keep the lowest index
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            o[oidx] = best;
                            io.iaux[oidx] = static_cast<int>(best_idx - b * plane);
                        } else {
                            T sum = T(0);
                            for (int ky = 0; ky < ph_; ++ky)
                                for (int kx = 0; kx < pw_; ++kx)
                                    sum += x[b * plane + (static_cast<size_t>(oy * ph_ + ky) * iw_ +
                                                          (ox * pw_ + kx)) * c_ + ch];
                            o[oidx] = sum / static_cast<T>(ph_ * pw_);
                        }
                    }
        }
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>& io, const TensorT<T>& dout,
                        GradStoreT<T>*) const override {
        int batch = in.dim(0);
        TensorT<T> dx(in.shape());
        const T* g = dout.data();
        T* o = dx.data();
        const size_t plane = static_cast<size_t>(ih_) * iw_ * c_;
        const size_t oplane = static_cast<size_t>(oh_) * ow_ * c_;
#pragma omp parallel for schedule(static)
        for (int b = 0; b < batch; ++b) {
            for (size_t j = 0; j < oplane; ++j) {
                size_t oidx = b * oplane + j;
                if (is_max_) {
                    o[b * plane + io.iaux[oidx]] += g[oidx];
                } else {
                    int ch = static_cast<int>(j % c_);
                    int ox = static_cast<int>((j / c_) % ow_);
                    int oy = static_cast<int>(j / (static_cast<size_t>(c_) * ow_));
                    T share = g[oidx] / static_cast<T>(ph_ * pw_);
                    for (int ky = 0; ky < ph_; ++ky)
                        for (int kx = 0; kx < pw_; ++kx)
                            o[b * plane + (static_cast<size_t>(oy * ph_ + ky) * iw_ +
                                           (ox * pw_ + kx)) * c_ + ch] += share;
                }
            }
        }
        return dx;
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<PoolNode>(*this); }

private:
    int ph_, pw_, ih_ = 0, iw_ = 0, c_ = 0, oh_ = 0, ow_ = 0;
    bool is_max_;
    std::vector<int> out_shape_;
};

// Per-channel normalization over the batch (and spatial dims when present),
// learned scale/shift, running statistics with momentum 0.9, eps 1e-5.
// Running statistics update only when training=true.
template <typename T>
class BatchNormNode : public NodeT<T> {
public:
    explicit BatchNormNode(const std::vector<int>& in_shape) : out_shape_(in_shape) {
        c_ = in_shape.back();
        gamma_ = TensorT<T>({c_});
        beta_ = TensorT<T>({c_});
        running_mean_ = TensorT<T>({c_});
        running_var_ = TensorT<T>({c_});
        gamma_.fill(T(1));
        running_var_.fill(T(1));
    }

    std::string kind() const override { return "batchnorm"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool training) const override {
        const size_t rows = in.numel() / c_;
        io.out = TensorT<T>(in.shape());
        io.aux = TensorT<T>(in.shape());  // xhat
        io.aux2 = TensorT<T>({2, c_});    // row 0: mean used, row 1: invstd used
        io.iaux.assign(1, training ? 1 : 0);
        const T* x = in.data();
        T* mu = io.aux2.data();
        T* invstd = io.aux2.data() + c_;

        if (training) {
            for (int ch = 0; ch < c_; ++ch) {
                T s = T(0);
                for (size_t r = 0; r < rows; ++r) s += x[r * c_ + ch];
                mu[ch] = s / static_cast<T>(rows);
            }
            for (int ch = 0; ch < c_; ++ch) {
                T s = T(0);
                for (size_t r = 0; r < rows; ++r) {
                    T d = x[r * c_ + ch] - mu[ch];
                    s += d * d;
                }
                T var = s / static_cast<T>(rows);
                invstd[ch] = T(1) / std::sqrt(var + kEps);
                running_mean_[ch] = kMomentum * running_mean_[ch] + (1 - kMomentum) * mu[ch];
                running_var_[ch] = kMomentum * running_var_[ch] + (1 - kMomentum) * var;
            }
        } else {
            for (int ch = 0; ch < c_; ++ch) {
                mu[ch] = running_mean_[ch];
                invstd[ch] = T(1) / std::sqrt(running_var_[ch] + kEps);
            }
        }

        T* xh = io.aux.data();
        T* o = io.out.data();
#pragma omp parallel for schedule(static)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            for (int ch = 0; ch < c_; ++ch) {
                size_t i = r * c_ + ch;
                xh[i] = (x[i] - mu[ch]) * invstd[ch];
                o[i] = gamma_[ch] * xh[i] + beta_[ch];
            }
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>& io, const TensorT<T>& dout,
                        GradStoreT<T>* grads) const override {
        const size_t rows = in.numel() / c_;
        const T n = static_cast<T>(rows);
        const T* g = dout.data();
        const T* xh = io.aux.data();
        const T* invstd = io.aux2.data() + c_;
        TensorT<T> dx(in.shape());
        T* o = dx.data();

        std::vector<T> sum_g(c_, T(0)), sum_gxh(c_, T(0));
        for (size_t r = 0; r < rows; ++r)
            for (int ch = 0; ch < c_; ++ch) {
                sum_g[ch] += g[r * c_ + ch];
                sum_gxh[ch] += g[r * c_ + ch] * xh[r * c_ + ch];
            }

        if (grads) {
            TensorT<T>& dgamma = grads->slot(this->name_ + "/gamma", gamma_.shape());
            TensorT<T>& dbeta = grads->slot(this->name_ + "/beta", beta_.shape());
            for (int ch = 0; ch < c_; ++ch) {
                dgamma[ch] += sum_gxh[ch];
                dbeta[ch] += sum_g[ch];
            }
        }

        if (!io.iaux.empty() && io.iaux[0] == 1) {
            // batch statistics were part of the forward; differentiate through them
#pragma omp parallel for schedule(static)
            for (long long r = 0; r < static_cast<long long>(rows); ++r)
                for (int ch = 0; ch < c_; ++ch) {
                    size_t i = r * c_ + ch;
                    o[i] = gamma_[ch] * invstd[ch] / n *
                           (n * g[i] - sum_g[ch] - xh[i] * sum_gxh[ch]);
                }
        } else {
#pragma omp parallel for schedule(static)
            for (long long r = 0; r < static_cast<long long>(rows); ++r)
                for (int ch = 0; ch < c_; ++ch) {
                    size_t i = r * c_ + ch;
                    o[i] = gamma_[ch] * invstd[ch] * g[i];
                }
        }
        return dx;
    }

    void collect_state(std::vector<StateRef<T>>& out) override {
        out.push_back({this->name_ + "/gamma", &gamma_, true});
        out.push_back({this->name_ + "/beta", &beta_, true});
        out.push_back({this->name_ + "/running_mean", &running_mean_, false});
        out.push_back({this->name_ + "/running_var", &running_var_, false});
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<BatchNormNode>(*this); }

private:
    static constexpr T kMomentum = T(0.9);
    static constexpr T kEps = T(1e-5);
    int c_;
    std::vector<int> out_shape_;
    TensorT<T> gamma_, beta_;
    // written only when training=true; training requires exclusive access
    mutable TensorT<T> running_mean_, running_var_;
};

template <typename T>
class SoftmaxNode : public NodeT<T> {
public:
    explicit SoftmaxNode(const std::vector<int>& in_shape) : out_shape_(in_shape) {
        classes_ = in_shape.back();
    }
    std::string kind() const override { return "softmax"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool) const override {
        const size_t rows = in.numel() / classes_;
        io.out = TensorT<T>(in.shape());
        const T* x = in.data();
        T* o = io.out.data();
#pragma omp parallel for schedule(static)
        for (long long r = 0; r < static_cast<long long>(rows); ++r) {
            const T* xr = x + r * classes_;
            T* orow = o + r * classes_;
            T mx = xr[0];
            for (int c = 1; c < classes_; ++c) mx = std::max(mx, xr[c]);
            T sum = T(0);
            for (int c = 0; c < classes_; ++c) {
                orow[c] = std::exp(xr[c] - mx);
                sum += orow[c];
            }
            for (int c = 0; c < classes_; ++c) orow[c] /= sum;
        }
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>& io, const TensorT<T>& dout,
                        GradStoreT<T>*) const override {
        const size_t rows = in.numel() / classes_;
        TensorT<T> dx(in.shape());
        const T* p = io.out.data();
        const T* g = dout.data();
        T* o = dx.data();
#pragma omp parallel for schedule(static)
        for (long long r = 0; r < static_cast<long long>(rows); ++r) {
            const T* pr = p + r * classes_;
            const T* gr = g + r * classes_;
            T* orow = o + r * classes_;
            T dot = T(0);
            for (int c = 0; c < classes_; ++c) dot += gr[c] * pr[c];
            for (int c = 0; c < classes_; ++c) orow[c] = pr[c] * (gr[c] - dot);
        }
        return dx;
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<SoftmaxNode>(*this); }

private:
    int classes_;
    std::vector<int> out_shape_;
};

// Activation quantizer inserted after ReLU by apply_quant: clamp to [0,1],
// snap to the 2^k-level grid, straight-through gradient.
template <typename T>
class ActQuantNode : public NodeT<T> {
public:
    ActQuantNode(int bits, const std::vector<int>& in_shape) : bits_(bits), out_shape_(in_shape) {}
    std::string kind() const override { return "actquant"; }
    const std::vector<int>& out_shape() const override { return out_shape_; }

    void forward(const TensorT<T>& in, NodeIo<T>& io, bool) const override {
        io.out = quantize_activations(in, bits_);
    }

    TensorT<T> backward(const TensorT<T>& in, const NodeIo<T>&, const TensorT<T>& dout,
                        GradStoreT<T>*) const override {
        TensorT<T> dx(in.shape());
        const T* x = in.data();
        const T* g = dout.data();
        T* o = dx.data();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(in.numel()); ++i)
            o[i] = ste_backward(g[i], x[i], T(0), T(1));
        return dx;
    }

    std::unique_ptr<NodeT<T>> clone() const override { return std::make_unique<ActQuantNode>(*this); }
    int bits() const { return bits_; }

private:
    int bits_;
    std::vector<int> out_shape_;
};

// Per-evaluation workspace; reusable across calls.
template <typename T>
struct EvalT {
    TensorT<T> input;
    std::vector<NodeIo<T>> io;
    bool ran = false;
    bool training = false;
};

using Eval = EvalT<float>;
using GradStore = GradStoreT<float>;

// A model: an ordered chain of primitives with named parameters. Built from
// LayerSpecs plus a QuantConfig; weight quantization lives inside Conv/Dense
// nodes and activation quantization is a separate node after each ReLU, so
// the network input and the final logits stay unquantized.
template <typename T>
class GraphT {
public:
    GraphT() = default;

    GraphT(std::vector<int> input_shape, std::vector<LayerSpec> layers, QuantConfig quant,
           uint64_t seed)
        : input_shape_(std::move(input_shape)), specs_(std::move(layers)), quant_(quant),
          seed_(seed) {
        quant_.validate();
        if (specs_.empty()) throw Error("graph needs at least one layer");
        for (int d : input_shape_)
            if (d <= 0) throw Error("graph input extents must be positive");
        std::vector<int> cur = input_shape_;
        std::map<std::string, int> counts;
        auto next_name = [&](const std::string& kind) {
            return kind + std::to_string(++counts[kind]);
        };
        for (const LayerSpec& spec : specs_) {
            std::visit(
                [&](const auto& s) {
                    using S = std::decay_t<decltype(s)>;
                    std::unique_ptr<NodeT<T>> node;
                    if constexpr (std::is_same_v<S, layer::Conv>) {
                        auto nm = next_name("conv");
                        node = std::make_unique<ConvNode<T>>(s, cur, quant_.weight_bits, nm);
                        node->set_name(nm);
                    } else if constexpr (std::is_same_v<S, layer::Dense>) {
                        auto nm = next_name("dense");
                        node = std::make_unique<DenseNode<T>>(s, cur, quant_.weight_bits, nm);
                        node->set_name(nm);
                    } else if constexpr (std::is_same_v<S, layer::Relu>) {
                        node = std::make_unique<ReluNode<T>>(cur);
                        node->set_name(next_name("relu"));
                    } else if constexpr (std::is_same_v<S, layer::MaxPool>) {
                        auto nm = next_name("maxpool");
                        node = std::make_unique<PoolNode<T>>(s.h, s.w, true, cur, nm);
                        node->set_name(nm);
                    } else if constexpr (std::is_same_v<S, layer::AvgPool>) {
                        auto nm = next_name("avgpool");
                        node = std::make_unique<PoolNode<T>>(s.h, s.w, false, cur, nm);
                        node->set_name(nm);
                    } else if constexpr (std::is_same_v<S, layer::BatchNorm>) {
                        node = std::make_unique<BatchNormNode<T>>(cur);
                        node->set_name(next_name("bn"));
                    } else if constexpr (std::is_same_v<S, layer::Softmax>) {
                        node = std::make_unique<SoftmaxNode<T>>(cur);
                        node->set_name(next_name("softmax"));
                    }
                    cur = node->out_shape();
                    nodes_.push_back(std::move(node));
                    if constexpr (std::is_same_v<S, layer::Relu>) {
                        if (quant_.act_bits > 0) {
                            auto aq = std::make_unique<ActQuantNode<T>>(quant_.act_bits, cur);
                            aq->set_name(next_name("actquant"));
                            nodes_.push_back(std::move(aq));
                        }
                    }
                },
                spec);
        }
        Rng rng(seed_);
        for (auto& n : nodes_) n->init_params(rng);
    }

    GraphT(const GraphT& o)
        : input_shape_(o.input_shape_), specs_(o.specs_), quant_(o.quant_), seed_(o.seed_) {
        nodes_.reserve(o.nodes_.size());
        for (const auto& n : o.nodes_) nodes_.push_back(n->clone());
    }
    GraphT& operator=(const GraphT& o) {
        if (this != &o) {
            GraphT tmp(o);
            *this = std::move(tmp);
        }
        return *this;
    }
    GraphT(GraphT&&) noexcept = default;
    GraphT& operator=(GraphT&&) noexcept = default;

    // Test hook: append a custom primitive (used by oracle graphs in tests).
    void add_node(std::unique_ptr<NodeT<T>> n) { nodes_.push_back(std::move(n)); }

    const TensorT<T>& forward(const TensorT<T>& x, EvalT<T>& ev, bool training = false) const {
        if (nodes_.empty()) throw Error("forward on empty graph");
        if (x.rank() != input_shape_.size() + 1)
            throw Error("input rank " + std::to_string(x.rank()) + " does not match declared shape " +
                        shape_str(input_shape_) + " plus batch");
        for (size_t i = 0; i < input_shape_.size(); ++i)
            if (x.dim(i + 1) != input_shape_[i])
                throw Error("input shape " + shape_str(x.shape()) +
                            " does not match declared per-example shape " + shape_str(input_shape_));
        if (!x.all_finite()) throw Error("non-finite values in graph input");
        ev.input = x;
        ev.io.resize(nodes_.size());
        ev.training = training;
        const TensorT<T>* cur = &ev.input;
        for (size_t i = 0; i < nodes_.size(); ++i) {
            nodes_[i]->forward(*cur, ev.io[i], training);
            if (!ev.io[i].out.all_finite())
                throw Error("non-finite values after layer '" + nodes_[i]->name() + "'");
            cur = &ev.io[i].out;
        }
        ev.ran = true;
        return ev.io.back().out;
    }

    // Seeds d(loss)/d(output) at the final node and walks the chain once.
    // Returns d(loss)/d(input); parameter gradients accumulate into grads
    // (skipped entirely when grads is null).
    TensorT<T> backward(EvalT<T>& ev, const TensorT<T>& d_out, GradStoreT<T>* grads) const {
        return backward_range(ev, d_out, static_cast<int>(nodes_.size()) - 1, grads);
    }

    // Seeds the gradient at the input of the final Softmax (the logits).
    TensorT<T> backward_from_logits(EvalT<T>& ev, const TensorT<T>& d_logits,
                                    GradStoreT<T>* grads) const {
        int last = static_cast<int>(nodes_.size()) - 1;
        if (last >= 0 && nodes_[last]->kind() == "softmax")
            return backward_range(ev, d_logits, last - 1, grads);
        return backward_range(ev, d_logits, last, grads);
    }

    const TensorT<T>& logits(const EvalT<T>& ev) const {
        if (!ev.ran) throw Error("logits requested before forward");
        int last = static_cast<int>(nodes_.size()) - 1;
        if (nodes_[last]->kind() == "softmax")
            return last == 0 ? ev.input : ev.io[last - 1].out;
        return ev.io[last].out;
    }

    // Thread-safe inference helper: per-call workspace.
    TensorT<T> probs(const TensorT<T>& x) const {
        EvalT<T> ev;
        forward(x, ev, false);
        return std::move(ev.io.back().out);
    }

    std::vector<StateRef<T>> state() {
        std::vector<StateRef<T>> out;
        for (auto& n : nodes_) n->collect_state(out);
        return out;
    }
    std::vector<StateRef<T>> params() {
        std::vector<StateRef<T>> out;
        for (auto& n : nodes_) n->collect_state(out);
        std::erase_if(out, [](const StateRef<T>& s) { return !s.trainable; });
        return out;
    }

    const std::vector<int>& input_shape() const { return input_shape_; }
    const std::vector<LayerSpec>& layer_specs() const { return specs_; }
    const QuantConfig& quant() const { return quant_; }
    uint64_t seed() const { return seed_; }
    size_t node_count() const { return nodes_.size(); }
    const NodeT<T>& node(size_t i) const { return *nodes_[i]; }
    int num_classes() const { return nodes_.back()->out_shape().back(); }

private:
    TensorT<T> backward_range(EvalT<T>& ev, const TensorT<T>& d_seed, int start,
                              GradStoreT<T>* grads) const {
        if (!ev.ran) throw Error("backward before forward");
        if (ev.io.size() != nodes_.size()) throw Error("evaluation does not belong to this graph");
        TensorT<T> d = d_seed;
        for (int i = start; i >= 0; --i) {
            const TensorT<T>& in = i == 0 ? ev.input : ev.io[i - 1].out;
            if (!d.same_shape(ev.io[i].out))
                throw Error("gradient shape " + shape_str(d.shape()) + " does not match output of '" +
                            nodes_[i]->name() + "'");
            d = nodes_[i]->backward(in, ev.io[i], d, grads);
        }
        return d;
    }

    std::vector<int> input_shape_;
    std::vector<LayerSpec> specs_;
    QuantConfig quant_;
    uint64_t seed_ = 0;
    std::vector<std::unique_ptr<NodeT<T>>> nodes_;
};

using Graph = GraphT<float>;

// Low-precision variant of a graph: same topology and parameter values,
// quantization configured per cfg. A full-precision cfg reproduces the
// original predictions exactly.
template <typename T>
GraphT<T> apply_quant(GraphT<T>& g, QuantConfig cfg) {
    GraphT<T> out(g.input_shape(), g.layer_specs(), cfg, g.seed());
    // copy parameter values by name (the quantized twin keeps latent weights)
    std::map<std::string, const TensorT<T>*> src;
    for (auto& s : g.state()) src[s.name] = s.tensor;
    for (auto& d : out.state()) {
        auto it = src.find(d.name);
        if (it == src.end()) throw Error("apply_quant: missing source state " + d.name);
        *d.tensor = *it->second;
    }
    return out;
}

}  // namespace empir
