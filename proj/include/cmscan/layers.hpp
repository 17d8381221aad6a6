#pragma once

#include <string>
#include <vector>

#include "cmscan/ops.hpp"
#include "cmscan/parameter.hpp"

namespace cmscan {

// Stateful layers over batched [B,C,H,W] maps. Each forward records what its
// backward needs; backward returns the input gradient and accumulates into
// parameter grads.

template <typename T>
Tensor<T> slice_item(const Tensor<T>& x, std::size_t b) {
    const std::size_t item = x.numel() / x.dim(0);
    Tensor<T> out(std::vector<std::size_t>(x.shape.begin() + 1, x.shape.end()));
    std::copy(x.ptr() + b * item, x.ptr() + (b + 1) * item, out.ptr());
    return out;
}

template <typename T>
void place_item(Tensor<T>& dst, std::size_t b, const Tensor<T>& item) {
    const std::size_t n = item.numel();
    std::copy(item.ptr(), item.ptr() + n, dst.ptr() + b * n);
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    const std::size_t bsz = parts[0]->dim(0), h = parts[0]->dim(2), w = parts[0]->dim(3);
    std::size_t c_total = 0;
    for (const auto* p : parts) c_total += p->dim(1);
    Tensor<T> out({bsz, c_total, h, w});
    const std::size_t hw = h * w;
    for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t c_off = 0;
        for (const auto* p : parts) {
            const std::size_t c = p->dim(1);
            std::copy(p->ptr() + b * c * hw, p->ptr() + (b + 1) * c * hw,
                      out.ptr() + (b * c_total + c_off) * hw);
            c_off += c;
        }
    }
    return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c_begin, std::size_t c_count) {
    const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({bsz, c_count, h, w});
    const std::size_t hw = h * w;
    for (std::size_t b = 0; b < bsz; ++b)
        std::copy(x.ptr() + (b * c + c_begin) * hw, x.ptr() + (b * c + c_begin + c_count) * hw,
                  out.ptr() + b * c_count * hw);
    return out;
}

// Per-pixel linear map (1x1 projection) applied across channels.
template <typename T>
struct PointwiseLinear {
    Parameter<T> w;  // [Cout, Cin]
    Parameter<T> b;  // [Cout]
    Tensor<T> saved_x;

    void init(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng, double gain = 1.0) {
        Tensor<T> wt({cout, cin});
        kaiming_uniform(wt, cin, gain, rng);
        w = Parameter<T>(name + ".w", std::move(wt));
        b = Parameter<T>(name + ".b", Tensor<T>::zeros({cout}));
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        saved_x = x;
        return apply(x);
    }

    Tensor<T> apply(const Tensor<T>& x) const {
        const std::size_t bsz = x.dim(0), cin = x.dim(1), hw = x.dim(2) * x.dim(3);
        if (cin != w.value.dim(1))
            throw ShapeError("pointwise linear: input " + shape_str(x.shape) + " vs W " +
                             shape_str(w.value.shape));
        const std::size_t cout = w.value.dim(0);
        Tensor<T> y({bsz, cout, x.dim(2), x.dim(3)});
        parallel_for(bsz * cout, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                const std::size_t bi = i / cout, co = i % cout;
                T* yp = y.ptr() + i * hw;
                std::fill(yp, yp + hw, b.value.data[co]);
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const T wv = w.value(co, ci);
                    if (wv == T(0)) continue;
                    const T* xp = x.ptr() + (bi * cin + ci) * hw;
                    for (std::size_t p = 0; p < hw; ++p) yp[p] += wv * xp[p];
                }
            }
        });
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const Tensor<T>& x = saved_x;
        const std::size_t bsz = x.dim(0), cin = x.dim(1), hw = x.dim(2) * x.dim(3);
        const std::size_t cout = w.value.dim(0);
        parallel_for(cout, [&](std::size_t o0, std::size_t o1) {
            for (std::size_t co = o0; co < o1; ++co) {
                double db = 0;
                for (std::size_t bi = 0; bi < bsz; ++bi) {
                    const T* dyp = dy.ptr() + (bi * cout + co) * hw;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T* xp = x.ptr() + (bi * cin + ci) * hw;
                        double dw = 0;
                        for (std::size_t p = 0; p < hw; ++p) dw += double(dyp[p]) * xp[p];
                        w.grad(co, ci) += static_cast<T>(dw);
                    }
                    for (std::size_t p = 0; p < hw; ++p) db += dyp[p];
                }
                b.grad.data[co] += static_cast<T>(db);
            }
        });
        Tensor<T> dx(x.shape);
        parallel_for(bsz * cin, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                const std::size_t bi = i / cin, ci = i % cin;
                T* dxp = dx.ptr() + i * hw;
                for (std::size_t co = 0; co < cout; ++co) {
                    const T wv = w.value(co, ci);
                    if (wv == T(0)) continue;
                    const T* dyp = dy.ptr() + (bi * cout + co) * hw;
                    for (std::size_t p = 0; p < hw; ++p) dxp[p] += wv * dyp[p];
                }
            }
        });
        return dx;
    }
};

// Batched spatial convolution.
template <typename T>
struct Conv2dLayer {
    Parameter<T> w;  // [Cout, Cin/groups, k, k]
    Parameter<T> b;  // [Cout]
    ConvSpec spec;
    Tensor<T> saved_x;

    void init(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, ConvSpec cs,
              Rng& rng, double gain = std::sqrt(2.0)) {
        spec = cs;
        Tensor<T> wt({cout, cin / cs.groups, k, k});
        kaiming_uniform(wt, (cin / cs.groups) * k * k, gain, rng);
        w = Parameter<T>(name + ".w", std::move(wt));
        b = Parameter<T>(name + ".b", Tensor<T>::zeros({cout}));
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        saved_x = x;
        return apply(x);
    }

    Tensor<T> apply(const Tensor<T>& x) const {
        const std::size_t bsz = x.dim(0);
        Tensor<T> first = conv2d(slice_item(x, 0), w.value, &b.value, spec);
        Tensor<T> y({bsz, first.dim(0), first.dim(1), first.dim(2)});
        place_item(y, 0, first);
        for (std::size_t bi = 1; bi < bsz; ++bi)
            place_item(y, bi, conv2d(slice_item(x, bi), w.value, &b.value, spec));
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t bsz = saved_x.dim(0);
        Tensor<T> dx(saved_x.shape);
        for (std::size_t bi = 0; bi < bsz; ++bi) {
            Tensor<T> dxi = conv2d_backward(slice_item(saved_x, bi), w.value, slice_item(dy, bi), spec,
                                            w.grad, &b.grad);
            place_item(dx, bi, dxi);
        }
        return dx;
    }
};

template <typename T>
using BufferRefs = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
struct BatchNorm2dLayer {
    std::string name;
    Parameter<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    BatchNormCache<T> cache;
    Mode saved_mode = Mode::Train;

    void init(const std::string& layer_name, std::size_t c) {
        name = layer_name;
        gamma = Parameter<T>(name + ".gamma", Tensor<T>::ones({c}));
        beta = Parameter<T>(name + ".beta", Tensor<T>::zeros({c}));
        running_mean = Tensor<T>::zeros({c});
        running_var = Tensor<T>::ones({c});
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    void collect_buffers(BufferRefs<T>& out) {
        out.push_back({name + ".running_mean", &running_mean});
        out.push_back({name + ".running_var", &running_var});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        saved_mode = mode;
        return batchnorm2d(x, gamma.value, beta.value, running_mean, running_var, mode, momentum, eps,
                           &cache);
    }

    Tensor<T> apply(const Tensor<T>& x, Mode mode) const {
        Tensor<T> rm = running_mean, rv = running_var;
        return batchnorm2d(x, gamma.value, beta.value, rm, rv, mode, momentum, eps);
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        return batchnorm2d_backward(dy, gamma.value, cache, saved_mode, gamma.grad, beta.grad);
    }
};

// Layernorm over the channel axis at every spatial position.
template <typename T>
struct ChannelLayerNorm {
    Parameter<T> gamma, beta;
    double eps = 1e-6;
    LayerNormCache<T> cache;
    std::vector<std::size_t> saved_shape;

    void init(const std::string& name, std::size_t c) {
        gamma = Parameter<T>(name + ".gamma", Tensor<T>::ones({c}));
        beta = Parameter<T>(name + ".beta", Tensor<T>::zeros({c}));
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        saved_shape = x.shape;
        Tensor<T> rows = to_tokens(x);
        Tensor<T> y = layernorm(rows, gamma.value, beta.value, eps, &cache);
        return from_tokens(y, x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    }

    Tensor<T> apply(const Tensor<T>& x) const {
        Tensor<T> y = layernorm(to_tokens(x), gamma.value, beta.value, eps);
        return from_tokens(y, x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> rows = to_tokens(dy);
        Tensor<T> dx = layernorm_backward(rows, gamma.value, cache, gamma.grad, beta.grad);
        return from_tokens(dx, saved_shape[0], saved_shape[1], saved_shape[2], saved_shape[3]);
    }
};

template <typename T>
struct ActivationLayer {
    Activation kind = Activation::ReLU;
    Tensor<T> saved_x;

    Tensor<T> forward(const Tensor<T>& x) {
        saved_x = x;
        return activation(x, kind);
    }

    Tensor<T> apply(const Tensor<T>& x) const { return activation(x, kind); }

    Tensor<T> backward(const Tensor<T>& dy) { return activation_backward(saved_x, dy, kind); }
};

// Batched bilinear upsampling; factor 1 passes through.
template <typename T>
struct UpsampleLayer {
    std::size_t factor = 1;
    std::size_t in_h = 0, in_w = 0;

    Tensor<T> forward(const Tensor<T>& x) {
        in_h = x.dim(2);
        in_w = x.dim(3);
        return apply(x);
    }

    Tensor<T> apply(const Tensor<T>& x) const {
        if (factor == 1) return x;
        const std::size_t bsz = x.dim(0);
        Tensor<T> first = bilinear_upsample(slice_item(x, 0), factor);
        Tensor<T> y({bsz, first.dim(0), first.dim(1), first.dim(2)});
        place_item(y, 0, first);
        for (std::size_t bi = 1; bi < bsz; ++bi) place_item(y, bi, bilinear_upsample(slice_item(x, bi), factor));
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        if (factor == 1) return dy;
        const std::size_t bsz = dy.dim(0);
        Tensor<T> dx({bsz, dy.dim(1), in_h, in_w});
        for (std::size_t bi = 0; bi < bsz; ++bi)
            place_item(dx, bi, bilinear_upsample_backward(slice_item(dy, bi), in_h, in_w, factor));
        return dx;
    }
};

}  // namespace cmscan
