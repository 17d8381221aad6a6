#pragma once

#include <cmath>
#include <cstddef>
#include <type_traits>

#include "cmscan/errors.hpp"
#include "cmscan/parallel.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

enum class Activation { SiLU, ReLU, Softplus };

template <typename T>
inline T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
inline T softplus(T x) {
    // ln(1 + e^x), overflow-safe
    if (x > T(30)) return x;
    return std::log1p(std::exp(x));
}

template <typename T>
inline T activation_scalar(T x, Activation kind) {
    switch (kind) {
        case Activation::SiLU: return x * sigmoid(x);
        case Activation::ReLU: return x > T(0) ? x : T(0);
        case Activation::Softplus: return softplus(x);
    }
    return x;
}

template <typename T>
inline T activation_grad_scalar(T x, Activation kind) {
    switch (kind) {
        case Activation::SiLU: {
            const T s = sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        }
        case Activation::ReLU: return x > T(0) ? T(1) : T(0);
        case Activation::Softplus: return sigmoid(x);
    }
    return T(1);
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    Tensor<T> y = x;
    for (auto& v : y.data) v = activation_scalar(v, kind);
    return y;
}

// dx = dy * f'(x), computed from the saved input.
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& dy, Activation kind) {
    x.require_same_shape(dy, "activation_backward");
    Tensor<T> dx = Tensor<T>::zeros(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
        dx.data[i] = dy.data[i] * activation_grad_scalar(x.data[i], kind);
    return dx;
}

// ---------------------------------------------------------------------------
// linear: y[l,o] = sum_i W[o,i] * x[l,i] + b[o]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> b = nullptr) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: x " + shape_str(x.shape) + " incompatible with W " + shape_str(w.shape));
    const std::size_t rows = x.dim(0), cin = x.dim(1), cout = w.dim(0);
    if (b && b->numel() != cout)
        throw ShapeError("linear: bias " + shape_str(b->shape) + " does not match W " + shape_str(w.shape));
    Tensor<T> y({rows, cout});
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t l = r0; l < r1; ++l) {
            const T* xr = x.ptr() + l * cin;
            T* yr = y.ptr() + l * cout;
            for (std::size_t o = 0; o < cout; ++o) {
                const T* wr = w.ptr() + o * cin;
                T acc = b ? b->data[o] : T(0);
                for (std::size_t i = 0; i < cin; ++i) acc += wr[i] * xr[i];
                yr[o] = acc;
            }
        }
    });
    return y;
}

// Accumulates dW/db, returns dx.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>& dw, std::type_identity_t<Tensor<T>*> db = nullptr) {
    const std::size_t rows = x.dim(0), cin = x.dim(1), cout = w.dim(0);
    if (dy.rank() != 2 || dy.dim(0) != rows || dy.dim(1) != cout)
        throw ShapeError("linear_backward: dy " + shape_str(dy.shape) + " incompatible");
    Tensor<T> dx({rows, cin});
    for (std::size_t l = 0; l < rows; ++l) {
        const T* xr = x.ptr() + l * cin;
        const T* dyr = dy.ptr() + l * cout;
        T* dxr = dx.ptr() + l * cin;
        for (std::size_t o = 0; o < cout; ++o) {
            const T g = dyr[o];
            if (g == T(0)) continue;
            const T* wr = w.ptr() + o * cin;
            T* dwr = dw.ptr() + o * cin;
            for (std::size_t i = 0; i < cin; ++i) {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
            if (db) db->data[o] += g;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation on [Cin,H,W] with zero padding.
//         kernel [Cout, Cin/groups, k, k]; k in {1,3}, stride in {1,2}.
// ---------------------------------------------------------------------------

struct ConvSpec {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t groups = 1;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t pad, std::size_t stride) {
    return (in + 2 * pad - k) / stride + 1;
}

inline void validate_conv(const std::vector<std::size_t>& xs, const std::vector<std::size_t>& ws,
                          const ConvSpec& cs) {
    if (xs.size() != 3 || ws.size() != 4)
        throw ShapeError("conv2d: expected x [Cin,H,W] and kernel [Cout,Cin/g,k,k]");
    const std::size_t k = ws[2];
    if (k != ws[3] || (k != 1 && k != 3))
        throw ConfigError("conv2d: kernel size must be 1 or 3, got " + shape_str(ws));
    if (cs.stride != 1 && cs.stride != 2)
        throw ConfigError("conv2d: stride must be 1 or 2, got " + std::to_string(cs.stride));
    if (cs.groups == 0 || xs[0] % cs.groups != 0)
        throw ConfigError("conv2d: Cin=" + std::to_string(xs[0]) + " not divisible by groups=" +
                          std::to_string(cs.groups));
    if (ws[1] != xs[0] / cs.groups)
        throw ShapeError("conv2d: kernel " + shape_str(ws) + " does not match input " + shape_str(xs) +
                         " with groups=" + std::to_string(cs.groups));
    if (xs[1] + 2 * cs.pad < k || xs[2] + 2 * cs.pad < k)
        throw ShapeError("conv2d: input " + shape_str(xs) + " smaller than kernel");
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> b,
                 const ConvSpec& cs) {
    validate_conv(x.shape, w.shape, cs);
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
    const std::size_t ho = conv_out_size(h, k, cs.pad, cs.stride);
    const std::size_t wo = conv_out_size(wd, k, cs.pad, cs.stride);
    const std::size_t cin_per_g = cin / cs.groups;
    const std::size_t cout_per_g = cout / cs.groups;
    Tensor<T> y({cout, ho, wo});
    parallel_for(cout, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t co = c0; co < c1; ++co) {
            const std::size_t g = co / cout_per_g;
            T* yp = y.ptr() + co * ho * wo;
            const T bias = b ? b->data[co] : T(0);
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    T acc = bias;
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        const T* xp = x.ptr() + (g * cin_per_g + ci) * h * wd;
                        const T* wp = w.ptr() + ((co * cpg + ci) * k) * k;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * cs.stride + ky) - static_cast<std::ptrdiff_t>(cs.pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * cs.stride + kx) - static_cast<std::ptrdiff_t>(cs.pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                acc += wp[ky * k + kx] * xp[iy * wd + ix];
                            }
                        }
                    }
                    yp[oy * wo + ox] = acc;
                }
            }
        }
    });
    return y;
}

// Two disjoint passes keep the result deterministic under threading: dW/db
// are partitioned by output channel, dx by input channel.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          const ConvSpec& cs, Tensor<T>& dw, std::type_identity_t<Tensor<T>*> db) {
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
    const std::size_t ho = dy.dim(1), wo = dy.dim(2);
    const std::size_t cin_per_g = cin / cs.groups;
    const std::size_t cout_per_g = cout / cs.groups;

    parallel_for(cout, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t co = c0; co < c1; ++co) {
            const std::size_t g = co / cout_per_g;
            const T* dyp = dy.ptr() + co * ho * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T gup = dyp[oy * wo + ox];
                    if (gup == T(0)) continue;
                    if (db) db->data[co] += gup;
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        const T* xp = x.ptr() + (g * cin_per_g + ci) * h * wd;
                        T* dwp = dw.ptr() + ((co * cpg + ci) * k) * k;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * cs.stride + ky) - static_cast<std::ptrdiff_t>(cs.pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * cs.stride + kx) - static_cast<std::ptrdiff_t>(cs.pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                dwp[ky * k + kx] += gup * xp[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
    });

    Tensor<T> dx({cin, h, wd});
    parallel_for(cin, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t ci_abs = i0; ci_abs < i1; ++ci_abs) {
            const std::size_t g = ci_abs / cin_per_g;
            const std::size_t ci = ci_abs % cin_per_g;
            T* dxp = dx.ptr() + ci_abs * h * wd;
            for (std::size_t co = g * cout_per_g; co < (g + 1) * cout_per_g; ++co) {
                const T* dyp = dy.ptr() + co * ho * wo;
                const T* wp = w.ptr() + ((co * cpg + ci) * k) * k;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const T gup = dyp[oy * wo + ox];
                        if (gup == T(0)) continue;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * cs.stride + ky) - static_cast<std::ptrdiff_t>(cs.pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * cs.stride + kx) - static_cast<std::ptrdiff_t>(cs.pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                dxp[iy * wd + ix] += gup * wp[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    return dx;
}

// ---------------------------------------------------------------------------
// batchnorm2d on [B,C,H,W]
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

template <typename T>
struct BatchNormCache {
    Tensor<T> xhat;     // normalized input
    Tensor<T> inv_std;  // per channel
    std::size_t count = 0;
};

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, double momentum,
                      double eps, BatchNormCache<T>* cache = nullptr) {
    if (x.rank() != 4) throw ShapeError("batchnorm2d: expected [B,C,H,W], got " + shape_str(x.shape));
    const std::size_t bsz = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
        throw ShapeError("batchnorm2d: affine/stat vectors must have C=" + std::to_string(c) + " entries");
    if (eps <= 0) throw ConfigError("batchnorm2d: eps must be > 0");
    const std::size_t n = bsz * hw;
    if (mode == Mode::Train && n == 1)
        throw NumericError("batchnorm2d: train mode needs B*H*W > 1 (degenerate batch)");

    Tensor<T> y(x.shape);
    if (cache) {
        cache->xhat = Tensor<T>::zeros(x.shape);
        cache->inv_std = Tensor<T>::zeros({c});
        cache->count = n;
    }
    parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ch = c0; ch < c1; ++ch) {
            T mean, var;
            if (mode == Mode::Train) {
                double s = 0;
                for (std::size_t b = 0; b < bsz; ++b) {
                    const T* xp = x.ptr() + (b * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) s += xp[i];
                }
                mean = static_cast<T>(s / n);
                double v = 0;
                for (std::size_t b = 0; b < bsz; ++b) {
                    const T* xp = x.ptr() + (b * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double d = xp[i] - mean;
                        v += d * d;
                    }
                }
                var = static_cast<T>(v / n);
                const T unbiased = static_cast<T>(v / (n - 1));
                running_mean.data[ch] =
                    static_cast<T>((1.0 - momentum) * running_mean.data[ch] + momentum * mean);
                running_var.data[ch] =
                    static_cast<T>((1.0 - momentum) * running_var.data[ch] + momentum * unbiased);
            } else {
                mean = running_mean.data[ch];
                var = running_var.data[ch];
            }
            const T inv_std = T(1) / std::sqrt(var + static_cast<T>(eps));
            if (cache) cache->inv_std.data[ch] = inv_std;
            const T g = gamma.data[ch], bt = beta.data[ch];
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* xp = x.ptr() + (b * c + ch) * hw;
                T* yp = y.ptr() + (b * c + ch) * hw;
                T* xh = cache ? cache->xhat.ptr() + (b * c + ch) * hw : nullptr;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T norm = (xp[i] - mean) * inv_std;
                    if (xh) xh[i] = norm;
                    yp[i] = g * norm + bt;
                }
            }
        }
    });
    return y;
}

// Train-mode adjoint; eval mode is an affine map handled by the same formula
// with the batch-statistic coupling dropped.
template <typename T>
Tensor<T> batchnorm2d_backward(const Tensor<T>& dy, const Tensor<T>& gamma, const BatchNormCache<T>& cache,
                               Mode mode, Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const std::size_t bsz = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    const std::size_t n = cache.count;
    Tensor<T> dx(dy.shape);
    parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ch = c0; ch < c1; ++ch) {
            double sum_dy = 0, sum_dy_xhat = 0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* dyp = dy.ptr() + (b * c + ch) * hw;
                const T* xh = cache.xhat.ptr() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum_dy += dyp[i];
                    sum_dy_xhat += dyp[i] * xh[i];
                }
            }
            dgamma.data[ch] += static_cast<T>(sum_dy_xhat);
            dbeta.data[ch] += static_cast<T>(sum_dy);
            const T g = gamma.data[ch];
            const T inv_std = cache.inv_std.data[ch];
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* dyp = dy.ptr() + (b * c + ch) * hw;
                const T* xh = cache.xhat.ptr() + (b * c + ch) * hw;
                T* dxp = dx.ptr() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    if (mode == Mode::Train) {
                        dxp[i] = g * inv_std *
                                 (dyp[i] - static_cast<T>(sum_dy) / n -
                                  xh[i] * static_cast<T>(sum_dy_xhat) / n);
                    } else {
                        dxp[i] = g * inv_std * dyp[i];
                    }
                }
            }
        }
    });
    return dx;
}

// ---------------------------------------------------------------------------
// layernorm over the last axis of [..., C]
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;
    std::vector<T> inv_std;  // per row
};

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                    LayerNormCache<T>* cache = nullptr) {
    const std::size_t c = x.shape.back();
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layernorm: affine vectors must match last axis C=" + std::to_string(c));
    if (eps <= 0) throw ConfigError("layernorm: eps must be > 0");
    const std::size_t rows = x.numel() / c;
    Tensor<T> y(x.shape);
    if (cache) {
        cache->xhat = Tensor<T>::zeros(x.shape);
        cache->inv_std.assign(rows, T(0));
    }
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
            const T* xp = x.ptr() + r * c;
            T* yp = y.ptr() + r * c;
            double s = 0;
            for (std::size_t i = 0; i < c; ++i) s += xp[i];
            const T mean = static_cast<T>(s / c);
            double v = 0;
            for (std::size_t i = 0; i < c; ++i) {
                const double d = xp[i] - mean;
                v += d * d;
            }
            const T inv_std = T(1) / std::sqrt(static_cast<T>(v / c) + static_cast<T>(eps));
            if (cache) cache->inv_std[r] = inv_std;
            for (std::size_t i = 0; i < c; ++i) {
                const T norm = (xp[i] - mean) * inv_std;
                if (cache) cache->xhat.data[r * c + i] = norm;
                yp[i] = gamma.data[i] * norm + beta.data[i];
            }
        }
    });
    return y;
}

template <typename T>
Tensor<T> layernorm_backward(const Tensor<T>& dy, const Tensor<T>& gamma, const LayerNormCache<T>& cache,
                             Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const std::size_t c = dy.shape.back();
    const std::size_t rows = dy.numel() / c;
    Tensor<T> dx(dy.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* dyp = dy.ptr() + r * c;
        const T* xh = cache.xhat.ptr() + r * c;
        T* dxp = dx.ptr() + r * c;
        const T inv_std = cache.inv_std[r];
        double sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < c; ++i) {
            const T g = dyp[i] * gamma.data[i];
            sum_g += g;
            sum_gx += g * xh[i];
            dgamma.data[i] += dyp[i] * xh[i];
            dbeta.data[i] += dyp[i];
        }
        for (std::size_t i = 0; i < c; ++i) {
            const T g = dyp[i] * gamma.data[i];
            dxp[i] = inv_std * (g - static_cast<T>(sum_g) / c - xh[i] * static_cast<T>(sum_gx) / c);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// bilinear_upsample on [C,H,W] by integer factor, half-pixel centers,
// edge-clamped: src = (dst + 0.5)/f - 0.5
// ---------------------------------------------------------------------------

inline void validate_upsample_factor(std::size_t f) {
    if (f != 2 && f != 4 && f != 8 && f != 16 && f != 32)
        throw ConfigError("bilinear_upsample: factor must be one of {2,4,8,16,32}, got " + std::to_string(f));
}

struct BilinearTap {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets (1 - w1)
};

inline std::vector<BilinearTap> bilinear_taps(std::size_t out, std::size_t in, double scale) {
    std::vector<BilinearTap> taps(out);
    for (std::size_t d = 0; d < out; ++d) {
        double src = (d + 0.5) / scale - 0.5;
        if (src < 0) src = 0;
        if (src > in - 1) src = static_cast<double>(in - 1);
        const std::size_t i0 = static_cast<std::size_t>(src);
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[d] = {i0, i1, src - i0};
    }
    return taps;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t factor) {
    if (x.rank() != 3) throw ShapeError("bilinear_upsample: expected [C,H,W], got " + shape_str(x.shape));
    validate_upsample_factor(factor);
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ho = h * factor, wo = w * factor;
    const auto ty = bilinear_taps(ho, h, static_cast<double>(factor));
    const auto tx = bilinear_taps(wo, w, static_cast<double>(factor));
    Tensor<T> y({c, ho, wo});
    parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ch = c0; ch < c1; ++ch) {
            const T* xp = x.ptr() + ch * h * w;
            T* yp = y.ptr() + ch * ho * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                const auto& ry = ty[oy];
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const auto& rx = tx[ox];
                    const T top = static_cast<T>((1 - rx.w1) * xp[ry.i0 * w + rx.i0] + rx.w1 * xp[ry.i0 * w + rx.i1]);
                    const T bot = static_cast<T>((1 - rx.w1) * xp[ry.i1 * w + rx.i0] + rx.w1 * xp[ry.i1 * w + rx.i1]);
                    yp[oy * wo + ox] = static_cast<T>((1 - ry.w1) * top + ry.w1 * bot);
                }
            }
        }
    });
    return y;
}

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& dy, std::size_t in_h, std::size_t in_w,
                                     std::size_t factor) {
    const std::size_t c = dy.dim(0), ho = dy.dim(1), wo = dy.dim(2);
    const auto ty = bilinear_taps(ho, in_h, static_cast<double>(factor));
    const auto tx = bilinear_taps(wo, in_w, static_cast<double>(factor));
    Tensor<T> dx({c, in_h, in_w});
    parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ch = c0; ch < c1; ++ch) {
            const T* dyp = dy.ptr() + ch * ho * wo;
            T* dxp = dx.ptr() + ch * in_h * in_w;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                const auto& ry = ty[oy];
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const auto& rx = tx[ox];
                    const T g = dyp[oy * wo + ox];
                    dxp[ry.i0 * in_w + rx.i0] += static_cast<T>((1 - ry.w1) * (1 - rx.w1)) * g;
                    dxp[ry.i0 * in_w + rx.i1] += static_cast<T>((1 - ry.w1) * rx.w1) * g;
                    dxp[ry.i1 * in_w + rx.i0] += static_cast<T>(ry.w1 * (1 - rx.w1)) * g;
                    dxp[ry.i1 * in_w + rx.i1] += static_cast<T>(ry.w1 * rx.w1) * g;
                }
            }
        }
    });
    return dx;
}

// ---------------------------------------------------------------------------
// layout helpers between [B,C,H,W] and token rows [B*H*W, C]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("to_tokens: expected [B,C,H,W]");
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> t({b * hw, c});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const T* xp = x.ptr() + (bi * c + ci) * hw;
            for (std::size_t p = 0; p < hw; ++p) t.data[(bi * hw + p) * c + ci] = xp[p];
        }
    return t;
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    Tensor<T> x({b, c, h, w});
    const std::size_t hw = h * w;
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            T* xp = x.ptr() + (bi * c + ci) * hw;
            for (std::size_t p = 0; p < hw; ++p) xp[p] = t.data[(bi * hw + p) * c + ci];
        }
    return x;
}

}  // namespace cmscan
