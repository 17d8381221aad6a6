#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cmscan/errors.hpp"
#include "cmscan/ops.hpp"
#include "cmscan/parallel.hpp"
#include "cmscan/parameter.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

// ---------------------------------------------------------------------------
// Directional traversal of the H*W pixel grid
// ---------------------------------------------------------------------------

enum class Direction { RowFwd = 0, ColFwd = 1, RowRev = 2, ColRev = 3 };

struct DirectionalLayout {
    Direction direction;
    std::vector<std::uint32_t> pixel_order;  // bijection on {0..H*W-1}
};

inline DirectionalLayout make_layout(Direction dir, std::size_t h, std::size_t w) {
    DirectionalLayout lay;
    lay.direction = dir;
    lay.pixel_order.resize(h * w);
    switch (dir) {
        case Direction::RowFwd:
        case Direction::RowRev:
            for (std::size_t p = 0; p < h * w; ++p) lay.pixel_order[p] = static_cast<std::uint32_t>(p);
            break;
        case Direction::ColFwd:
        case Direction::ColRev: {
            std::size_t k = 0;
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t y = 0; y < h; ++y) lay.pixel_order[k++] = static_cast<std::uint32_t>(y * w + x);
            break;
        }
    }
    if (dir == Direction::RowRev || dir == Direction::ColRev)
        std::reverse(lay.pixel_order.begin(), lay.pixel_order.end());
    return lay;
}

inline std::array<DirectionalLayout, 4> make_layouts(std::size_t h, std::size_t w) {
    return {make_layout(Direction::RowFwd, h, w), make_layout(Direction::ColFwd, h, w),
            make_layout(Direction::RowRev, h, w), make_layout(Direction::ColRev, h, w)};
}

// ---------------------------------------------------------------------------
// Cross-modal token sequence: per traversed pixel, the RGB token first,
// the thermal token second. tokens is [J=2*H*W, C].
// ---------------------------------------------------------------------------

template <typename T>
struct InterleavedSequence {
    Tensor<T> tokens;

    static constexpr bool is_rgb_index(std::size_t j) { return (j % 2) == 0; }
    std::size_t length() const { return tokens.dim(0); }
    std::size_t channels() const { return tokens.dim(1); }
};

template <typename T>
InterleavedSequence<T> build_interleaved_sequence(const Tensor<T>& f_rgb, const Tensor<T>& f_th,
                                                  const DirectionalLayout& lay) {
    f_rgb.require_same_shape(f_th, "build_interleaved_sequence");
    if (f_rgb.rank() != 3) throw ShapeError("build_interleaved_sequence: expected [C,H,W]");
    const std::size_t c = f_rgb.dim(0), hw = f_rgb.dim(1) * f_rgb.dim(2);
    InterleavedSequence<T> seq;
    seq.tokens = Tensor<T>({2 * hw, c});
    for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t pix = lay.pixel_order[k];
        T* r_row = seq.tokens.ptr() + (2 * k) * c;
        T* t_row = seq.tokens.ptr() + (2 * k + 1) * c;
        for (std::size_t ci = 0; ci < c; ++ci) {
            r_row[ci] = f_rgb.data[ci * hw + pix];
            t_row[ci] = f_th.data[ci * hw + pix];
        }
    }
    return seq;
}

template <typename T>
std::array<InterleavedSequence<T>, 4> build_directional_sequences(const Tensor<T>& f_rgb,
                                                                  const Tensor<T>& f_th) {
    const auto lays = make_layouts(f_rgb.dim(1), f_rgb.dim(2));
    return {build_interleaved_sequence(f_rgb, f_th, lays[0]),
            build_interleaved_sequence(f_rgb, f_th, lays[1]),
            build_interleaved_sequence(f_rgb, f_th, lays[2]),
            build_interleaved_sequence(f_rgb, f_th, lays[3])};
}

// ---------------------------------------------------------------------------
// Per-direction state-space parameters
// ---------------------------------------------------------------------------

struct SsmConfig {
    std::size_t state_dim = 16;    // N
    std::size_t dt_rank = 0;       // 0 = max(1, C/16)
    bool delta_softplus = true;
    bool strict_interleave = false;  // single-chain alternative recurrence
    bool parallel_scan = false;      // associative-scan forward path

    std::size_t resolved_dt_rank(std::size_t c) const {
        return dt_rank ? dt_rank : std::max<std::size_t>(1, c / 16);
    }
};

template <typename T>
struct SsmDirectionParams {
    Parameter<T> a_log;      // [C,N], A = -exp(a_log)
    Parameter<T> skip;       // D, [C]
    Parameter<T> w_b;        // [N,C]
    Parameter<T> w_c;        // [N,C]
    Parameter<T> w_dt_down;  // [d_rank,C]
    Parameter<T> w_dt_up;    // [C,d_rank]
    Parameter<T> dt_bias;    // [C]

    std::size_t channels() const { return a_log.value.dim(0); }
    std::size_t state_dim() const { return a_log.value.dim(1); }

    void init(const std::string& prefix, std::size_t c, std::size_t n, std::size_t d_rank, Rng& rng) {
        Tensor<T> al({c, n});
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ni = 0; ni < n; ++ni) al(ci, ni) = static_cast<T>(std::log(double(ni + 1)));
        a_log = Parameter<T>(prefix + ".a_log", std::move(al));
        skip = Parameter<T>(prefix + ".skip", Tensor<T>::ones({c}));

        Tensor<T> wb({n, c}), wc({n, c}), wdd({d_rank, c}), wdu({c, d_rank});
        kaiming_uniform(wb, c, 1.0, rng);
        kaiming_uniform(wc, c, 1.0, rng);
        kaiming_uniform(wdd, c, 1.0, rng);
        kaiming_uniform(wdu, d_rank, 1.0, rng);
        w_b = Parameter<T>(prefix + ".w_b", std::move(wb));
        w_c = Parameter<T>(prefix + ".w_c", std::move(wc));
        w_dt_down = Parameter<T>(prefix + ".w_dt_down", std::move(wdd));
        w_dt_up = Parameter<T>(prefix + ".w_dt_up", std::move(wdu));

        // softplus(dt_bias) lands in [1e-3, 0.1] so exp(delta*A) starts well
        // inside (0,1)
        Tensor<T> bias({c});
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
            bias.data[ci] = static_cast<T>(std::log(std::expm1(dt)));
        }
        dt_bias = Parameter<T>(prefix + ".dt_bias", std::move(bias));
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&a_log);
        out.push_back(&skip);
        out.push_back(&w_b);
        out.push_back(&w_c);
        out.push_back(&w_dt_down);
        out.push_back(&w_dt_up);
        out.push_back(&dt_bias);
    }

    Tensor<T> a_matrix() const {
        Tensor<T> a(a_log.value.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] = -std::exp(a_log.value.data[i]);
        return a;
    }
};

// ---------------------------------------------------------------------------
// Parameter projection (per token): B, C from single linear maps, delta from
// a low-rank two-layer map plus bias, then softplus.
// ---------------------------------------------------------------------------

template <typename T>
struct ProjectedParams {
    Tensor<T> b;           // [J,N]
    Tensor<T> c;           // [J,N]
    Tensor<T> delta;       // [J,C], positive when softplus is on
    Tensor<T> delta_pre;   // [J,C]
    Tensor<T> delta_low;   // [J,d_rank]
    bool softplus_applied = true;
};

template <typename T>
ProjectedParams<T> project_parameters(const InterleavedSequence<T>& seq, const SsmDirectionParams<T>& p,
                                      bool delta_softplus) {
    ProjectedParams<T> out;
    out.b = linear(seq.tokens, p.w_b.value);
    out.c = linear(seq.tokens, p.w_c.value);
    out.delta_low = linear(seq.tokens, p.w_dt_down.value);
    out.delta_pre = linear(out.delta_low, p.w_dt_up.value, &p.dt_bias.value);
    out.delta = delta_softplus ? activation(out.delta_pre, Activation::Softplus) : out.delta_pre;
    out.softplus_applied = delta_softplus;
    return out;
}

// ---------------------------------------------------------------------------
// Discretization for one token: Abar[c,n] = exp(delta[c]*A[c,n]),
// Bbar[c,n] = delta[c]*B[n].
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& a, const Tensor<T>& b_j, const Tensor<T>& delta_j) {
    const std::size_t c = a.dim(0), n = a.dim(1);
    if (b_j.numel() != n || delta_j.numel() != c)
        throw ShapeError("discretize: B_j must have N entries and delta_j C entries");
    Tensor<T> abar({c, n}), bbar({c, n});
    for (std::size_t ci = 0; ci < c; ++ci) {
        const T d = delta_j.data[ci];
        if (!(d > T(0))) throw NumericError("discretize: delta must be > 0");
        for (std::size_t ni = 0; ni < n; ++ni) {
            const T e = std::exp(d * a(ci, ni));
            if (!std::isfinite(e)) throw NumericError("discretize: non-finite exp(delta*A)");
            abar(ci, ni) = e;
            bbar(ci, ni) = d * b_j.data[ni];
        }
    }
    return {std::move(abar), std::move(bbar)};
}

// ---------------------------------------------------------------------------
// Cross-modal recurrence. Both chains read the *other* chain's previous
// state: rbar_k = Abar_r (.) tbar_{k-1} + Bbar_r * r_k, and symmetrically.
// Outputs are [HW, C].
// ---------------------------------------------------------------------------

template <typename T>
struct ScanState {
    Tensor<T> h_r;  // [C,N]
    Tensor<T> h_t;  // [C,N]

    ScanState(std::size_t c, std::size_t n) : h_r({c, n}), h_t({c, n}) {}
};

template <typename T>
struct ScanOutputs {
    Tensor<T> r;  // [HW,C]
    Tensor<T> t;  // [HW,C]
};

namespace detail {

// One channel's sequential sweep over the swapped pair of chains.
// If state_trace is non-null it receives 2*N values per step (h_r, h_t after
// the step), starting at step `k0`.
template <typename T>
void scan_channel_swapped(const Tensor<T>& tokens, const ProjectedParams<T>& pp, const T* a_row,
                          T skip, std::size_t ci, std::size_t c, std::size_t n, std::size_t k0,
                          std::size_t k1, T* h_r, T* h_t, Tensor<T>* out_r, Tensor<T>* out_t,
                          T* state_trace) {
    const std::size_t nn = n;
    std::vector<T> hr_new(nn), ht_new(nn);
    for (std::size_t k = k0; k < k1; ++k) {
        const std::size_t jr = 2 * k, jt = 2 * k + 1;
        const T xr = tokens.data[jr * c + ci];
        const T xt = tokens.data[jt * c + ci];
        const T dr = pp.delta.data[jr * c + ci];
        const T dt = pp.delta.data[jt * c + ci];
        const T* br = pp.b.ptr() + jr * nn;
        const T* bt = pp.b.ptr() + jt * nn;
        const T* cr = pp.c.ptr() + jr * nn;
        const T* ct = pp.c.ptr() + jt * nn;
        T acc_r = 0, acc_t = 0;
        for (std::size_t ni = 0; ni < nn; ++ni) {
            const T ar = std::exp(dr * a_row[ni]);
            const T at = std::exp(dt * a_row[ni]);
            hr_new[ni] = ar * h_t[ni] + dr * br[ni] * xr;
            ht_new[ni] = at * h_r[ni] + dt * bt[ni] * xt;
            acc_r += cr[ni] * hr_new[ni];
            acc_t += ct[ni] * ht_new[ni];
        }
        for (std::size_t ni = 0; ni < nn; ++ni) {
            h_r[ni] = hr_new[ni];
            h_t[ni] = ht_new[ni];
        }
        if (out_r) out_r->data[k * c + ci] = acc_r + skip * xr;
        if (out_t) out_t->data[k * c + ci] = acc_t + skip * xt;
        if (state_trace) {
            T* tr = state_trace + (k - k0) * 2 * nn;
            for (std::size_t ni = 0; ni < nn; ++ni) {
                tr[ni] = h_r[ni];
                tr[nn + ni] = h_t[ni];
            }
        }
    }
}

// Single chain over the full interleaved sequence (the literal scanning
// narrative): h_j = Abar_j (.) h_{j-1} + Bbar_j * x_j.
template <typename T>
void scan_channel_strict(const Tensor<T>& tokens, const ProjectedParams<T>& pp, const T* a_row, T skip,
                         std::size_t ci, std::size_t c, std::size_t n, std::size_t j0, std::size_t j1,
                         T* h, Tensor<T>* out_r, Tensor<T>* out_t, T* state_trace) {
    for (std::size_t j = j0; j < j1; ++j) {
        const T x = tokens.data[j * c + ci];
        const T d = pp.delta.data[j * c + ci];
        const T* bj = pp.b.ptr() + j * n;
        const T* cj = pp.c.ptr() + j * n;
        T acc = 0;
        for (std::size_t ni = 0; ni < n; ++ni) {
            const T ab = std::exp(d * a_row[ni]);
            h[ni] = ab * h[ni] + d * bj[ni] * x;
            acc += cj[ni] * h[ni];
        }
        const T y = acc + skip * x;
        if (j % 2 == 0) {
            if (out_r) out_r->data[(j / 2) * c + ci] = y;
        } else {
            if (out_t) out_t->data[(j / 2) * c + ci] = y;
        }
        if (state_trace) {
            T* tr = state_trace + (j - j0) * n;
            for (std::size_t ni = 0; ni < n; ++ni) tr[ni] = h[ni];
        }
    }
}

}  // namespace detail

template <typename T>
ScanOutputs<T> cross_modal_recurrence_seq(const InterleavedSequence<T>& seq, const ProjectedParams<T>& pp,
                                          const Tensor<T>& a, const Tensor<T>& skip,
                                          bool strict_interleave = false) {
    const std::size_t j = seq.length(), c = seq.channels(), n = a.dim(1), hw = j / 2;
    ScanOutputs<T> out{Tensor<T>({hw, c}), Tensor<T>({hw, c})};
    parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        std::vector<T> hr(n), ht(n);
        for (std::size_t ci = c0; ci < c1; ++ci) {
            std::fill(hr.begin(), hr.end(), T(0));
            std::fill(ht.begin(), ht.end(), T(0));
            const T* a_row = a.ptr() + ci * n;
            if (strict_interleave) {
                detail::scan_channel_strict(seq.tokens, pp, a_row, skip.data[ci], ci, c, n, 0, j,
                                            hr.data(), &out.r, &out.t, static_cast<T*>(nullptr));
            } else {
                detail::scan_channel_swapped(seq.tokens, pp, a_row, skip.data[ci], ci, c, n, 0, hw,
                                             hr.data(), ht.data(), &out.r, &out.t,
                                             static_cast<T*>(nullptr));
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Associative-scan form. The joint state (rbar, tbar) evolves by affine maps
// whose linear part is either block-diagonal (Straight) or purely
// off-diagonal (Swapped); that family is closed under composition.
// ---------------------------------------------------------------------------

enum class PairParity { Straight, Swapped };

template <typename T>
struct AffinePairElement {
    PairParity parity = PairParity::Straight;
    std::vector<T> scale_r, scale_t;    // length N
    std::vector<T> offset_r, offset_t;  // length N

    static AffinePairElement identity(std::size_t n) {
        AffinePairElement e;
        e.parity = PairParity::Straight;
        e.scale_r.assign(n, T(1));
        e.scale_t.assign(n, T(1));
        e.offset_r.assign(n, T(0));
        e.offset_t.assign(n, T(0));
        return e;
    }

    // Map (r, t) -> (r', t').
    void apply(const T* r, const T* t, T* r_out, T* t_out) const {
        const std::size_t n = scale_r.size();
        if (parity == PairParity::Straight) {
            for (std::size_t i = 0; i < n; ++i) {
                r_out[i] = scale_r[i] * r[i] + offset_r[i];
                t_out[i] = scale_t[i] * t[i] + offset_t[i];
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                r_out[i] = scale_r[i] * t[i] + offset_r[i];
                t_out[i] = scale_t[i] * r[i] + offset_t[i];
            }
        }
    }
};

// compose(first, second) applies `first`, then `second`.
template <typename T>
AffinePairElement<T> compose(const AffinePairElement<T>& first, const AffinePairElement<T>& second) {
    const std::size_t n = first.scale_r.size();
    AffinePairElement<T> out;
    const bool swap2 = second.parity == PairParity::Swapped;
    out.parity = (first.parity == PairParity::Swapped) != swap2 ? PairParity::Swapped : PairParity::Straight;
    out.scale_r.resize(n);
    out.scale_t.resize(n);
    out.offset_r.resize(n);
    out.offset_t.resize(n);
    const std::vector<T>& sr1 = swap2 ? first.scale_t : first.scale_r;
    const std::vector<T>& or1 = swap2 ? first.offset_t : first.offset_r;
    const std::vector<T>& st1 = swap2 ? first.scale_r : first.scale_t;
    const std::vector<T>& ot1 = swap2 ? first.offset_r : first.offset_t;
    for (std::size_t i = 0; i < n; ++i) {
        out.scale_r[i] = second.scale_r[i] * sr1[i];
        out.offset_r[i] = second.scale_r[i] * or1[i] + second.offset_r[i];
        out.scale_t[i] = second.scale_t[i] * st1[i];
        out.offset_t[i] = second.scale_t[i] * ot1[i] + second.offset_t[i];
    }
    return out;
}

// Plain per-chain affine step for the single-chain (strict interleave) mode.
template <typename T>
struct AffineElement {
    std::vector<T> scale, offset;

    static AffineElement identity(std::size_t n) {
        AffineElement e;
        e.scale.assign(n, T(1));
        e.offset.assign(n, T(0));
        return e;
    }
};

template <typename T>
AffineElement<T> compose(const AffineElement<T>& first, const AffineElement<T>& second) {
    const std::size_t n = first.scale.size();
    AffineElement<T> out;
    out.scale.resize(n);
    out.offset.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.scale[i] = second.scale[i] * first.scale[i];
        out.offset[i] = second.scale[i] * first.offset[i] + second.offset[i];
    }
    return out;
}

namespace detail {

// Work-efficient (up-sweep/down-sweep) inclusive scan over any associative
// element with compose(first, second) and E::identity(n). On return,
// prefix[k] is the composition of steps 0..k in sequence order.
template <typename E>
void blelloch_scan(std::vector<E>& prefix, const std::vector<E>& els, std::size_t n_state) {
    const std::size_t n = els.size();
    std::size_t m = 1;
    while (m < n) m <<= 1;
    std::vector<E> work(m, E::identity(n_state));
    for (std::size_t i = 0; i < n; ++i) work[i] = els[i];

    for (std::size_t d = 1; d < m; d <<= 1)
        for (std::size_t i = 0; i + 2 * d <= m; i += 2 * d)
            work[i + 2 * d - 1] = compose(work[i + d - 1], work[i + 2 * d - 1]);

    work[m - 1] = E::identity(n_state);
    for (std::size_t d = m >> 1; d >= 1; d >>= 1) {
        for (std::size_t i = 0; i + 2 * d <= m; i += 2 * d) {
            E left_total = work[i + d - 1];
            work[i + d - 1] = work[i + 2 * d - 1];
            work[i + 2 * d - 1] = compose(work[i + 2 * d - 1], left_total);
        }
        if (d == 1) break;
    }

    prefix.resize(n);
    for (std::size_t i = 0; i < n; ++i) prefix[i] = compose(work[i], els[i]);
}

}  // namespace detail

template <typename T>
ScanOutputs<T> cross_modal_recurrence_par(const InterleavedSequence<T>& seq, const ProjectedParams<T>& pp,
                                          const Tensor<T>& a, const Tensor<T>& skip,
                                          bool strict_interleave = false) {
    const std::size_t j = seq.length(), c = seq.channels(), n = a.dim(1), hw = j / 2;
    ScanOutputs<T> out{Tensor<T>({hw, c}), Tensor<T>({hw, c})};
    parallel_for(c, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ci = c0; ci < c1; ++ci) {
            const T* a_row = a.ptr() + ci * n;
            if (strict_interleave) {
                // Single chain over all J interleaved steps.
                std::vector<AffineElement<T>> els(j), prefix;
                for (std::size_t jj = 0; jj < j; ++jj) {
                    const T x = seq.tokens.data[jj * c + ci];
                    const T d = pp.delta.data[jj * c + ci];
                    AffineElement<T>& e = els[jj];
                    e.scale.resize(n);
                    e.offset.resize(n);
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        e.scale[ni] = std::exp(d * a_row[ni]);
                        e.offset[ni] = d * pp.b.data[jj * n + ni] * x;
                    }
                }
                detail::blelloch_scan(prefix, els, n);
                for (std::size_t jj = 0; jj < j; ++jj) {
                    const T x = seq.tokens.data[jj * c + ci];
                    const T* cj = pp.c.ptr() + jj * n;
                    T acc = 0;
                    // Zero initial state: only the offsets survive.
                    for (std::size_t ni = 0; ni < n; ++ni) acc += cj[ni] * prefix[jj].offset[ni];
                    const T y = acc + skip.data[ci] * x;
                    if (jj % 2 == 0)
                        out.r.data[(jj / 2) * c + ci] = y;
                    else
                        out.t.data[(jj / 2) * c + ci] = y;
                }
            } else {
                std::vector<AffinePairElement<T>> els(hw), prefix;
                for (std::size_t k = 0; k < hw; ++k) {
                    const std::size_t jr = 2 * k, jt = 2 * k + 1;
                    const T xr = seq.tokens.data[jr * c + ci];
                    const T xt = seq.tokens.data[jt * c + ci];
                    const T dr = pp.delta.data[jr * c + ci];
                    const T dt = pp.delta.data[jt * c + ci];
                    AffinePairElement<T>& e = els[k];
                    e.parity = PairParity::Swapped;
                    e.scale_r.resize(n);
                    e.scale_t.resize(n);
                    e.offset_r.resize(n);
                    e.offset_t.resize(n);
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        e.scale_r[ni] = std::exp(dr * a_row[ni]);
                        e.scale_t[ni] = std::exp(dt * a_row[ni]);
                        e.offset_r[ni] = dr * pp.b.data[jr * n + ni] * xr;
                        e.offset_t[ni] = dt * pp.b.data[jt * n + ni] * xt;
                    }
                }
                detail::blelloch_scan(prefix, els, n);
                for (std::size_t k = 0; k < hw; ++k) {
                    const std::size_t jr = 2 * k, jt = 2 * k + 1;
                    const T xr = seq.tokens.data[jr * c + ci];
                    const T xt = seq.tokens.data[jt * c + ci];
                    const T* cr = pp.c.ptr() + jr * n;
                    const T* ct = pp.c.ptr() + jt * n;
                    T acc_r = 0, acc_t = 0;
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        acc_r += cr[ni] * prefix[k].offset_r[ni];
                        acc_t += ct[ni] * prefix[k].offset_t[ni];
                    }
                    out.r.data[k * c + ci] = acc_r + skip.data[ci] * xr;
                    out.t.data[k * c + ci] = acc_t + skip.data[ci] * xt;
                }
            }
        }
    });
    return out;
}

namespace detail {

inline std::size_t scan_segment_len(std::size_t steps) {
    const auto s = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(steps))));
    return std::clamp<std::size_t>(s, 4, 512);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scan merging: un-permute every direction's outputs back to row-major pixel
// order and sum.
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Tensor<T>, Tensor<T>> merge_scans(const std::array<ScanOutputs<T>, 4>& dir_outputs,
                                            const std::array<DirectionalLayout, 4>& layouts,
                                            std::size_t c, std::size_t h, std::size_t w) {
    Tensor<T> f_r({c, h, w}), f_t({c, h, w});
    const std::size_t hw = h * w;
    for (std::size_t d = 0; d < 4; ++d) {
        const auto& lay = layouts[d];
        const auto& o = dir_outputs[d];
        for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t pix = lay.pixel_order[k];
            const T* r_row = o.r.ptr() + k * c;
            const T* t_row = o.t.ptr() + k * c;
            for (std::size_t ci = 0; ci < c; ++ci) {
                f_r.data[ci * hw + pix] += r_row[ci];
                f_t.data[ci * hw + pix] += t_row[ci];
            }
        }
    }
    return {std::move(f_r), std::move(f_t)};
}

// ---------------------------------------------------------------------------
// Whole CM-SS2D block: sequences -> projection -> discretized recurrence ->
// merge, with a recorded forward for the exact reverse pass. Hidden states
// are not stored; the backward rebuilds them from sqrt-spaced checkpoints.
// ---------------------------------------------------------------------------

template <typename T>
struct CmSs2dSaved {
    struct DirState {
        InterleavedSequence<T> seq;
        ProjectedParams<T> proj;
        std::vector<T> checkpoints;  // per segment start: [C, 2N] (or [C, N] strict)
        std::size_t seg_len = 0;
        std::size_t num_segments = 0;
    };

    std::size_t c = 0, h = 0, w = 0, n = 0;
    bool strict = false;
    std::array<DirState, 4> dirs;
    bool valid = false;
};

template <typename T>
using SsmDirectionArray = std::array<SsmDirectionParams<T>, 4>;

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cm_ss2d_forward(const Tensor<T>& f_rgb, const Tensor<T>& f_th,
                                                SsmDirectionArray<T>& dirs, const SsmConfig& cfg,
                                                CmSs2dSaved<T>* saved = nullptr) {
    f_rgb.require_same_shape(f_th, "cm_ss2d_forward");
    const std::size_t c = f_rgb.dim(0), h = f_rgb.dim(1), w = f_rgb.dim(2);
    const std::size_t hw = h * w, n = dirs[0].state_dim();
    const auto layouts = make_layouts(h, w);

    if (saved) {
        saved->c = c;
        saved->h = h;
        saved->w = w;
        saved->n = n;
        saved->strict = cfg.strict_interleave;
        saved->valid = true;
    }

    std::array<ScanOutputs<T>, 4> outs;
    for (std::size_t d = 0; d < 4; ++d) {
        InterleavedSequence<T> seq = build_interleaved_sequence(f_rgb, f_th, layouts[d]);
        ProjectedParams<T> proj = project_parameters(seq, dirs[d], cfg.delta_softplus);
        const Tensor<T> a = dirs[d].a_matrix();
        const Tensor<T>& skip = dirs[d].skip.value;

        if (!saved) {
            outs[d] = cfg.parallel_scan
                          ? cross_modal_recurrence_par(seq, proj, a, skip, cfg.strict_interleave)
                          : cross_modal_recurrence_seq(seq, proj, a, skip, cfg.strict_interleave);
            continue;
        }

        // Training path: sequential sweep with segment checkpoints.
        auto& ds = saved->dirs[d];
        const std::size_t steps = cfg.strict_interleave ? 2 * hw : hw;
        const std::size_t state_len = cfg.strict_interleave ? n : 2 * n;
        ds.seg_len = detail::scan_segment_len(steps);
        ds.num_segments = (steps + ds.seg_len - 1) / ds.seg_len;
        ds.checkpoints.assign(ds.num_segments * c * state_len, T(0));
        outs[d].r = Tensor<T>({hw, c});
        outs[d].t = Tensor<T>({hw, c});

        ScanOutputs<T>* out_ptr = &outs[d];
        const auto& pp = proj;
        const auto& seq_ref = seq;
        const std::size_t seg_len = ds.seg_len;
        const std::size_t num_segments = ds.num_segments;
        std::vector<T>& ckpt = ds.checkpoints;
        const bool strict = cfg.strict_interleave;
        parallel_for(c, [&](std::size_t c0, std::size_t c1) {
            std::vector<T> hr(n), ht(n);
            for (std::size_t ci = c0; ci < c1; ++ci) {
                std::fill(hr.begin(), hr.end(), T(0));
                std::fill(ht.begin(), ht.end(), T(0));
                const T* a_row = a.ptr() + ci * n;
                for (std::size_t s = 0; s < num_segments; ++s) {
                    T* cp = ckpt.data() + (s * c + ci) * state_len;
                    if (strict) {
                        for (std::size_t ni = 0; ni < n; ++ni) cp[ni] = hr[ni];
                    } else {
                        for (std::size_t ni = 0; ni < n; ++ni) {
                            cp[ni] = hr[ni];
                            cp[n + ni] = ht[ni];
                        }
                    }
                    const std::size_t k0 = s * seg_len;
                    const std::size_t k1 = std::min(steps, k0 + seg_len);
                    if (strict) {
                        detail::scan_channel_strict(seq_ref.tokens, pp, a_row, dirs[d].skip.value.data[ci],
                                                    ci, c, n, k0, k1, hr.data(), &out_ptr->r, &out_ptr->t,
                                                    static_cast<T*>(nullptr));
                    } else {
                        detail::scan_channel_swapped(seq_ref.tokens, pp, a_row, dirs[d].skip.value.data[ci],
                                                     ci, c, n, k0, k1, hr.data(), ht.data(), &out_ptr->r,
                                                     &out_ptr->t, static_cast<T*>(nullptr));
                    }
                }
            }
        });
        ds.seq = std::move(seq);
        ds.proj = std::move(proj);
    }
    return merge_scans(outs, layouts, c, h, w);
}

namespace detail {

// Reverse sweep for one direction; accumulates parameter gradients and the
// gradient w.r.t. this direction's tokens.
template <typename T>
void cm_ss2d_backward_direction(const typename CmSs2dSaved<T>::DirState& ds, SsmDirectionParams<T>& p,
                                const Tensor<T>& dout_r, const Tensor<T>& dout_t, bool strict,
                                std::size_t c, std::size_t n, Tensor<T>& dtok) {
    const Tensor<T> a = p.a_matrix();
    const Tensor<T>& tokens = ds.seq.tokens;
    const std::size_t j_total = tokens.dim(0);
    const std::size_t hw = j_total / 2;
    const std::size_t steps = strict ? j_total : hw;
    const std::size_t state_len = strict ? n : 2 * n;

    Tensor<T> db({j_total, n}), dc({j_total, n}), ddelta_post(tokens.shape);
    Tensor<T> da({c, n});
    std::vector<double> dskip(c, 0.0);

    std::vector<T> trace((ds.seg_len + 1) * state_len);
    std::vector<T> gr(n), gt(n), gr_new(n), gt_new(n), hr(n), ht(n);

    for (std::size_t ci = 0; ci < c; ++ci) {
        const T* a_row = a.ptr() + ci * n;
        const T skip = p.skip.value.data[ci];
        std::fill(gr.begin(), gr.end(), T(0));
        std::fill(gt.begin(), gt.end(), T(0));
        double dskip_acc = 0;

        for (std::size_t s = ds.num_segments; s-- > 0;) {
            const std::size_t k0 = s * ds.seg_len;
            const std::size_t k1 = std::min(steps, k0 + ds.seg_len);
            const T* cp = ds.checkpoints.data() + (s * c + ci) * state_len;

            // Recompute this segment's states; trace slot i holds the state
            // after step k0+i, slot "-1" (the checkpoint) the state before k0.
            T* trace_states = trace.data() + state_len;
            for (std::size_t i = 0; i < state_len; ++i) trace[i] = cp[i];
            if (strict) {
                for (std::size_t ni = 0; ni < n; ++ni) hr[ni] = cp[ni];
                scan_channel_strict(tokens, ds.proj, a_row, skip, ci, c, n, k0, k1, hr.data(),
                                    static_cast<Tensor<T>*>(nullptr), static_cast<Tensor<T>*>(nullptr),
                                    trace_states);
            } else {
                for (std::size_t ni = 0; ni < n; ++ni) {
                    hr[ni] = cp[ni];
                    ht[ni] = cp[n + ni];
                }
                scan_channel_swapped(tokens, ds.proj, a_row, skip, ci, c, n, k0, k1, hr.data(), ht.data(),
                                     static_cast<Tensor<T>*>(nullptr), static_cast<Tensor<T>*>(nullptr),
                                     trace_states);
            }

            for (std::size_t k = k1; k-- > k0;) {
                const T* h_cur = trace.data() + (k - k0 + 1) * state_len;
                const T* h_prev = trace.data() + (k - k0) * state_len;
                if (strict) {
                    const std::size_t jj = k;
                    const T x = tokens.data[jj * c + ci];
                    const T d = ds.proj.delta.data[jj * c + ci];
                    const T du = (jj % 2 == 0) ? dout_r.data[(jj / 2) * c + ci]
                                               : dout_t.data[(jj / 2) * c + ci];
                    dskip_acc += double(du) * x;
                    T dtok_acc = du * skip;
                    T ddelta_acc = 0;
                    const T* cj = ds.proj.c.ptr() + jj * n;
                    const T* bj = ds.proj.b.ptr() + jj * n;
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        dc.data[jj * n + ni] += du * h_cur[ni];
                        gr[ni] += du * cj[ni];
                        const T ab = std::exp(d * a_row[ni]);
                        const T dab = gr[ni] * h_prev[ni];
                        ddelta_acc += dab * a_row[ni] * ab + gr[ni] * bj[ni] * x;
                        da.data[ci * n + ni] += dab * d * ab;
                        db.data[jj * n + ni] += gr[ni] * d * x;
                        dtok_acc += gr[ni] * d * bj[ni];
                        gr[ni] *= ab;
                    }
                    dtok.data[jj * c + ci] += dtok_acc;
                    ddelta_post.data[jj * c + ci] += ddelta_acc;
                } else {
                    const std::size_t jr = 2 * k, jt = 2 * k + 1;
                    const T xr = tokens.data[jr * c + ci];
                    const T xt = tokens.data[jt * c + ci];
                    const T dr = ds.proj.delta.data[jr * c + ci];
                    const T dt = ds.proj.delta.data[jt * c + ci];
                    const T du_r = dout_r.data[k * c + ci];
                    const T du_t = dout_t.data[k * c + ci];
                    dskip_acc += double(du_r) * xr + double(du_t) * xt;
                    T dtok_r = du_r * skip, dtok_t = du_t * skip;
                    T ddelta_r = 0, ddelta_t = 0;
                    const T* cr = ds.proj.c.ptr() + jr * n;
                    const T* ct = ds.proj.c.ptr() + jt * n;
                    const T* br = ds.proj.b.ptr() + jr * n;
                    const T* bt = ds.proj.b.ptr() + jt * n;
                    const T* hr_cur = h_cur;
                    const T* ht_cur = h_cur + n;
                    const T* hr_prev = h_prev;
                    const T* ht_prev = h_prev + n;
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        dc.data[jr * n + ni] += du_r * hr_cur[ni];
                        dc.data[jt * n + ni] += du_t * ht_cur[ni];
                        gr[ni] += du_r * cr[ni];
                        gt[ni] += du_t * ct[ni];
                        const T ar = std::exp(dr * a_row[ni]);
                        const T at = std::exp(dt * a_row[ni]);
                        const T dar = gr[ni] * ht_prev[ni];
                        const T dat = gt[ni] * hr_prev[ni];
                        ddelta_r += dar * a_row[ni] * ar + gr[ni] * br[ni] * xr;
                        ddelta_t += dat * a_row[ni] * at + gt[ni] * bt[ni] * xt;
                        da.data[ci * n + ni] += dar * dr * ar + dat * dt * at;
                        db.data[jr * n + ni] += gr[ni] * dr * xr;
                        db.data[jt * n + ni] += gt[ni] * dt * xt;
                        dtok_r += gr[ni] * dr * br[ni];
                        dtok_t += gt[ni] * dt * bt[ni];
                        // Cross-modal swap: each chain's adjoint flows to the
                        // other chain's previous state.
                        gt_new[ni] = gr[ni] * ar;
                        gr_new[ni] = gt[ni] * at;
                    }
                    std::swap(gr, gr_new);
                    std::swap(gt, gt_new);
                    dtok.data[jr * c + ci] += dtok_r;
                    dtok.data[jt * c + ci] += dtok_t;
                    ddelta_post.data[jr * c + ci] += ddelta_r;
                    ddelta_post.data[jt * c + ci] += ddelta_t;
                }
            }
        }
        dskip[ci] = dskip_acc;
    }

    // delta softplus / projection / interleave adjoints.
    Tensor<T> ddelta_pre(ddelta_post.shape);
    if (ds.proj.softplus_applied) {
        for (std::size_t i = 0; i < ddelta_pre.numel(); ++i)
            ddelta_pre.data[i] = ddelta_post.data[i] * sigmoid(ds.proj.delta_pre.data[i]);
    } else {
        ddelta_pre = ddelta_post;
    }
    Tensor<T> dlow = linear_backward(ds.proj.delta_low, p.w_dt_up.value, ddelta_pre, p.w_dt_up.grad,
                                     &p.dt_bias.grad);
    dtok += linear_backward(tokens, p.w_dt_down.value, dlow, p.w_dt_down.grad);
    dtok += linear_backward(tokens, p.w_b.value, db, p.w_b.grad);
    dtok += linear_backward(tokens, p.w_c.value, dc, p.w_c.grad);

    for (std::size_t i = 0; i < da.numel(); ++i)
        p.a_log.grad.data[i] += da.data[i] * a.data[i];  // dA/da_log = -exp(a_log) = A
    for (std::size_t ci = 0; ci < c; ++ci) p.skip.grad.data[ci] += static_cast<T>(dskip[ci]);
}

}  // namespace detail

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cm_ss2d_backward(const CmSs2dSaved<T>& saved, SsmDirectionArray<T>& dirs,
                                                 const Tensor<T>& df_rgb_out, const Tensor<T>& df_th_out) {
    if (!saved.valid)
        throw ContractError("cm_ss2d_backward: no recorded forward state");
    const std::size_t c = saved.c, h = saved.h, w = saved.w, n = saved.n, hw = h * w;
    if (df_rgb_out.shape != std::vector<std::size_t>{c, h, w} || df_th_out.shape != df_rgb_out.shape)
        throw ShapeError("cm_ss2d_backward: upstream gradient shape mismatch");
    const auto layouts = make_layouts(h, w);

    std::array<Tensor<T>, 4> dtoks;
    parallel_for(4, [&](std::size_t d0, std::size_t d1) {
        for (std::size_t d = d0; d < d1; ++d) {
            // Un-permute the upstream gradient into this direction's scan order.
            Tensor<T> dout_r({hw, c}), dout_t({hw, c});
            for (std::size_t k = 0; k < hw; ++k) {
                const std::size_t pix = layouts[d].pixel_order[k];
                for (std::size_t ci = 0; ci < c; ++ci) {
                    dout_r.data[k * c + ci] = df_rgb_out.data[ci * hw + pix];
                    dout_t.data[k * c + ci] = df_th_out.data[ci * hw + pix];
                }
            }
            dtoks[d] = Tensor<T>({2 * hw, c});
            detail::cm_ss2d_backward_direction<T>(saved.dirs[d], dirs[d], dout_r, dout_t, saved.strict, c,
                                                  n, dtoks[d]);
        }
    });

    Tensor<T> df_rgb({c, h, w}), df_th({c, h, w});
    for (std::size_t d = 0; d < 4; ++d) {
        for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t pix = layouts[d].pixel_order[k];
            for (std::size_t ci = 0; ci < c; ++ci) {
                df_rgb.data[ci * hw + pix] += dtoks[d].data[(2 * k) * c + ci];
                df_th.data[ci * hw + pix] += dtoks[d].data[(2 * k + 1) * c + ci];
            }
        }
    }
    return {std::move(df_rgb), std::move(df_th)};
}

}  // namespace cmscan
