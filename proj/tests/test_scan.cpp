#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "cmscan/grad_check.hpp"
#include "cmscan/scan.hpp"

using namespace cmscan;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

template <typename T>
SsmDirectionArray<T> make_dirs(std::size_t c, std::size_t n, std::size_t d_rank, Rng& rng) {
    SsmDirectionArray<T> dirs;
    for (std::size_t d = 0; d < 4; ++d)
        dirs[d].init("dir" + std::to_string(d), c, n, d_rank, rng);
    return dirs;
}

template <typename T>
double max_rel_err(const Tensor<T>& a, const Tensor<T>& b) {
    double max_abs = 0, ref = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        max_abs = std::max(max_abs, std::abs(double(a.data[i]) - double(b.data[i])));
        ref = std::max(ref, std::abs(double(b.data[i])));
    }
    return max_abs / std::max(ref, 1e-8);
}

}  // namespace

TEST_CASE("pixel orders are bijections with the documented conventions") {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 2}, {3, 5}, {4, 4}}) {
        const auto lays = make_layouts(h, w);
        for (const auto& lay : lays) {
            std::set<std::uint32_t> seen(lay.pixel_order.begin(), lay.pixel_order.end());
            REQUIRE(seen.size() == h * w);
            REQUIRE(*seen.rbegin() == h * w - 1);
        }
        // reversed orders are exact reversals
        for (std::size_t k = 0; k < h * w; ++k) {
            REQUIRE(lays[2].pixel_order[k] == lays[0].pixel_order[h * w - 1 - k]);
            REQUIRE(lays[3].pixel_order[k] == lays[1].pixel_order[h * w - 1 - k]);
        }
    }

    // 2x2 column-forward visits (0,0),(1,0),(0,1),(1,1)
    const auto col = make_layout(Direction::ColFwd, 2, 2);
    REQUIRE(col.pixel_order == std::vector<std::uint32_t>{0, 2, 1, 3});
}

TEST_CASE("interleaved sequences alternate rgb and thermal per pixel") {
    // H=1, W=2
    Tensor<double> fr({1, 1, 2}, {10.0, 11.0});
    Tensor<double> ft({1, 1, 2}, {20.0, 21.0});
    const auto seqs = build_directional_sequences(fr, ft);

    // row-forward: (r@0, t@0, r@1, t@1)
    REQUIRE(seqs[0].tokens.data == std::vector<double>{10, 20, 11, 21});
    // row-reverse: (r@1, t@1, r@0, t@0) - pixel-level reversal, rgb first
    REQUIRE(seqs[2].tokens.data == std::vector<double>{11, 21, 10, 20});

    Tensor<double> bad({1, 2, 2});
    REQUIRE_THROWS_AS(build_interleaved_sequence(fr, bad, make_layout(Direction::RowFwd, 1, 2)),
                      ShapeError);
}

TEST_CASE("parameter projection at zero tokens") {
    Rng rng(1);
    const std::size_t c = 3, n = 4;
    SsmDirectionParams<double> p;
    p.init("d", c, n, 2, rng);

    InterleavedSequence<double> seq;
    seq.tokens = Tensor<double>::zeros({6, c});

    SECTION("zero bias gives ln 2 delta") {
        p.dt_bias.value.zero();
        auto pp = project_parameters(seq, p, true);
        for (double v : pp.b.data) REQUIRE(v == 0.0);
        for (double v : pp.c.data) REQUIRE(v == 0.0);
        for (double v : pp.delta.data) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
    }

    SECTION("bias-only path") {
        for (std::size_t ci = 0; ci < c; ++ci) p.dt_bias.value.data[ci] = 0.3 * (ci + 1);
        auto pp = project_parameters(seq, p, true);
        for (std::size_t j = 0; j < 6; ++j)
            for (std::size_t ci = 0; ci < c; ++ci)
                REQUIRE_THAT(pp.delta(j, ci),
                             Catch::Matchers::WithinAbs(softplus(0.3 * (ci + 1)), 1e-12));
    }
}

TEST_CASE("discretization formulas") {
    // A=-1, delta=ln2 -> Abar = 0.5
    Tensor<double> a({1, 1}, {-1.0});
    Tensor<double> b({1}, {1.0});
    Tensor<double> delta({1}, {std::log(2.0)});
    auto [abar, bbar] = discretize(a, b, delta);
    REQUIRE_THAT(abar.data[0], Catch::Matchers::WithinAbs(0.5, 1e-15));

    // delta -> 0+ gives the identity / no-input limit
    Tensor<double> tiny({1}, {1e-12});
    auto [abar2, bbar2] = discretize(a, b, tiny);
    REQUIRE_THAT(abar2.data[0], Catch::Matchers::WithinAbs(1.0, 1e-9));
    REQUIRE_THAT(bbar2.data[0], Catch::Matchers::WithinAbs(0.0, 1e-9));

    // A=-2, delta=1, B=3
    Tensor<double> a3({1, 1}, {-2.0});
    Tensor<double> b3({1}, {3.0});
    Tensor<double> d3({1}, {1.0});
    auto [abar3, bbar3] = discretize(a3, b3, d3);
    REQUIRE_THAT(abar3.data[0], Catch::Matchers::WithinAbs(std::exp(-2.0), 1e-15));
    REQUIRE_THAT(abar3.data[0], Catch::Matchers::WithinAbs(0.135335, 1e-6));
    REQUIRE(bbar3.data[0] == 3.0);

    Tensor<double> neg({1}, {-0.5});
    REQUIRE_THROWS_AS(discretize(a, b, neg), NumericError);
}

TEST_CASE("Abar lies in (0,1) whenever delta > 0 and A < 0") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> a({3, 4});
        for (auto& v : a.data) v = -std::exp(rng.uniform(-3.0, 2.0));
        Tensor<double> b = random_tensor({4}, rng);
        Tensor<double> delta({3});
        for (auto& v : delta.data) v = std::exp(rng.uniform(-6.0, 1.0));
        auto [abar, bbar] = discretize(a, b, delta);
        for (double v : abar.data) {
            REQUIRE(v > 0.0);
            REQUIRE(v < 1.0);
        }
    }
}

namespace {

// Straight-line hand recurrence for the scalar N=C=1 case, mirroring the
// update equations term by term.
struct ScalarStep {
    double rbar, tbar, r_out, t_out;
};

std::vector<ScalarStep> scalar_transcript(double abar, double bbar, double c_out, double skip,
                                          const std::vector<double>& r, const std::vector<double>& t) {
    std::vector<ScalarStep> steps;
    double hr = 0, ht = 0;
    for (std::size_t k = 0; k < r.size(); ++k) {
        const double hr_new = abar * ht + bbar * r[k];
        const double ht_new = abar * hr + bbar * t[k];
        steps.push_back({hr_new, ht_new, c_out * hr_new + skip * r[k], c_out * ht_new + skip * t[k]});
        hr = hr_new;
        ht = ht_new;
    }
    return steps;
}

// Build a projection bundle with hand-set per-token values (bypasses the
// learned projections).
ProjectedParams<double> manual_projection(std::size_t j, std::size_t c, std::size_t n, double b,
                                          double c_out, double delta) {
    ProjectedParams<double> pp;
    pp.b = Tensor<double>::full({j, n}, b);
    pp.c = Tensor<double>::full({j, n}, c_out);
    pp.delta = Tensor<double>::full({j, c}, delta);
    pp.delta_pre = pp.delta;
    pp.softplus_applied = false;
    return pp;
}

}  // namespace

TEST_CASE("scalar recurrence matches the hand transcript") {
    // Abar = 0.5, Bbar = 1, C = 1, D = 0, r = (1,2), t = (3,4)
    const double delta = std::log(2.0);
    const double a_val = -1.0;  // exp(delta * a) = 0.5
    const double b_proj = 1.0 / delta;

    InterleavedSequence<double> seq;
    seq.tokens = Tensor<double>({4, 1}, {1.0, 3.0, 2.0, 4.0});
    auto pp = manual_projection(4, 1, 1, b_proj, 1.0, delta);
    Tensor<double> a({1, 1}, {a_val});
    Tensor<double> skip({1}, {0.0});

    auto out = cross_modal_recurrence_seq(seq, pp, a, skip);

    const double abar = std::exp(delta * a_val);
    const double bbar = delta * b_proj;
    auto steps = scalar_transcript(abar, bbar, 1.0, 0.0, {1.0, 2.0}, {3.0, 4.0});

    // bit-exact against the transcript
    REQUIRE(out.r(0, 0) == steps[0].r_out);
    REQUIRE(out.t(0, 0) == steps[0].t_out);
    REQUIRE(out.r(1, 0) == steps[1].r_out);
    REQUIRE(out.t(1, 0) == steps[1].t_out);

    // and equal to the documented values
    REQUIRE_THAT(out.r(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(out.t(0, 0), Catch::Matchers::WithinAbs(3.0, 1e-12));
    REQUIRE_THAT(out.r(1, 0), Catch::Matchers::WithinAbs(3.5, 1e-12));
    REQUIRE_THAT(out.t(1, 0), Catch::Matchers::WithinAbs(4.5, 1e-12));
}

TEST_CASE("recurrence zero and skip-path isolation cases") {
    InterleavedSequence<double> seq;
    seq.tokens = Tensor<double>::zeros({8, 2});
    auto pp = manual_projection(8, 2, 3, 0.7, 0.9, 0.4);
    Rng rng(2);
    Tensor<double> a({2, 3});
    for (auto& v : a.data) v = -std::exp(rng.normal());
    Tensor<double> skip({2}, {1.0, 2.0});

    auto out = cross_modal_recurrence_seq(seq, pp, a, skip);
    for (double v : out.r.data) REQUIRE(v == 0.0);
    for (double v : out.t.data) REQUIRE(v == 0.0);

    // Bbar = 0, D = 1: states stay zero, outputs reproduce the inputs
    seq.tokens = random_tensor({8, 2}, rng);
    auto pp2 = manual_projection(8, 2, 3, 0.0, 0.9, 0.4);
    Tensor<double> ones({2}, {1.0, 1.0});
    auto out2 = cross_modal_recurrence_seq(seq, pp2, a, ones);
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t ci = 0; ci < 2; ++ci) {
            REQUIRE(out2.r(k, ci) == seq.tokens(2 * k, ci));
            REQUIRE(out2.t(k, ci) == seq.tokens(2 * k + 1, ci));
        }
}

TEST_CASE("affine pair elements form a monoid") {
    Rng rng(3);
    const std::size_t n = 4;
    auto random_element = [&](PairParity par) {
        AffinePairElement<double> e;
        e.parity = par;
        e.scale_r.resize(n);
        e.scale_t.resize(n);
        e.offset_r.resize(n);
        e.offset_t.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            e.scale_r[i] = rng.normal();
            e.scale_t[i] = rng.normal();
            e.offset_r[i] = rng.normal();
            e.offset_t[i] = rng.normal();
        }
        return e;
    };

    const auto id = AffinePairElement<double>::identity(n);
    for (auto par : {PairParity::Straight, PairParity::Swapped}) {
        const auto e = random_element(par);
        const auto left = compose(id, e);
        const auto right = compose(e, id);
        REQUIRE(left.parity == e.parity);
        REQUIRE(right.parity == e.parity);
        REQUIRE(left.scale_r == e.scale_r);
        REQUIRE(left.offset_t == e.offset_t);
        REQUIRE(right.scale_t == e.scale_t);
        REQUIRE(right.offset_r == e.offset_r);
    }

    // associativity: apply both groupings to random states
    for (int trial = 0; trial < 20; ++trial) {
        const auto e1 = random_element(rng.next_below(2) ? PairParity::Swapped : PairParity::Straight);
        const auto e2 = random_element(rng.next_below(2) ? PairParity::Swapped : PairParity::Straight);
        const auto e3 = random_element(rng.next_below(2) ? PairParity::Swapped : PairParity::Straight);
        const auto left = compose(compose(e1, e2), e3);
        const auto right = compose(e1, compose(e2, e3));
        std::vector<double> r(n), t(n), lr(n), lt(n), rr(n), rt(n);
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = rng.normal();
            t[i] = rng.normal();
        }
        left.apply(r.data(), t.data(), lr.data(), lt.data());
        right.apply(r.data(), t.data(), rr.data(), rt.data());
        REQUIRE(left.parity == right.parity);
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE_THAT(lr[i], Catch::Matchers::WithinAbs(rr[i], 1e-10));
            REQUIRE_THAT(lt[i], Catch::Matchers::WithinAbs(rt[i], 1e-10));
        }
    }
}

TEST_CASE("parallel scan equals the sequential reference") {
    Rng rng(4);
    for (bool strict : {false, true}) {
        for (int trial = 0; trial < 16; ++trial) {
            const std::size_t h = 1 + rng.next_below(8);
            const std::size_t w = 1 + rng.next_below(8);
            const std::size_t c = rng.next_below(2) ? 4 : 1;
            const std::size_t n = rng.next_below(2) ? 8 : 1;
            const std::size_t j = 2 * h * w;

            InterleavedSequence<double> seq;
            seq.tokens = random_tensor({j, c}, rng);
            ProjectedParams<double> pp;
            pp.b = random_tensor({j, n}, rng);
            pp.c = random_tensor({j, n}, rng);
            pp.delta = Tensor<double>({j, c});
            for (auto& v : pp.delta.data) v = std::exp(rng.uniform(-4.0, 0.5));
            pp.delta_pre = pp.delta;
            pp.softplus_applied = false;
            Tensor<double> a({c, n});
            for (auto& v : a.data) v = -std::exp(rng.uniform(-2.0, 1.0));
            Tensor<double> skip = random_tensor({c}, rng);

            auto seq_out = cross_modal_recurrence_seq(seq, pp, a, skip, strict);
            auto par_out = cross_modal_recurrence_par(seq, pp, a, skip, strict);
            REQUIRE(max_rel_err(par_out.r, seq_out.r) < 1e-10);
            REQUIRE(max_rel_err(par_out.t, seq_out.t) < 1e-10);
        }
    }
}

TEST_CASE("length-1 parallel scan is exactly the single step") {
    Rng rng(5);
    InterleavedSequence<double> seq;
    seq.tokens = random_tensor({2, 2}, rng);
    ProjectedParams<double> pp;
    pp.b = random_tensor({2, 3}, rng);
    pp.c = random_tensor({2, 3}, rng);
    pp.delta = Tensor<double>({2, 2});
    for (auto& v : pp.delta.data) v = std::exp(rng.normal());
    pp.delta_pre = pp.delta;
    pp.softplus_applied = false;
    Tensor<double> a({2, 3});
    for (auto& v : a.data) v = -std::exp(rng.normal());
    Tensor<double> skip = random_tensor({2}, rng);

    auto s = cross_modal_recurrence_seq(seq, pp, a, skip);
    auto p = cross_modal_recurrence_par(seq, pp, a, skip);
    REQUIRE(s.r.data == p.r.data);
    REQUIRE(s.t.data == p.t.data);
}

TEST_CASE("merge_scans equals the naive per-direction loop") {
    Rng rng(6);
    const std::size_t c = 3, h = 3, w = 4, hw = h * w;
    const auto lays = make_layouts(h, w);
    std::array<ScanOutputs<double>, 4> outs;
    for (auto& o : outs) {
        o.r = random_tensor({hw, c}, rng);
        o.t = random_tensor({hw, c}, rng);
    }
    auto [fr, ft] = merge_scans(outs, lays, c, h, w);

    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t pix = 0; pix < hw; ++pix) {
            double sr = 0, st = 0;
            for (std::size_t d = 0; d < 4; ++d)
                for (std::size_t k = 0; k < hw; ++k)
                    if (lays[d].pixel_order[k] == pix) {
                        sr += outs[d].r(k, ci);
                        st += outs[d].t(k, ci);
                    }
            REQUIRE_THAT(fr.data[ci * hw + pix], Catch::Matchers::WithinAbs(sr, 1e-12));
            REQUIRE_THAT(ft.data[ci * hw + pix], Catch::Matchers::WithinAbs(st, 1e-12));
        }

    // sum of four identical outputs is 4x; three zero directions pass one through
    std::array<ScanOutputs<double>, 4> same;
    for (auto& o : same) {
        o.r = outs[0].r;
        o.t = outs[0].t;
    }
    auto [fr4, ft4] = merge_scans(same, {lays[0], lays[0], lays[0], lays[0]}, c, h, w);
    std::array<ScanOutputs<double>, 4> one;
    one[0].r = outs[0].r;
    one[0].t = outs[0].t;
    for (std::size_t d = 1; d < 4; ++d) {
        one[d].r = Tensor<double>::zeros({hw, c});
        one[d].t = Tensor<double>::zeros({hw, c});
    }
    auto [fr1, ft1] = merge_scans(one, {lays[0], lays[0], lays[0], lays[0]}, c, h, w);
    for (std::size_t i = 0; i < fr1.numel(); ++i)
        REQUIRE_THAT(fr4.data[i], Catch::Matchers::WithinAbs(4.0 * fr1.data[i], 1e-12));
}

TEST_CASE("merged result is invariant to direction storage order") {
    Rng rng(7);
    const std::size_t c = 2, h = 3, w = 3, hw = h * w;
    const auto lays = make_layouts(h, w);
    std::array<ScanOutputs<double>, 4> outs;
    for (auto& o : outs) {
        o.r = random_tensor({hw, c}, rng);
        o.t = random_tensor({hw, c}, rng);
    }
    auto [fr, ft] = merge_scans(outs, lays, c, h, w);

    std::array<ScanOutputs<double>, 4> shuffled{outs[2], outs[0], outs[3], outs[1]};
    auto [fr2, ft2] = merge_scans(shuffled, {lays[2], lays[0], lays[3], lays[1]}, c, h, w);
    for (std::size_t i = 0; i < fr.numel(); ++i) {
        REQUIRE_THAT(fr.data[i], Catch::Matchers::WithinAbs(fr2.data[i], 1e-12));
        REQUIRE_THAT(ft.data[i], Catch::Matchers::WithinAbs(ft2.data[i], 1e-12));
    }
}

namespace {

// Independent straight-line reimplementation of the whole block for tiny
// fixtures: naive projections, per-direction sequential recurrence, merge.
std::pair<Tensor<double>, Tensor<double>> naive_cm_ss2d(const Tensor<double>& fr, const Tensor<double>& ft,
                                                        SsmDirectionArray<double>& dirs, bool softplus_on) {
    const std::size_t c = fr.dim(0), h = fr.dim(1), w = fr.dim(2), hw = h * w;
    const std::size_t n = dirs[0].state_dim();
    Tensor<double> out_r({c, h, w}), out_t({c, h, w});
    const auto lays = make_layouts(h, w);
    for (std::size_t d = 0; d < 4; ++d) {
        const auto& p = dirs[d];
        const std::size_t d_rank = p.w_dt_down.value.dim(0);
        // tokens
        std::vector<double> tok(2 * hw * c);
        for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t pix = lays[d].pixel_order[k];
            for (std::size_t ci = 0; ci < c; ++ci) {
                tok[(2 * k) * c + ci] = fr.data[ci * hw + pix];
                tok[(2 * k + 1) * c + ci] = ft.data[ci * hw + pix];
            }
        }
        // projections
        std::vector<double> bp(2 * hw * n), cp(2 * hw * n), dl(2 * hw * c);
        for (std::size_t j = 0; j < 2 * hw; ++j) {
            for (std::size_t ni = 0; ni < n; ++ni) {
                double ab = 0, ac = 0;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    ab += p.w_b.value(ni, ci) * tok[j * c + ci];
                    ac += p.w_c.value(ni, ci) * tok[j * c + ci];
                }
                bp[j * n + ni] = ab;
                cp[j * n + ni] = ac;
            }
            std::vector<double> low(d_rank, 0.0);
            for (std::size_t ri = 0; ri < d_rank; ++ri)
                for (std::size_t ci = 0; ci < c; ++ci) low[ri] += p.w_dt_down.value(ri, ci) * tok[j * c + ci];
            for (std::size_t ci = 0; ci < c; ++ci) {
                double acc = p.dt_bias.value.data[ci];
                for (std::size_t ri = 0; ri < d_rank; ++ri) acc += p.w_dt_up.value(ci, ri) * low[ri];
                dl[j * c + ci] = softplus_on ? softplus(acc) : acc;
            }
        }
        // recurrence + un-permuted accumulation
        for (std::size_t ci = 0; ci < c; ++ci) {
            std::vector<double> hr(n, 0.0), ht(n, 0.0), hr_new(n), ht_new(n);
            for (std::size_t k = 0; k < hw; ++k) {
                const std::size_t jr = 2 * k, jt = 2 * k + 1;
                const double xr = tok[jr * c + ci], xt = tok[jt * c + ci];
                const double dr = dl[jr * c + ci], dt = dl[jt * c + ci];
                double acc_r = 0, acc_t = 0;
                for (std::size_t ni = 0; ni < n; ++ni) {
                    const double a = -std::exp(p.a_log.value(ci, ni));
                    const double ar = std::exp(dr * a);
                    const double at = std::exp(dt * a);
                    hr_new[ni] = ar * ht[ni] + dr * bp[jr * n + ni] * xr;
                    ht_new[ni] = at * hr[ni] + dt * bp[jt * n + ni] * xt;
                    acc_r += cp[jr * n + ni] * hr_new[ni];
                    acc_t += cp[jt * n + ni] * ht_new[ni];
                }
                hr = hr_new;
                ht = ht_new;
                const std::size_t pix = lays[d].pixel_order[k];
                out_r.data[ci * hw + pix] += acc_r + p.skip.value.data[ci] * xr;
                out_t.data[ci * hw + pix] += acc_t + p.skip.value.data[ci] * xt;
            }
        }
    }
    return {out_r, out_t};
}

}  // namespace

TEST_CASE("cm_ss2d forward matches the straight-line oracle on the 2x2 fixture") {
    Rng rng(8);
    auto dirs = make_dirs<double>(1, 1, 1, rng);
    // hand-set weights: distinct simple values per direction
    for (std::size_t d = 0; d < 4; ++d) {
        dirs[d].a_log.value.data[0] = -0.2 * (d + 1);
        dirs[d].skip.value.data[0] = 0.5;
        dirs[d].w_b.value.data[0] = 0.3 + 0.1 * d;
        dirs[d].w_c.value.data[0] = 0.7 - 0.1 * d;
        dirs[d].w_dt_down.value.data[0] = 0.4;
        dirs[d].w_dt_up.value.data[0] = 0.6;
        dirs[d].dt_bias.value.data[0] = -0.5 + 0.2 * d;
    }
    Tensor<double> fr({1, 2, 2}, {1.0, -0.5, 0.25, 2.0});
    Tensor<double> ft({1, 2, 2}, {-1.0, 0.75, 1.5, -0.25});

    SsmConfig cfg;
    cfg.state_dim = 1;
    cfg.dt_rank = 1;
    auto [or_, ot_] = cm_ss2d_forward(fr, ft, dirs, cfg);
    auto [er, et] = naive_cm_ss2d(fr, ft, dirs, true);
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(or_.data[i] == er.data[i]);
        REQUIRE(ot_.data[i] == et.data[i]);
    }
}

TEST_CASE("cm_ss2d forward matches the oracle on random fixtures") {
    Rng rng(9);
    for (int trial = 0; trial < 4; ++trial) {
        const std::size_t c = 2, n = 2, h = 3, w = 2;
        auto dirs = make_dirs<double>(c, n, 1, rng);
        Tensor<double> fr = random_tensor({c, h, w}, rng);
        Tensor<double> ft = random_tensor({c, h, w}, rng);
        SsmConfig cfg;
        cfg.state_dim = n;
        cfg.dt_rank = 1;
        auto [or_, ot_] = cm_ss2d_forward(fr, ft, dirs, cfg);
        auto [er, et] = naive_cm_ss2d(fr, ft, dirs, true);
        REQUIRE(max_rel_err(or_, er) < 1e-12);
        REQUIRE(max_rel_err(ot_, et) < 1e-12);
    }
}

TEST_CASE("cm_ss2d zero inputs give zero outputs") {
    Rng rng(10);
    auto dirs = make_dirs<double>(2, 3, 1, rng);
    Tensor<double> z = Tensor<double>::zeros({2, 2, 2});
    SsmConfig cfg;
    cfg.state_dim = 3;
    cfg.dt_rank = 1;
    auto [or_, ot_] = cm_ss2d_forward(z, z, dirs, cfg);
    for (double v : or_.data) REQUIRE(v == 0.0);
    for (double v : ot_.data) REQUIRE(v == 0.0);
}

TEST_CASE("cm_ss2d swap symmetry") {
    Rng rng(11);
    auto dirs = make_dirs<double>(2, 2, 1, rng);
    Tensor<double> fr = random_tensor({2, 2, 3}, rng);
    Tensor<double> ft = random_tensor({2, 2, 3}, rng);
    SsmConfig cfg;
    cfg.state_dim = 2;
    cfg.dt_rank = 1;
    auto [or1, ot1] = cm_ss2d_forward(fr, ft, dirs, cfg);
    auto [or2, ot2] = cm_ss2d_forward(ft, fr, dirs, cfg);
    REQUIRE(or2.data == ot1.data);
    REQUIRE(ot2.data == or1.data);
}

TEST_CASE("cm_ss2d parallel-scan path agrees with the default path") {
    Rng rng(12);
    auto dirs = make_dirs<double>(3, 4, 1, rng);
    Tensor<double> fr = random_tensor({3, 4, 5}, rng);
    Tensor<double> ft = random_tensor({3, 4, 5}, rng);
    SsmConfig cfg;
    cfg.state_dim = 4;
    cfg.dt_rank = 1;
    auto [sr, st] = cm_ss2d_forward(fr, ft, dirs, cfg);
    cfg.parallel_scan = true;
    auto [pr, pt] = cm_ss2d_forward(fr, ft, dirs, cfg);
    REQUIRE(max_rel_err(pr, sr) < 1e-10);
    REQUIRE(max_rel_err(pt, st) < 1e-10);
}

namespace {

struct BlockGradFixture {
    SsmDirectionArray<double> dirs;
    Tensor<double> fr, ft, pr, pt;
    SsmConfig cfg;

    double loss() {
        auto [or_, ot_] = cm_ss2d_forward(fr, ft, dirs, cfg);
        double s = 0;
        for (std::size_t i = 0; i < or_.numel(); ++i) s += or_.data[i] * pr.data[i] + ot_.data[i] * pt.data[i];
        return s;
    }
};

}  // namespace

TEST_CASE("cm_ss2d backward matches finite differences at tiny dims") {
    Rng rng(13);
    for (bool strict : {false, true}) {
        BlockGradFixture fx;
        const std::size_t c = 2, n = 2;
        fx.dirs = make_dirs<double>(c, n, 1, rng);
        fx.fr = random_tensor({c, 2, 2}, rng);
        fx.ft = random_tensor({c, 2, 2}, rng);
        fx.pr = random_tensor({c, 2, 2}, rng);
        fx.pt = random_tensor({c, 2, 2}, rng);
        fx.cfg.state_dim = n;
        fx.cfg.dt_rank = 1;
        fx.cfg.strict_interleave = strict;

        CmSs2dSaved<double> saved;
        cm_ss2d_forward(fx.fr, fx.ft, fx.dirs, fx.cfg, &saved);
        for (std::size_t d = 0; d < 4; ++d) {
            ParamRefs<double> refs;
            fx.dirs[d].collect(refs);
            for (auto* p : refs) p->zero_grad();
        }
        auto [dfr, dft] = cm_ss2d_backward(saved, fx.dirs, fx.pr, fx.pt);

        std::vector<GradCheckItem> items = {{"fr", &fx.fr, &dfr}, {"ft", &fx.ft, &dft}};
        for (std::size_t d = 0; d < 4; ++d) {
            ParamRefs<double> refs;
            fx.dirs[d].collect(refs);
            for (auto* p : refs) items.push_back({p->name, &p->value, &p->grad});
        }
        // delta = 1e-4: the loss is exp-heavy, so smaller steps hit FD
        // cancellation noise before truncation matters
        auto report = grad_check([&] { return fx.loss(); }, items, 1e-4);
        INFO("strict=" << strict << " worst=" << report.worst << " err=" << report.max_rel_err);
        REQUIRE(report.ok(1e-5));
    }
}

TEST_CASE("cm_ss2d backward: zero upstream gives zero gradients") {
    Rng rng(14);
    auto dirs = make_dirs<double>(2, 2, 1, rng);
    Tensor<double> fr = random_tensor({2, 2, 2}, rng);
    Tensor<double> ft = random_tensor({2, 2, 2}, rng);
    SsmConfig cfg;
    cfg.state_dim = 2;
    cfg.dt_rank = 1;
    CmSs2dSaved<double> saved;
    cm_ss2d_forward(fr, ft, dirs, cfg, &saved);
    Tensor<double> zero = Tensor<double>::zeros({2, 2, 2});
    auto [dfr, dft] = cm_ss2d_backward(saved, dirs, zero, zero);
    for (double v : dfr.data) REQUIRE(v == 0.0);
    for (double v : dft.data) REQUIRE(v == 0.0);
    for (std::size_t d = 0; d < 4; ++d) {
        ParamRefs<double> refs;
        dirs[d].collect(refs);
        for (auto* p : refs)
            for (double v : p->grad.data) REQUIRE(v == 0.0);
    }
}

TEST_CASE("cm_ss2d backward: skip-only configuration") {
    Rng rng(15);
    auto dirs = make_dirs<double>(2, 2, 1, rng);
    for (auto& d : dirs) d.w_b.value.zero();  // Bbar = 0 everywhere
    Tensor<double> fr = random_tensor({2, 2, 2}, rng);
    Tensor<double> ft = random_tensor({2, 2, 2}, rng);
    Tensor<double> pr = random_tensor({2, 2, 2}, rng);
    Tensor<double> pt = random_tensor({2, 2, 2}, rng);
    SsmConfig cfg;
    cfg.state_dim = 2;
    cfg.dt_rank = 1;
    CmSs2dSaved<double> saved;
    cm_ss2d_forward(fr, ft, dirs, cfg, &saved);
    auto [dfr, dft] = cm_ss2d_backward(saved, dirs, pr, pt);

    // every direction sees the full image, so each accumulates
    // dD = sum of upstream (.) input; dInput sums D over directions
    for (std::size_t ci = 0; ci < 2; ++ci) {
        double expect = 0;
        for (std::size_t i = 0; i < 4; ++i)
            expect += pr.data[ci * 4 + i] * fr.data[ci * 4 + i] + pt.data[ci * 4 + i] * ft.data[ci * 4 + i];
        for (auto& d : dirs)
            REQUIRE_THAT(d.skip.grad.data[ci], Catch::Matchers::WithinAbs(expect, 1e-10));
    }
    for (std::size_t ci = 0; ci < 2; ++ci)
        for (std::size_t i = 0; i < 4; ++i) {
            double expect = 0;
            for (auto& d : dirs) expect += d.skip.value.data[ci] * pr.data[ci * 4 + i];
            REQUIRE_THAT(dfr.data[ci * 4 + i], Catch::Matchers::WithinAbs(expect, 1e-10));
        }
}

TEST_CASE("cm_ss2d backward without a recorded forward is rejected") {
    Rng rng(16);
    auto dirs = make_dirs<double>(1, 1, 1, rng);
    CmSs2dSaved<double> saved;  // never filled
    Tensor<double> g({1, 1, 1});
    REQUIRE_THROWS_AS(cm_ss2d_backward(saved, dirs, g, g), ContractError);
}

TEST_CASE("checkpointed training forward equals the plain forward") {
    Rng rng(18);
    auto dirs = make_dirs<double>(2, 3, 1, rng);
    Tensor<double> fr = random_tensor({2, 5, 7}, rng);
    Tensor<double> ft = random_tensor({2, 5, 7}, rng);
    SsmConfig cfg;
    cfg.state_dim = 3;
    cfg.dt_rank = 1;
    for (bool strict : {false, true}) {
        cfg.strict_interleave = strict;
        CmSs2dSaved<double> saved;
        auto [r1, t1] = cm_ss2d_forward(fr, ft, dirs, cfg, &saved);
        auto [r2, t2] = cm_ss2d_forward(fr, ft, dirs, cfg);
        REQUIRE(r1.data == r2.data);
        REQUIRE(t1.data == t2.data);
    }
}
