#include <catch2/catch_amalgamated.hpp>

#include "cmscan/rng.hpp"
#include "cmscan/tensor.hpp"

using namespace cmscan;

TEST_CASE("tensor shape invariants") {
    Tensor<float> t({2, 3});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.data.size() == 6);

    REQUIRE_THROWS_AS(Tensor<float>({2, 0, 3}), ShapeError);
    REQUIRE_THROWS_AS(Tensor<float>(std::vector<std::size_t>{}), ShapeError);
    REQUIRE_THROWS_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
}

TEST_CASE("tensor indexing is row-major") {
    Tensor<double> t({2, 3});
    for (std::size_t i = 0; i < 6; ++i) t.data[i] = static_cast<double>(i);
    REQUIRE(t(0, 0) == 0.0);
    REQUIRE(t(0, 2) == 2.0);
    REQUIRE(t(1, 0) == 3.0);
    REQUIRE(t(1, 2) == 5.0);

    auto r = t.reshaped({3, 2});
    REQUIRE(r(2, 1) == 5.0);
    REQUIRE_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("rng streams are reproducible") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(42, 50);
    Rng d(42);
    for (int i = 0; i < 50; ++i) d.next_u64();
    REQUIRE(c.next_u64() == d.next_u64());
}

TEST_CASE("rng splits are independent") {
    Rng parent1(7), parent2(7);
    Rng a1 = parent1.split();
    Rng b1 = parent1.split();
    Rng a2 = parent2.split();
    Rng b2 = parent2.split();

    // Exercising stream B must not perturb stream A.
    for (int i = 0; i < 37; ++i) b1.next_u64();
    for (int i = 0; i < 200; ++i) REQUIRE(a1.next_u64() == a2.next_u64());
    (void)b2;
}

TEST_CASE("rng uniform and normal are in range and deterministic") {
    Rng r(3);
    double prev_mean = 0;
    for (int i = 0; i < 1000; ++i) {
        const double u = r.next_double();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        prev_mean += u;
    }
    prev_mean /= 1000;
    REQUIRE(std::abs(prev_mean - 0.5) < 0.05);

    Rng n1(9), n2(9);
    for (int i = 0; i < 10; ++i) REQUIRE(n1.normal() == n2.normal());

    Rng bounded(11);
    for (int i = 0; i < 100; ++i) REQUIRE(bounded.next_below(7) < 7);
}
