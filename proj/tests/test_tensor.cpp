#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <set>

#include "doctest.h"
#include "pqnet/half.hpp"
#include "pqnet/linalg.hpp"
#include "pqnet/parallel.hpp"
#include "support.hpp"

using namespace pqnet;

TEST_CASE("matmul small cases") {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(matmul(Tensor::identity(2), a) == a);
    const Tensor p = matmul(Tensor::matrix({{1, 0}, {0, 0}}), Tensor::matrix({{5}, {7}}));
    CHECK(p == Tensor::matrix({{5}, {0}}));
    CHECK_THROWS_AS(matmul(Tensor({3, 4}), Tensor({3, 2})), ShapeError);
}

TEST_CASE("matmul equals triple loop bit for bit") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = gaussian_noise<float>({3, 4}, 1.0, rng);
        const Tensor b = gaussian_noise<float>({4, 2}, 1.0, rng);
        CHECK(matmul(a, b) == oracle::naive_matmul(a, b));
    }
    const Tensor a = gaussian_noise<float>({17, 33}, 1.0, rng);
    CHECK(matmul(Tensor::identity(17), a) == a);
}

TEST_CASE("matmul leaves inputs untouched") {
    Rng rng(1);
    const Tensor a = gaussian_noise<float>({5, 6}, 1.0, rng);
    const Tensor b = gaussian_noise<float>({6, 3}, 1.0, rng);
    const Tensor a0 = a, b0 = b;
    (void)matmul(a, b);
    CHECK(a == a0);
    CHECK(b == b0);
}

TEST_CASE("gram") {
    CHECK(gram(Tensor::identity(2)) == Tensor::identity(2));
    CHECK(gram(Tensor::matrix({{1, 1}})) == Tensor::matrix({{1, 1}, {1, 1}}));
    Rng rng(3);
    const Tensor a = gaussian_noise<float>({50, 4}, 1.0, rng);
    const Tensor g = gram(a);
    CHECK(g == matmul(transpose(a), a));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(g(i, j) == g(j, i));
}

TEST_CASE("sampling rows") {
    Rng rng(5);
    Tensor a({5, 2});
    for (std::size_t i = 0; i < 10; ++i) a[i] = static_cast<float>(i);

    const auto perm = sample_row_indices(5, 5, rng);
    CHECK(std::set<std::size_t>(perm.begin(), perm.end()).size() == 5);

    const Tensor three = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
    const Tensor six = sample_rows(three, 6, rng);
    CHECK(six.rows() == 6);
    for (std::size_t r = 0; r < 6; ++r) {
        bool found = false;
        for (std::size_t s = 0; s < 3; ++s) found |= six(r, 0) == three(s, 0) && six(r, 1) == three(s, 1);
        CHECK(found);
    }

    const Tensor big = gaussian_noise<float>({100, 3}, 1.0, rng);
    Rng r1(42), r2(42);
    CHECK(sample_rows(big, 10, r1) == sample_rows(big, 10, r2));
    CHECK_THROWS_AS(sample_row_indices(5, 0, rng), ArgumentError);
}

TEST_CASE("gaussian noise statistics") {
    Rng rng(11);
    CHECK(gaussian_noise<float>({100}, 0.0, rng) == Tensor({100}));

    const DTensor n = gaussian_noise<double>({100000}, 1.0, rng);
    double mean = 0.0, sq = 0.0;
    for (double v : n.data()) mean += v;
    mean /= 1e5;
    for (double v : n.data()) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / 1e5);
    CHECK(std::abs(mean) < 0.02);
    CHECK(sd > 0.98);
    CHECK(sd < 1.02);

    const DTensor tiny = gaussian_noise<double>({10000}, 1e-8, rng);
    double mx = 0.0;
    for (double v : tiny.data()) mx = std::max(mx, std::abs(v));
    CHECK(mx < 1e-6);
    CHECK_THROWS_AS(gaussian_noise<double>({3}, -1.0, rng), ArgumentError);
}

TEST_CASE("rng is reproducible and forks independently") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(9);
    Rng f1 = c.fork();
    Rng d(9);
    Rng f2 = d.fork();
    CHECK(f1.next_u64() == f2.next_u64());
    // First outputs of mt19937_64 seeded with 5489 (the reference default).
    Rng ref(5489);
    CHECK(ref.next_u64() == 14514284786278117030ULL);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(a.uniform_index(7) < 7);
    }
}

TEST_CASE("tensor shape errors") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 3, 4}).rows(), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 3}).reshaped({4, 2}), ShapeError);
    CHECK(Tensor({2, 3}).reshaped({3, 2}).shape() == Shape{3, 2});
}

// ---------------------------------------------------------------------------

TEST_CASE("least squares projector examples") {
    Rng rng(2);
    const DTensor full = gaussian_noise<double>({20, 4}, 1.0, rng);
    const DTensor b = gaussian_noise<double>({4}, 1.0, rng);
    CHECK(max_abs_diff(lstsq_min_norm(full, b), b) < 1e-6);

    const DTensor row = DTensor::matrix({{1, 0}});
    const DTensor x = lstsq_min_norm(row, DTensor::vector({3, 4}));
    CHECK(x[0] == doctest::Approx(3.0));
    CHECK(std::abs(x[1]) < 1e-12);

    CHECK(lstsq_min_norm(DTensor({3, 2}), DTensor::vector({1, 2})) == DTensor({2}));
}

TEST_CASE("least squares matches SVD oracle on rank-deficient inputs") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + rng.uniform_index(20), d = 2 + rng.uniform_index(6);
        const std::size_t rank = 1 + rng.uniform_index(d - 1);
        const DTensor left = gaussian_noise<double>({n, rank}, 1.0, rng);
        const DTensor right = gaussian_noise<double>({rank, d}, 1.0, rng);
        const DTensor a = matmul(left, right);
        const DTensor b = gaussian_noise<double>({d}, 1.0, rng);
        const DTensor got = lstsq_min_norm(a, b);
        const Eigen::VectorXd want =
            oracle::svd_lstsq(oracle::to_eigen(a), Eigen::Map<const Eigen::VectorXd>(b.data().data(), d));
        for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-8);
    }
}

TEST_CASE("projector is symmetric and idempotent") {
    Rng rng(8);
    const DTensor a = matmul(gaussian_noise<double>({10, 2}, 1.0, rng), gaussian_noise<double>({2, 5}, 1.0, rng));
    const DTensor p = projector_from_gram(gram(a));
    CHECK(max_abs_diff(matmul(p, p), p) < 1e-10);
    CHECK(max_abs_diff(transpose(p), p) < 1e-12);
    double trace = 0.0;
    for (std::size_t i = 0; i < 5; ++i) trace += p(i, i);
    CHECK(trace == doctest::Approx(2.0));
}

// ---------------------------------------------------------------------------

namespace {

// Nearest binary16 by exhaustive search over all finite values, ties to even.
std::uint16_t nearest_half(float f) {
    std::uint16_t best = 0;
    double best_err = INFINITY;
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
        if ((h & 0x7c00) == 0x7c00) continue;
        const double err = std::abs(double(half_to_float(static_cast<std::uint16_t>(h))) - double(f));
        if (err < best_err || (err == best_err && (h & 1) == 0 && (best & 1) == 1)) {
            best = static_cast<std::uint16_t>(h);
            best_err = err;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("binary16 round trip of every finite half") {
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
        if ((h & 0x7c00) == 0x7c00) continue;
        const auto bits = static_cast<std::uint16_t>(h);
        const float f = half_to_float(bits);
        if (f == 0.0f) CHECK((float_to_half(f) & 0x7fff) == 0);
        else CHECK(float_to_half(f) == bits);
    }
}

TEST_CASE("binary16 encode is nearest with ties to even") {
    CHECK(float_to_half(1.0f) == 0x3c00);
    CHECK(float_to_half(65504.0f) == 0x7bff);
    CHECK(float_to_half(1e6f) == 0x7bff);
    CHECK(float_to_half(-1e6f) == 0xfbff);
    CHECK(float_to_half(INFINITY) == 0x7bff);
    // 1 + 2^-11 lies halfway between 1 and 1 + 2^-10: ties to the even 1.
    CHECK(float_to_half(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);
    CHECK(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)) == 0x3c02);
    CHECK(float_to_half(std::ldexp(1.0f, -24)) == 0x0001);
    CHECK(float_to_half(std::ldexp(1.0f, -26)) == 0x0000);

    Rng rng(13);
    for (int i = 0; i < 300; ++i) {
        const float f = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform() * 8 - 5));
        if (std::abs(f) > 65504.0f) continue;
        CHECK(float_to_half(f) == nearest_half(f));
    }
}

// ---------------------------------------------------------------------------

TEST_CASE("parallel_for covers every index once and rethrows") {
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) ++hits[i];
    });
    for (auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(1000, [](std::size_t, std::size_t) { throw ArgumentError("boom"); }),
                    ArgumentError);
    CHECK(thread_count() >= 1);
}
