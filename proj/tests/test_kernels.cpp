#include <gtest/gtest.h>

#include <omp.h>

#include <cmath>

#include "pfdetr/kernels.hpp"
#include "test_support.hpp"

using namespace pfdetr;
using namespace pfdetr::kernels;
using pfdetr::testing::random_size;
using pfdetr::testing::random_tensor;

namespace {

void expect_close(std::span<const double> a, std::span<const double> b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(a[i], b[i], tol * std::max(1.0, std::abs(b[i]))) << "index " << i;
}

}  // namespace

TEST(Kernels, ParallelGemmMatchesSerialForEveryTransposeCombination) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 40; ++trial) {
        const GemmShape s{random_size(rng, 1, 33), random_size(rng, 1, 33), random_size(rng, 1, 33)};
        for (Trans ta : {Trans::No, Trans::Yes})
            for (Trans tb : {Trans::No, Trans::Yes})
                for (bool acc : {false, true}) {
                    const Tensor a = random_tensor(rng, s.m, s.k);
                    const Tensor b = random_tensor(rng, s.k, s.n);
                    const Tensor c0 = random_tensor(rng, s.m, s.n);
                    Tensor cs = c0, cp = c0;
                    serial::gemm(ta, tb, s, a.data(), b.data(), cs.data(), acc);
                    parallel::gemm(ta, tb, s, a.data(), b.data(), cp.data(), acc);
                    expect_close(cp.data(), cs.data(), 1e-13);
                }
    }
}

TEST(Kernels, SerialGemmMatchesHandProduct) {
    const Tensor a{{1, 2}, {3, 4}};
    const Tensor b{{1}, {1}};
    Tensor c(2, 1);
    serial::gemm(Trans::No, Trans::No, {2, 1, 2}, a.data(), b.data(), c.data(), false);
    EXPECT_EQ(c, (Tensor{{3}, {7}}));
    // aᵀ·a
    Tensor d(2, 2);
    serial::gemm(Trans::Yes, Trans::No, {2, 2, 2}, a.data(), a.data(), d.data(), false);
    EXPECT_EQ(d, (Tensor{{10, 14}, {14, 20}}));
}

TEST(Kernels, ParallelRowKernelsMatchSerial) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t r = random_size(rng, 1, 50), c = random_size(rng, 1, 50);
        const Tensor x = random_tensor(rng, r, c, -5.0, 5.0);
        Tensor s1(r, c), p1(r, c);
        serial::softmax_rows(r, c, x.data(), s1.data());
        parallel::softmax_rows(r, c, x.data(), p1.data());
        expect_close(p1.data(), s1.data(), 1e-14);

        const Tensor g = random_tensor(rng, 1, c, 0.5, 1.5), b = random_tensor(rng, 1, c);
        Tensor s2(r, c), p2(r, c), sm(r, 1), pm(r, 1), sr(r, 1), pr(r, 1);
        serial::layer_norm_rows(r, c, x.data(), g.data(), b.data(), s2.data(), sm.data(), sr.data());
        parallel::layer_norm_rows(r, c, x.data(), g.data(), b.data(), p2.data(), pm.data(), pr.data());
        expect_close(p2.data(), s2.data(), 1e-13);
        expect_close(pm.data(), sm.data(), 1e-13);
        expect_close(pr.data(), sr.data(), 1e-13);

        Tensor s3(r, c), p3(r, c);
        serial::gelu(x.data(), s3.data());
        parallel::gelu(x.data(), p3.data());
        expect_close(p3.data(), s3.data(), 0.0);
    }
}

TEST(Kernels, ParallelResultsDoNotDependOnThreadCount) {
    std::mt19937_64 rng(3);
    const GemmShape s{37, 29, 41};
    const Tensor a = random_tensor(rng, s.m, s.k), b = random_tensor(rng, s.k, s.n);
    const int saved = omp_get_max_threads();
    Tensor one(s.m, s.n), many(s.m, s.n);
    omp_set_num_threads(1);
    parallel::gemm(Trans::No, Trans::Yes, s, a.data(), b.data(), one.data(), false);
    omp_set_num_threads(4);
    parallel::gemm(Trans::No, Trans::Yes, s, a.data(), b.data(), many.data(), false);
    omp_set_num_threads(saved);
    EXPECT_EQ(one, many);
}

TEST(Kernels, GeluUsesTanhApproximation) {
    for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
        const double ref =
            0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / 3.141592653589793) * (x + 0.044715 * x * x * x)));
        EXPECT_NEAR(gelu_scalar(x), ref, 1e-15);
        const double h = 1e-6;
        EXPECT_NEAR(gelu_grad_scalar(x), (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h), 1e-8);
    }
}
