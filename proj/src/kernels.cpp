#include "pfdetr/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <omp.h>

namespace pfdetr::kernels {

namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

// index of op(X)(r, c) in a row-major buffer holding X
inline std::size_t at(Trans t, std::size_t r, std::size_t c, std::size_t op_rows,
                      std::size_t op_cols) {
    return t == Trans::No ? r * op_cols + c : c * op_rows + r;
}

inline void softmax_row(const double* x, double* out, std::size_t cols) {
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        out[j] = std::exp(x[j] - mx);
        sum += out[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
}

inline void layer_norm_row(const double* x, const double* gamma, const double* beta, double* out,
                           double& mean, double& rstd, std::size_t cols) {
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += x[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < cols; ++j) out[j] = (x[j] - mu) * rs * gamma[j] + beta[j];
    mean = mu;
    rstd = rs;
}

}  // namespace

double gelu_scalar(double x) {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

namespace serial {

void gemm(Trans ta, Trans tb, GemmShape s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
    for (std::size_t i = 0; i < s.m; ++i) {
        for (std::size_t j = 0; j < s.n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < s.k; ++p)
                acc += a[at(ta, i, p, s.m, s.k)] * b[at(tb, p, j, s.k, s.n)];
            c[i * s.n + j] = accumulate ? c[i * s.n + j] + acc : acc;
        }
    }
}

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> out) {
    for (std::size_t r = 0; r < rows; ++r) softmax_row(&x[r * cols], &out[r * cols], cols);
}

void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta,
                     std::span<double> out, std::span<double> mean, std::span<double> rstd) {
    for (std::size_t r = 0; r < rows; ++r)
        layer_norm_row(&x[r * cols], gamma.data(), beta.data(), &out[r * cols], mean[r], rstd[r],
                       cols);
}

void gelu(std::span<const double> x, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
}

}  // namespace serial

namespace parallel {

void gemm(Trans ta, Trans tb, GemmShape s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
    const auto m = static_cast<std::int64_t>(s.m);
    const std::size_t n = s.n;
    const std::size_t k = s.k;
    const double* A = a.data();
    const double* B = b.data();
    double* C = c.data();

    if (tb == Trans::Yes) {
        // rows of op(B) are contiguous rows of B: dot products
#pragma omp parallel for schedule(static)
        for (std::int64_t ii = 0; ii < m; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            double* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = B + j * k;
                double acc = 0.0;
                if (ta == Trans::No) {
                    const double* arow = A + i * k;
                    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                } else {
                    for (std::size_t p = 0; p < k; ++p) acc += A[p * s.m + i] * brow[p];
                }
                crow[j] = accumulate ? crow[j] + acc : acc;
            }
        }
        return;
    }

#pragma omp parallel for schedule(static)
    for (std::int64_t ii = 0; ii < m; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* crow = C + i * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ta == Trans::No ? A[i * k + p] : A[p * s.m + i];
            if (aip == 0.0) continue;
            const double* brow = B + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> out) {
    const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < n; ++r)
        softmax_row(&x[static_cast<std::size_t>(r) * cols], &out[static_cast<std::size_t>(r) * cols],
                    cols);
}

void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta,
                     std::span<double> out, std::span<double> mean, std::span<double> rstd) {
    const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::int64_t rr = 0; rr < n; ++rr) {
        const auto r = static_cast<std::size_t>(rr);
        layer_norm_row(&x[r * cols], gamma.data(), beta.data(), &out[r * cols], mean[r], rstd[r],
                       cols);
    }
}

void gelu(std::span<const double> x, std::span<double> out) {
    const auto n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] = gelu_scalar(x[static_cast<std::size_t>(i)]);
}

}  // namespace parallel

}  // namespace pfdetr::kernels
