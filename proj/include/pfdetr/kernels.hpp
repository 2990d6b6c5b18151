#pragma once

// Dense numeric kernels. `serial` holds straightforward reference loops used
// by the tests; `parallel` holds the OpenMP versions the library calls. Each
// parallel kernel distributes whole output rows over threads, so results do
// not depend on the thread count.

#include <cstddef>
#include <span>

namespace pfdetr::kernels {

enum class Trans { No, Yes };

/// Row-major GEMM shape: op(A) is m×k, op(B) is k×n, C is m×n.
struct GemmShape {
    std::size_t m = 0;
    std::size_t n = 0;
    std::size_t k = 0;
};

inline constexpr double kLayerNormEps = 1e-5;

namespace serial {

void gemm(Trans ta, Trans tb, GemmShape s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate);
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> out);
void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta,
                     std::span<double> out, std::span<double> mean, std::span<double> rstd);
void gelu(std::span<const double> x, std::span<double> out);

}  // namespace serial

namespace parallel {

void gemm(Trans ta, Trans tb, GemmShape s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate);
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> out);
void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                     std::span<const double> gamma, std::span<const double> beta,
                     std::span<double> out, std::span<double> mean, std::span<double> rstd);
void gelu(std::span<const double> x, std::span<double> out);

}  // namespace parallel

/// tanh-approximation GELU and its derivative.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

}  // namespace pfdetr::kernels
