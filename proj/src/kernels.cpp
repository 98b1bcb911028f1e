#include "dualnorm/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace dualnorm::kernels {

namespace {

// The OpenMP kernels parallelise over the batch; BLAS must not spawn its own
// threads underneath them.
struct BlasSingleThread {
  BlasSingleThread() { openblas_set_num_threads(1); }
};
const BlasSingleThread blas_single_thread;

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + y * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t x = 0; x < ow; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            out[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t k = g.kernel;
  std::fill(image, image + g.in_channels * g.height * g.width, T{0});
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const T* src = row + y * ow;
          for (std::size_t x = 0; x < ow; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

inline int thread_index() {
#if defined(_OPENMP)
  return omp_get_thread_num();
#else
  return 0;
#endif
}

}  // namespace

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                  const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                  std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight, std::span<T> output) {
  const std::size_t spatial = g.out_height() * g.out_width();
  const std::size_t patch = g.in_channels * g.kernel * g.kernel;
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * spatial;
  const bool pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : patch * spatial);
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
      const T* src = input.data() + n * in_stride;
      if (!pointwise) {
        im2col(g, src, col.data());
        src = col.data();
      }
      gemm<T>(false, false, g.out_channels, spatial, patch, T{1}, weight.data(), patch, src, spatial, T{0},
              output.data() + n * out_stride, spatial);
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input) {
  const std::size_t spatial = g.out_height() * g.out_width();
  const std::size_t patch = g.in_channels * g.kernel * g.kernel;
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * spatial;
  const bool pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : patch * spatial);
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
      T* dst = pointwise ? grad_input.data() + n * in_stride : col.data();
      gemm<T>(true, false, patch, spatial, g.out_channels, T{1}, weight.data(), patch,
              grad_output.data() + n * out_stride, spatial, T{0}, dst, spatial);
      if (!pointwise) col2im(g, col.data(), grad_input.data() + n * in_stride);
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weight) {
  const std::size_t spatial = g.out_height() * g.out_width();
  const std::size_t patch = g.in_channels * g.kernel * g.kernel;
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * spatial;
  const bool pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
  const int threads = max_threads();
  // Per-thread partial sums reduced in thread order so results do not depend on
  // scheduling for a fixed thread count.
  std::vector<std::vector<T>> partial(static_cast<std::size_t>(threads), std::vector<T>(grad_weight.size(), T{0}));
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : patch * spatial);
    std::vector<T>& acc = partial[static_cast<std::size_t>(thread_index())];
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
      const T* src = input.data() + n * in_stride;
      if (!pointwise) {
        im2col(g, src, col.data());
        src = col.data();
      }
      gemm<T>(false, true, g.out_channels, patch, spatial, T{1}, grad_output.data() + n * out_stride, spatial, src,
              spatial, T{1}, acc.data(), patch);
    }
  }
  for (const auto& acc : partial) {
    for (std::size_t i = 0; i < grad_weight.size(); ++i) grad_weight[i] += acc[i];
  }
}

template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t height, std::size_t width, std::span<const T> input,
                      std::span<T> output, std::span<std::uint32_t> argmax) {
  const std::size_t oh = height / 2, ow = width / 2;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(planes); ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * height * width;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = base + 2 * y * width + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * width + 2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        const std::size_t o = static_cast<std::size_t>(p) * oh * ow + y * ow + x;
        output[o] = input[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

template <typename T>
void maxpool2_backward(std::span<const T> grad_output, std::span<const std::uint32_t> argmax, std::span<T> grad_input) {
  std::fill(grad_input.begin(), grad_input.end(), T{0});
  // Windows do not overlap, so each input cell receives at most one write.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(grad_output.size()); ++i) {
    grad_input[argmax[i]] += grad_output[i];
  }
}

#define DUALNORM_INSTANTIATE(T)                                                                                      \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<T>);        \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<T>); \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,               \
                                          std::span<T>);                                                             \
  template void maxpool2_forward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>, std::span<T>,         \
                                    std::span<std::uint32_t>);                                                       \
  template void maxpool2_backward<T>(std::span<const T>, std::span<const std::uint32_t>, std::span<T>);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm::kernels
