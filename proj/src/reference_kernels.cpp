#include <algorithm>
#include <cstddef>
#include <cstdint>

#include "dualnorm/kernels.hpp"

namespace dualnorm::kernels::reference {

namespace {

template <typename T>
T input_at(const ConvGeometry& g, std::span<const T> input, std::size_t n, std::size_t c, std::ptrdiff_t y,
           std::ptrdiff_t x) {
  if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.height) || x >= static_cast<std::ptrdiff_t>(g.width)) {
    return T{0};
  }
  return input[((n * g.in_channels + c) * g.height + static_cast<std::size_t>(y)) * g.width +
               static_cast<std::size_t>(x)];
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight, std::span<T> output) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          T sum{0};
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                sum += weight[((o * g.in_channels + c) * k + ky) * k + kx] * input_at(g, input, n, c, iy, ix);
              }
          output[((n * g.out_channels + o) * oh + y) * ow + x] = sum;
        }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  std::fill(grad_input.begin(), grad_input.end(), T{0});
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const T go = grad_output[((n * g.out_channels + o) * oh + y) * ow + x];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                grad_input[((n * g.in_channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width +
                           static_cast<std::size_t>(ix)] += go * weight[((o * g.in_channels + c) * k + ky) * k + kx];
              }
        }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weight) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          T sum{0};
          for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t y = 0; y < oh; ++y)
              for (std::size_t x = 0; x < ow; ++x) {
                const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                sum += grad_output[((n * g.out_channels + o) * oh + y) * ow + x] * input_at(g, input, n, c, iy, ix);
              }
          grad_weight[((o * g.in_channels + c) * k + ky) * k + kx] += sum;
        }
}

template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t height, std::size_t width, std::span<const T> input,
                      std::span<T> output, std::span<std::uint32_t> argmax) {
  const std::size_t oh = height / 2, ow = width / 2;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (p * height + 2 * y) * width + 2 * x;
        for (std::size_t d = 1; d < 4; ++d) {
          const std::size_t idx = (p * height + 2 * y + d / 2) * width + 2 * x + d % 2;
          if (input[idx] > input[best]) best = idx;
        }
        output[(p * oh + y) * ow + x] = input[best];
        argmax[(p * oh + y) * ow + x] = static_cast<std::uint32_t>(best);
      }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T sum{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        sum += av * bv;
      }
      c[i * ldc + j] = alpha * sum + (beta == T{0} ? T{0} : beta * c[i * ldc + j]);
    }
}

#define DUALNORM_INSTANTIATE(T)                                                                                      \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<T>);        \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, std::span<T>); \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,               \
                                          std::span<T>);                                                             \
  template void maxpool2_forward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>, std::span<T>,         \
                                    std::span<std::uint32_t>);                                                       \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, const T*, std::size_t, const T*,       \
                        std::size_t, T, T*, std::size_t);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm::kernels::reference
