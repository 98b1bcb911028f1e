#pragma once

// Compute kernels for convolution and pooling on NCHW tensors.
//
// Two implementations share one signature set:
//   kernels::            OpenMP over the batch, im2col + BLAS GEMM per sample.
//   kernels::reference:: single-threaded direct loops, no BLAS. Kept as the
//                        ground truth for tests and as the benchmark baseline.

#include <cstddef>
#include <cstdint>
#include <span>

namespace dualnorm::kernels {

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t input_size() const { return batch * in_channels * height * width; }
  std::size_t output_size() const { return batch * out_channels * out_height() * out_width(); }
  std::size_t weight_size() const { return out_channels * in_channels * kernel * kernel; }
};

// output = conv(input, weight); overwrites output.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight, std::span<T> output);

// grad_input = d(loss)/d(input); overwrites grad_input.
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input);

// grad_weight += d(loss)/d(weight).
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weight);

// 2x2 max pooling with stride 2 over planes = batch*channels; argmax records the
// flat input index that won each output cell.
template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t height, std::size_t width, std::span<const T> input,
                      std::span<T> output, std::span<std::uint32_t> argmax);

template <typename T>
void maxpool2_backward(std::span<const T> grad_output, std::span<const std::uint32_t> argmax, std::span<T> grad_input);

// C[M,N] = alpha * op(A) op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// Threads used by the OpenMP kernels (omp_get_max_threads, or 1 without OpenMP).
int max_threads();

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight, std::span<T> output);

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output, std::span<const T> weight,
                           std::span<T> grad_input);

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input, std::span<const T> grad_output,
                            std::span<T> grad_weight);

template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t height, std::size_t width, std::span<const T> input,
                      std::span<T> output, std::span<std::uint32_t> argmax);

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

}  // namespace reference

}  // namespace dualnorm::kernels
