#pragma once

// Dense 3D layer kernels on channel-major buffers ([channel][z][y][x], x fastest).
//
// The functions in hsda::kernels split their outermost channel loop across
// OpenMP threads. Every output element is owned by exactly one thread and is
// reduced in a fixed order, so results do not depend on the thread count.
// hsda::kernels::reference holds plain serial loops of the same operations;
// tests and the benchmark compare the two.
//
// Convolutions are 3x3x3 with zero padding ("same" output size). Weights are
// laid out [cout][cin][kz][ky][kx]. Backward kernels accumulate into their
// outputs.

#include <cstddef>
#include <cstdint>
#include <span>

#include "hsda/volume.hpp"

namespace hsda::kernels {

inline constexpr std::size_t taps = 27;

void conv3_forward(std::span<const double> in, const Dims& d, std::size_t cin, std::span<const double> weights,
                   std::span<const double> bias, std::size_t cout, std::span<double> out);

void conv3_backward_input(std::span<const double> grad_out, const Dims& d, std::size_t cin, std::size_t cout,
                          std::span<const double> weights, std::span<double> grad_in);

void conv3_backward_weights(std::span<const double> in, std::span<const double> grad_out, const Dims& d,
                            std::size_t cin, std::size_t cout, std::span<double> grad_weights,
                            std::span<double> grad_bias);

// 1x1x1 convolution; weights laid out [cout][cin].
void pointwise_forward(std::span<const double> in, std::size_t n, std::size_t cin, std::span<const double> weights,
                       std::span<const double> bias, std::size_t cout, std::span<double> out);

void pointwise_backward(std::span<const double> in, std::span<const double> grad_out, std::size_t n, std::size_t cin,
                        std::size_t cout, std::span<const double> weights, std::span<double> grad_in,
                        std::span<double> grad_weights, std::span<double> grad_bias);

// 2x2x2 max pooling, stride 2. `argmax` receives the input linear index
// (within the channel) of each selected element; ties pick the first.
void maxpool2_forward(std::span<const double> in, const Dims& d, std::size_t channels, std::span<double> out,
                      std::span<std::uint32_t> argmax);

void maxpool2_backward(std::span<const double> grad_out, std::span<const std::uint32_t> argmax, const Dims& d,
                       std::size_t channels, std::span<double> grad_in);

// Nearest-neighbour 2x upsampling from `coarse` dims to 2*coarse.
void upsample2_forward(std::span<const double> in, const Dims& coarse, std::size_t channels, std::span<double> out);

void upsample2_backward(std::span<const double> grad_out, const Dims& coarse, std::size_t channels,
                        std::span<double> grad_in);

void relu_inplace(std::span<double> x);
void relu_backward_inplace(std::span<const double> activated, std::span<double> grad);

[[nodiscard]] inline Dims half(const Dims& d) { return Dims{d.nx / 2, d.ny / 2, d.nz / 2}; }

namespace reference {

void conv3_forward(std::span<const double> in, const Dims& d, std::size_t cin, std::span<const double> weights,
                   std::span<const double> bias, std::size_t cout, std::span<double> out);

void conv3_backward_input(std::span<const double> grad_out, const Dims& d, std::size_t cin, std::size_t cout,
                          std::span<const double> weights, std::span<double> grad_in);

void conv3_backward_weights(std::span<const double> in, std::span<const double> grad_out, const Dims& d,
                            std::size_t cin, std::size_t cout, std::span<double> grad_weights,
                            std::span<double> grad_bias);

void maxpool2_forward(std::span<const double> in, const Dims& d, std::size_t channels, std::span<double> out);

}  // namespace reference

}  // namespace hsda::kernels
