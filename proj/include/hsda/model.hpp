#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsda/losses.hpp"
#include "hsda/volume.hpp"

namespace hsda {

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Three encoder blocks (3x3x3 conv, bias, ReLU) with 2x max pooling after
// the first two, so the bottleneck sits at in_dims / 4. The decoder projects
// the bottleneck with a 1x1x1 conv, upsamples, adds the block-2 skip,
// applies a 3x3x3 conv + ReLU, upsamples again, adds the block-1 skip and
// ends in a 2-channel 1x1x1 softmax head.
struct NetSpec {
    Dims in_dims = cube(32);
    std::uint32_t c1 = 8;
    std::uint32_t c2 = 16;
    std::uint32_t c3 = 32;

    void validate() const;
    [[nodiscard]] Dims latent_dims() const { return Dims{in_dims.nx / 4, in_dims.ny / 4, in_dims.nz / 4}; }
    [[nodiscard]] std::size_t latent_size() const { return std::size_t(c3) * latent_dims().count(); }
    [[nodiscard]] std::size_t param_count() const;

    friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

// Offsets of each tensor inside the flat parameter vector.
struct ParamLayout {
    struct Slice {
        std::size_t offset = 0;
        std::size_t size = 0;
    };
    Slice w1, b1, w2, b2, w3, b3, wp, bp, w4, b4, wh, bh;
    std::size_t total = 0;

    static ParamLayout of(const NetSpec& spec);
};

struct ParamVector {
    std::vector<double> values;
    std::vector<double> grads;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    std::uint64_t step = 0;

    ParamVector() = default;
    explicit ParamVector(std::size_t n) : values(n, 0.0), grads(n, 0.0), adam_m(n, 0.0), adam_v(n, 0.0) {}

    [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
    void zero_grads();
};

// Uniform fan-in scaled init (bound sqrt(6 / fan_in)), zero biases.
ParamVector init_params(const NetSpec& spec, std::uint64_t seed);

struct ForwardTrace {
    NetSpec spec;
    std::vector<double> x;        // 1 x n0
    std::vector<double> a1;       // c1 x n0
    std::vector<double> p1;       // c1 x n1
    std::vector<std::uint32_t> p1_arg;
    std::vector<double> a2;       // c2 x n1
    std::vector<double> p2;       // c2 x n2
    std::vector<std::uint32_t> p2_arg;
    std::vector<double> latent;   // c3 x n2, the content feature
    std::vector<double> u2;       // c2 x n1
    std::vector<double> a4;       // c1 x n1
    std::vector<double> u1;       // c1 x n0
    std::vector<double> logits;   // 2 x n0
    Prob2 probs;
};

// Caller normalizes x. Throws ModelError naming the layer on a non-finite activation.
ForwardTrace forward(const NetSpec& spec, std::span<const double> weights, const Volume& x);
inline ForwardTrace forward(const NetSpec& spec, const ParamVector& params, const Volume& x) {
    return forward(spec, params.values, x);
}

// Upstream gradients; either may be empty, meaning zero.
struct Upstream {
    std::vector<double> d_logits;  // 2 x n0, channel-major [bg | fg]
    std::vector<double> d_latent;  // c3 x n2
};

// Accumulates the parameter gradient into `grads`. `weights` must be the
// ones that produced `trace`; `grads` may belong to a different vector.
void backward(std::span<const double> weights, const ForwardTrace& trace, const Upstream& up, std::span<double> grads);
inline void backward(ParamVector& params, const ForwardTrace& trace, const Upstream& up) {
    backward(params.values, trace, up, params.grads);
}

// Converts a gradient with respect to the foreground probability into one
// with respect to both logits, accumulating into d_logits.
void fg_prob_grad_to_logits(const Prob2& p, std::span<const double> d_fg, std::span<double> d_logits);

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam; zeroes the gradients afterwards. Throws on non-finite gradients.
void adam_step(ParamVector& params, const AdamOptions& opt);

enum class EmaRole { as_printed, teacher_is_ema };

EmaRole parse_ema_role(const std::string& s);
const char* to_string(EmaRole r);

// min(1 - 1/(iter + 1), decay)
double ema_alpha(std::uint64_t iter, double decay);

// as_printed:     student <- alpha * student + (1 - alpha) * teacher
// teacher_is_ema: teacher <- alpha * teacher + (1 - alpha) * student
// The other vector is left untouched.
void ema_update(ParamVector& student, ParamVector& teacher, std::uint64_t iter, double decay,
                EmaRole role = EmaRole::as_printed);

// ---------------------------------------------------------------------------
// CKPT1: "CKPT1", u32 nx, ny, nz, c1, c2, c3, u64 count, count x f64 values.
// All little-endian.
// ---------------------------------------------------------------------------
struct Checkpoint {
    NetSpec spec;
    std::vector<double> values;
};

std::vector<std::uint8_t> encode_checkpoint(const NetSpec& spec, std::span<const double> values);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const NetSpec& spec, std::span<const double> values);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hsda
