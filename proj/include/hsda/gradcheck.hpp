#pragma once

#include <cstdint>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "hsda/losses.hpp"
#include "hsda/model.hpp"
#include "hsda/spectral.hpp"
#include "hsda/volume.hpp"

namespace hsda {

struct GradcheckRow {
    std::string loss;
    std::size_t checked = 0;
    double max_rel_err = 0.0;
    std::size_t skipped = 0;  // draws whose difference interval crossed a ReLU or max-pool switch
};

// Composite loss of one source/target pair with all four forward passes
// sharing one parameter vector and the consistency term left undetached, so
// that the analytic gradient is the exact derivative of value().
struct EndToEndProblem {
    NetSpec spec;
    std::array<Volume, 4> inputs;  // normalized s, st, ts, t
    SegMask label;
    LossWeights weights{1.0, 1.0, 1.0, 0.5};
    TauMode tau_mode = TauMode::printed;

    static EndToEndProblem make(std::uint64_t seed, std::uint32_t patch = 16);

    [[nodiscard]] double value(std::span<const double> params) const;
    double value_and_grad(std::span<const double> params, std::span<double> grad) const;

    // ReLU signs and max-pool selections of all four passes. Within a region
    // of constant pattern the composite loss is smooth.
    [[nodiscard]] std::vector<std::uint8_t> activation_pattern(std::span<const double> params) const;
};

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
double relative_error(double analytic, double numeric);

// Central-difference checks of every analytic gradient on seeded random
// inputs: dice_ce (4^3 logits, h = 1e-5), semi_mse (4^3, both sides live),
// transwarp in both tau modes (length-16 features), and the end-to-end
// network on a 16^3 input through all three losses (25 parameters, h = 1e-4).
// End-to-end draws whose interval [x - h, x + h] changes the activation
// pattern are redrawn and counted as skipped.
std::vector<GradcheckRow> run_gradcheck(std::uint64_t seed);

std::string gradcheck_csv(const std::vector<GradcheckRow>& rows);

}  // namespace hsda
