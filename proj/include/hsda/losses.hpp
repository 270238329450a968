#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsda/volume.hpp"

namespace hsda {

class LossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Per-voxel two-class softmax output. bg + fg == 1 voxelwise.
struct Prob2 {
    Dims dims;
    std::vector<double> bg;
    std::vector<double> fg;
    // Log-softmax of the logits when built from them; empty otherwise, in
    // which case cross-entropy falls back to log(max(p, log_floor)).
    std::vector<double> log_bg;
    std::vector<double> log_fg;

    static Prob2 from_logits(const Dims& dims, std::span<const double> logits);  // channel-major [bg | fg]
};

// Gradient with respect to the two logit channels, channel-major [bg | fg].
struct LogitLoss {
    double value = 0.0;
    double dice = 0.0;
    double cross_entropy = 0.0;
    std::vector<double> grad_logits;
};

inline constexpr double dice_epsilon = 1e-6;
inline constexpr double log_floor = 1e-12;

// Soft Dice loss on the foreground channel plus voxel-mean two-class
// cross-entropy, for one sample. Batch means are taken by the caller.
LogitLoss dice_ce_loss(const Prob2& p, const SegMask& y);

struct SemiMseLoss {
    double value = 0.0;
    // Gradients with respect to the foreground probabilities. Student-side
    // entries stay zero when the student predictions are detached.
    std::vector<double> grad_s, grad_st, grad_ts, grad_t;
};

// mean(p_s - p_st)^2 + mean(p_ts - p_t)^2 over foreground probabilities.
// With detach_student, p_s and p_ts act as fixed pseudo-labels.
SemiMseLoss semi_mse_loss(std::span<const double> p_s, std::span<const double> p_st, std::span<const double> p_ts,
                          std::span<const double> p_t, bool detach_student = true);

// u.v / (|u| |v|); throws LossError on a zero-norm argument.
double cosine(std::span<const double> u, std::span<const double> v);

// Accumulates d(cosine)/du * scale into gu and d/dv * scale into gv.
void cosine_backward(std::span<const double> u, std::span<const double> v, double scale, std::span<double> gu,
                     std::span<double> gv);

// Slot order used throughout: source, source->target, target->source, target.
namespace slot {
inline constexpr std::size_t s = 0;
inline constexpr std::size_t st = 1;
inline constexpr std::size_t ts = 2;
inline constexpr std::size_t t = 3;
}  // namespace slot

struct FeatureQuad {
    std::array<std::vector<double>, 4> content;
    std::array<std::vector<double>, 4> style;

    void validate() const;
};

enum class TauMode { printed, infonce };

TauMode parse_tau_mode(const std::string& s);
const char* to_string(TauMode m);

struct TranswarpTerms {
    double pos_content = 0.0;  // h(z_s, z_st) + h(z_ts, z_t)
    double neg_content = 0.0;  // h(z_s, z_ts) + h(z_st, z_t)
    double pos_style = 0.0;    // h(s_s, s_ts) + h(s_s, s_t) + h(s_st, s_t) + h(s_st, s_ts)
};

TranswarpTerms transwarp_terms(const FeatureQuad& q);

// Loss as a function of the three similarity sums. In `printed` mode tau
// divides the positive numerator inside the log; in `infonce` mode every
// exponent is divided by tau instead.
double transwarp_from_terms(const TranswarpTerms& terms, double tau, TauMode mode);

struct TranswarpLoss {
    double value = 0.0;
    TranswarpTerms terms;
    std::array<std::vector<double>, 4> grad_content;
    std::array<std::vector<double>, 4> grad_style;
};

TranswarpLoss transwarp_loss(const FeatureQuad& q, double tau, TauMode mode = TauMode::printed);

struct LossWeights {
    double lambda1 = 0.8;
    double lambda2 = 0.1;
    double lambda3 = 0.1;
    double tau = 0.5;

    void validate() const;
};

double total_loss(double l_fully, double l_semi, double l_trans, const LossWeights& w);

}  // namespace hsda
