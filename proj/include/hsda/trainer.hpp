#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsda/losses.hpp"
#include "hsda/model.hpp"
#include "hsda/spectral.hpp"
#include "hsda/volume.hpp"

namespace hsda {

enum class Mode { source_only, full_method, target_oracle };
enum class Ablation { none, fully, semi, transwarp, hsda };
enum class Transfer { hsda, fda, none };

Mode parse_mode(const std::string& s);
Ablation parse_ablation(const std::string& s);
Transfer parse_transfer(const std::string& s);
const char* to_string(Mode m);
const char* to_string(Ablation a);
const char* to_string(Transfer t);

struct TrainConfig {
    Mode mode = Mode::full_method;
    Ablation ablation = Ablation::none;

    double sigma = 0.1;  // HSG width, fraction of the normalized radius
    double tau = 0.5;
    TauMode tau_mode = TauMode::printed;
    double lambda1 = 0.8;
    double lambda2 = 0.1;
    double lambda3 = 0.1;
    Transfer transfer = Transfer::hsda;
    double fda_beta = 0.1;

    double lr0 = 1e-3;
    double lr_decay_factor = 0.1;
    std::uint32_t lr_decay_every = 10;
    std::uint32_t epochs = 30;
    std::uint32_t batch_size = 4;
    double ema_decay = 0.99;
    EmaRole ema_role = EmaRole::as_printed;

    std::uint32_t patch = 32;
    std::uint32_t c1 = 8, c2 = 16, c3 = 32;
    std::uint32_t n_train = 40;
    std::uint32_t n_eval = 10;
    std::uint32_t n_tubes = 3;
    double radius_min = 1.0;
    double radius_max = 3.0;

    std::uint64_t seed = 1;
    std::string output_dir;

    void validate() const;
    [[nodiscard]] NetSpec net_spec() const { return NetSpec{cube(patch), c1, c2, c3}; }
    [[nodiscard]] LossWeights weights() const { return LossWeights{lambda1, lambda2, lambda3, tau}; }

    // Returns a copy with the ablation's component switches applied:
    // fully -> no semi, no transwarp, no transfer; semi -> no transwarp, no
    // transfer; transwarp -> no transfer; hsda -> unchanged.
    [[nodiscard]] TrainConfig with_ablation() const;

    [[nodiscard]] std::string to_json() const;
    // Applies the keys present in `json` over *this. Unknown keys throw.
    void merge_json(const std::string& json);
    static TrainConfig from_json(const std::string& json);
};

// lr0 * factor^floor(epoch / every)
double lr_schedule(std::uint32_t epoch, const TrainConfig& cfg);

// Zero mean, unit (population) std; the std is floored at 1e-8.
Volume normalize(const Volume& v);

struct StepLosses {
    double fully = 0.0;
    double semi = 0.0;
    double transwarp = 0.0;
    double total = 0.0;
};

struct Batch {
    std::vector<Volume> source;
    std::vector<SegMask> labels;
    std::vector<Volume> target;
};

// Student and teacher of the mean-teacher pair. `descended()` is the network
// that takes the Adam step; the other follows it through the EMA update.
struct NetworkPair {
    NetSpec spec;
    ParamVector student;
    ParamVector teacher;
    EmaRole role = EmaRole::as_printed;
    std::uint64_t iter = 0;

    static NetworkPair make(const NetSpec& spec, std::uint64_t seed, EmaRole role);
    ParamVector& descended() { return role == EmaRole::as_printed ? teacher : student; }
    ParamVector& averaged() { return role == EmaRole::as_printed ? student : teacher; }
    [[nodiscard]] const ParamVector& averaged() const { return role == EmaRole::as_printed ? student : teacher; }
};

// The four network inputs of one source/target pair, before normalization.
struct StyledInputs {
    Volume s, st, ts, t;
};

StyledInputs make_inputs(const Volume& source, const Volume& target, const TrainConfig& cfg);

// One optimization step of the complete method. The descended network
// (per ema_role) runs on the source patch, both restyled patches and the
// target patch and receives the exact gradient of the weighted total. The
// consistency term compares its predictions on s->t and t against the
// student's predictions on s and t->s, held fixed as pseudo-labels; when the
// student is the EMA network those come from extra forward passes of it.
// The other network is then updated by EMA. Terms whose weight is zero are
// skipped and reported as 0.
StepLosses train_step(NetworkPair& nets, const Batch& batch, const TrainConfig& cfg, double lr);

// Supervised step on a single network (source-only and target-oracle runs).
StepLosses supervised_step(const NetSpec& spec, ParamVector& params, std::span<const Volume> images,
                           std::span<const SegMask> labels, const TrainConfig& cfg, double lr);

struct CaseMetrics {
    double dsc = 0, sen = 0, jac = 0, vs = 0;  // percent
    std::uint64_t tp = 0, fp = 0, fn = 0;
    bool flagged = false;  // an undefined ratio was set by convention
};

// Confusion-count metrics, all in percent. Empty prediction and empty truth
// score 100 on every metric and are flagged.
CaseMetrics case_metrics(const SegMask& pred, const SegMask& truth);
CaseMetrics metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn);

struct Summary {
    double mean = 0.0;
    double std = 0.0;  // population
};

struct EvalReport {
    std::vector<CaseMetrics> cases;
    Summary dsc, sen, jac, vs;
    std::size_t flagged = 0;

    [[nodiscard]] std::string to_csv() const;
    friend bool operator==(const EvalReport& a, const EvalReport& b) { return a.to_csv() == b.to_csv(); }
};

EvalReport summarize(std::vector<CaseMetrics> cases);

struct EvalCase {
    Volume image;
    SegMask truth;
};

// Normalizes each image, thresholds the foreground probability, scores the
// cases in parallel and reports them in input order.
EvalReport evaluate(const NetSpec& spec, std::span<const double> weights, std::span<const EvalCase> cases,
                    double threshold = 0.5);

struct LossRow {
    std::uint64_t step = 0;
    StepLosses losses;
    double lr = 0.0;
};

std::string losses_to_csv(std::span<const LossRow> rows);

// Phantom sets drawn from the config seed.
struct PhantomSets {
    std::vector<Phantom> source_train;  // modality A
    std::vector<Phantom> target_train;  // modality B
    std::vector<Phantom> target_eval;   // modality B, held out
};

PhantomSets make_phantom_sets(const TrainConfig& cfg);
std::vector<EvalCase> eval_cases(const PhantomSets& sets);

struct ExperimentResult {
    TrainConfig config;  // resolved, ablation applied
    EvalReport report;
    std::vector<LossRow> losses;
    NetSpec spec;
    std::vector<double> weights;  // evaluated network
};

// Trains per cfg.mode (and cfg.ablation for the full method), evaluates on
// held-out target phantoms and, if cfg.output_dir is set, writes report.csv,
// losses.csv, config.json and model.ckpt there.
ExperimentResult run_experiment(const TrainConfig& cfg, std::ostream* log = nullptr);

// Writes the four experiment artifacts into `dir`.
void persist_experiment(const ExperimentResult& r, const std::filesystem::path& dir);

}  // namespace hsda
