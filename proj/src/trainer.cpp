#include "hsda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "hsda/io.hpp"
#include "json.hpp"

namespace hsda {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

Mode parse_mode(const std::string& s) {
    if (s == "source_only") return Mode::source_only;
    if (s == "full_method") return Mode::full_method;
    if (s == "target_oracle") return Mode::target_oracle;
    throw std::invalid_argument("unknown mode '" + s + "' (expected source_only, full_method or target_oracle)");
}

Ablation parse_ablation(const std::string& s) {
    if (s == "none") return Ablation::none;
    if (s == "fully") return Ablation::fully;
    if (s == "semi") return Ablation::semi;
    if (s == "transwarp") return Ablation::transwarp;
    if (s == "hsda") return Ablation::hsda;
    throw std::invalid_argument("unknown ablation '" + s + "' (expected none, fully, semi, transwarp or hsda)");
}

Transfer parse_transfer(const std::string& s) {
    if (s == "hsda") return Transfer::hsda;
    if (s == "fda") return Transfer::fda;
    if (s == "none") return Transfer::none;
    throw std::invalid_argument("unknown transfer '" + s + "' (expected hsda, fda or none)");
}

const char* to_string(Mode m) {
    switch (m) {
        case Mode::source_only: return "source_only";
        case Mode::full_method: return "full_method";
        case Mode::target_oracle: return "target_oracle";
    }
    return "?";
}

const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::fully: return "fully";
        case Ablation::semi: return "semi";
        case Ablation::transwarp: return "transwarp";
        case Ablation::hsda: return "hsda";
    }
    return "?";
}

const char* to_string(Transfer t) {
    switch (t) {
        case Transfer::hsda: return "hsda";
        case Transfer::fda: return "fda";
        case Transfer::none: return "none";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    weights().validate();
    if (!(sigma > 0)) throw std::invalid_argument("sigma must be positive");
    if (!(fda_beta > 0 && fda_beta <= 0.5)) throw std::invalid_argument("fda_beta must lie in (0, 0.5]");
    if (!(lr0 > 0) || !(lr_decay_factor > 0) || lr_decay_every == 0)
        throw std::invalid_argument("learning-rate schedule values must be positive");
    if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (!(ema_decay >= 0 && ema_decay < 1)) throw std::invalid_argument("ema_decay must lie in [0, 1)");
    if (n_train == 0 || n_eval == 0) throw std::invalid_argument("n_train and n_eval must be positive");
    net_spec().validate();
    PhantomSpec{cube(patch), n_tubes, radius_min, radius_max, Modality::A, 0}.validate();
}

TrainConfig TrainConfig::with_ablation() const {
    TrainConfig c = *this;
    switch (ablation) {
        case Ablation::none:
        case Ablation::hsda: break;
        case Ablation::fully:
            c.lambda2 = 0.0;
            c.lambda3 = 0.0;
            c.transfer = Transfer::none;
            break;
        case Ablation::semi:
            c.lambda3 = 0.0;
            c.transfer = Transfer::none;
            break;
        case Ablation::transwarp: c.transfer = Transfer::none; break;
    }
    return c;
}

std::string TrainConfig::to_json() const {
    json j;
    j["mode"] = to_string(mode);
    j["ablation"] = to_string(ablation);
    j["sigma"] = sigma;
    j["tau"] = tau;
    j["tau_mode"] = hsda::to_string(tau_mode);
    j["lambda1"] = lambda1;
    j["lambda2"] = lambda2;
    j["lambda3"] = lambda3;
    j["transfer"] = to_string(transfer);
    j["fda_beta"] = fda_beta;
    j["lr0"] = lr0;
    j["lr_decay_factor"] = lr_decay_factor;
    j["lr_decay_every"] = lr_decay_every;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["ema_decay"] = ema_decay;
    j["ema_role"] = hsda::to_string(ema_role);
    j["patch"] = patch;
    j["channels"] = {c1, c2, c3};
    j["n_train"] = n_train;
    j["n_eval"] = n_eval;
    j["n_tubes"] = n_tubes;
    j["radius_min"] = radius_min;
    j["radius_max"] = radius_max;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    return j.dump(2) + "\n";
}

void TrainConfig::merge_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");

    TrainConfig c = *this;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "mode") c.mode = parse_mode(v.get<std::string>());
            else if (key == "ablation") c.ablation = parse_ablation(v.get<std::string>());
            else if (key == "sigma") c.sigma = v.get<double>();
            else if (key == "tau") c.tau = v.get<double>();
            else if (key == "tau_mode") c.tau_mode = parse_tau_mode(v.get<std::string>());
            else if (key == "lambda1") c.lambda1 = v.get<double>();
            else if (key == "lambda2") c.lambda2 = v.get<double>();
            else if (key == "lambda3") c.lambda3 = v.get<double>();
            else if (key == "transfer") c.transfer = parse_transfer(v.get<std::string>());
            else if (key == "fda_beta") c.fda_beta = v.get<double>();
            else if (key == "lr0") c.lr0 = v.get<double>();
            else if (key == "lr_decay_factor") c.lr_decay_factor = v.get<double>();
            else if (key == "lr_decay_every") c.lr_decay_every = v.get<std::uint32_t>();
            else if (key == "epochs") c.epochs = v.get<std::uint32_t>();
            else if (key == "batch_size") c.batch_size = v.get<std::uint32_t>();
            else if (key == "ema_decay") c.ema_decay = v.get<double>();
            else if (key == "ema_role") c.ema_role = parse_ema_role(v.get<std::string>());
            else if (key == "patch") c.patch = v.get<std::uint32_t>();
            else if (key == "channels") {
                const auto ch = v.get<std::vector<std::uint32_t>>();
                if (ch.size() != 3) throw std::invalid_argument("channels must list exactly three values");
                c.c1 = ch[0], c.c2 = ch[1], c.c3 = ch[2];
            }
            else if (key == "n_train") c.n_train = v.get<std::uint32_t>();
            else if (key == "n_eval") c.n_eval = v.get<std::uint32_t>();
            else if (key == "n_tubes") c.n_tubes = v.get<std::uint32_t>();
            else if (key == "radius_min") c.radius_min = v.get<double>();
            else if (key == "radius_max") c.radius_max = v.get<double>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "output_dir") c.output_dir = v.get<std::string>();
            else throw std::invalid_argument("unknown config key '" + key + "'");
        } catch (const json::exception& e) {
            throw std::invalid_argument("config key '" + key + "' has the wrong type: " + e.what());
        }
    }
    *this = std::move(c);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    TrainConfig c;
    c.merge_json(text);
    return c;
}

double lr_schedule(std::uint32_t epoch, const TrainConfig& cfg) {
    // Repeated multiplication keeps the decade steps exact (0.001 * 0.1 == 0.0001).
    double lr = cfg.lr0;
    for (std::uint32_t k = 0; k < epoch / cfg.lr_decay_every; ++k) lr *= cfg.lr_decay_factor;
    return lr;
}

Volume normalize(const Volume& v) {
    const double n = double(v.data.size());
    const double mean = std::accumulate(v.data.begin(), v.data.end(), 0.0) / n;
    double var = 0.0;
    for (double x : v.data) var += (x - mean) * (x - mean);
    const double sd = std::max(std::sqrt(var / n), 1e-8);
    Volume out(v.dims);
    for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] = (v.data[i] - mean) / sd;
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xd1b54a32d192ed03ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void add_scaled(std::span<double> dst, std::span<const double> src, double scale) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace

NetworkPair NetworkPair::make(const NetSpec& spec, std::uint64_t seed, EmaRole role) {
    NetworkPair p;
    p.spec = spec;
    p.student = init_params(spec, seed);
    p.teacher = p.student;
    p.role = role;
    return p;
}

StyledInputs make_inputs(const Volume& source, const Volume& target, const TrainConfig& cfg) {
    switch (cfg.transfer) {
        case Transfer::none: return {source, source, target, target};
        case Transfer::hsda: {
            const auto mask = make_hsg_mask(source.dims, cfg.sigma);
            return {source, hsda_transfer(source, target, mask), hsda_transfer(target, source, mask), target};
        }
        case Transfer::fda: {
            const auto mask = make_fda_mask(source.dims, cfg.fda_beta);
            return {source, hsda_transfer(source, target, mask), hsda_transfer(target, source, mask), target};
        }
    }
    throw std::logic_error("unhandled transfer kind");
}

StepLosses train_step(NetworkPair& nets, const Batch& batch, const TrainConfig& cfg, double lr) {
    const std::size_t b = batch.source.size();
    if (b == 0 || batch.labels.size() != b || batch.target.size() != b)
        throw std::invalid_argument("train_step: batch needs equal, nonzero counts of source, label and target patches");

    const LossWeights w = cfg.weights();
    const bool cross_terms = w.lambda2 > 0 || w.lambda3 > 0;
    const NetSpec& spec = nets.spec;
    const Dims latent_dims = spec.latent_dims();
    const std::size_t latent_len = spec.latent_size();
    const SpectralMask style_mask = make_hsg_mask(latent_dims, cfg.sigma);

    ParamVector& desc = nets.descended();
    const ParamVector& avg = nets.averaged();
    // The student supplies the pseudo-labels. When the student is the EMA
    // network it needs its own forward passes; otherwise the descended
    // network's passes already are the student's.
    const bool student_is_avg = &avg == &nets.student;
    const double inv_b = 1.0 / double(b);
    StepLosses out;

    for (std::size_t i = 0; i < b; ++i) {
        const StyledInputs raw = make_inputs(batch.source[i], batch.target[i], cfg);

        std::array<ForwardTrace, 4> tr;
        std::array<Upstream, 4> up;
        tr[slot::s] = forward(spec, desc, normalize(raw.s));
        const LogitLoss fully = dice_ce_loss(tr[slot::s].probs, batch.labels[i]);
        out.fully += fully.value * inv_b;
        up[slot::s].d_logits = fully.grad_logits;
        for (auto& g : up[slot::s].d_logits) g *= w.lambda1 * inv_b;

        if (!cross_terms) {
            backward(desc, tr[slot::s], up[slot::s]);
            continue;
        }

        tr[slot::st] = forward(spec, desc, normalize(raw.st));
        tr[slot::ts] = forward(spec, desc, normalize(raw.ts));
        tr[slot::t] = forward(spec, desc, normalize(raw.t));
        const std::size_t n0 = tr[slot::s].probs.fg.size();
        for (std::size_t k = 1; k < 4; ++k) up[k].d_logits.assign(2 * n0, 0.0);

        if (w.lambda2 > 0) {
            std::vector<double> pseudo_s, pseudo_ts;
            if (student_is_avg) {
                pseudo_s = forward(spec, avg, normalize(raw.s)).probs.fg;
                pseudo_ts = forward(spec, avg, normalize(raw.ts)).probs.fg;
            } else {
                pseudo_s = tr[slot::s].probs.fg;
                pseudo_ts = tr[slot::ts].probs.fg;
            }
            const SemiMseLoss semi = semi_mse_loss(pseudo_s, tr[slot::st].probs.fg, pseudo_ts, tr[slot::t].probs.fg,
                                                   /*detach_student=*/true);
            out.semi += semi.value * inv_b;
            std::vector<double> g(n0);
            std::transform(semi.grad_st.begin(), semi.grad_st.end(), g.begin(),
                           [&](double v) { return v * w.lambda2 * inv_b; });
            fg_prob_grad_to_logits(tr[slot::st].probs, g, up[slot::st].d_logits);
            std::transform(semi.grad_t.begin(), semi.grad_t.end(), g.begin(),
                           [&](double v) { return v * w.lambda2 * inv_b; });
            fg_prob_grad_to_logits(tr[slot::t].probs, g, up[slot::t].d_logits);
        }

        if (w.lambda3 > 0) {
            FeatureQuad quad;
            for (std::size_t k = 0; k < 4; ++k) {
                quad.content[k] = tr[k].latent;
                quad.style[k].resize(latent_len);
                lowpass_channels(tr[k].latent, quad.style[k], latent_dims, spec.c3, style_mask);
            }
            const TranswarpLoss tw = transwarp_loss(quad, w.tau, cfg.tau_mode);
            out.transwarp += tw.value * inv_b;

            std::vector<double> style_back(latent_len);
            for (std::size_t k = 0; k < 4; ++k) {
                // The low-pass operator is self-adjoint, so it maps style gradients back onto the latent.
                lowpass_channels(tw.grad_style[k], style_back, latent_dims, spec.c3, style_mask);
                up[k].d_latent.assign(latent_len, 0.0);
                add_scaled(up[k].d_latent, tw.grad_content[k], w.lambda3 * inv_b);
                add_scaled(up[k].d_latent, style_back, w.lambda3 * inv_b);
            }
        }

        for (std::size_t k = 0; k < 4; ++k) backward(desc, tr[k], up[k]);
    }

    out.total = total_loss(out.fully, out.semi, out.transwarp, w);
    adam_step(desc, AdamOptions{lr});
    ema_update(nets.student, nets.teacher, nets.iter, cfg.ema_decay, nets.role);
    ++nets.iter;
    return out;
}

StepLosses supervised_step(const NetSpec& spec, ParamVector& params, std::span<const Volume> images,
                           std::span<const SegMask> labels, const TrainConfig& cfg, double lr) {
    const std::size_t b = images.size();
    if (b == 0 || labels.size() != b) throw std::invalid_argument("supervised_step: images and labels must pair up");
    const LossWeights w = cfg.weights();
    const double inv_b = 1.0 / double(b);
    StepLosses out;
    for (std::size_t i = 0; i < b; ++i) {
        const ForwardTrace tr = forward(spec, params, normalize(images[i]));
        const LogitLoss fully = dice_ce_loss(tr.probs, labels[i]);
        out.fully += fully.value * inv_b;
        Upstream up;
        up.d_logits = fully.grad_logits;
        for (auto& g : up.d_logits) g *= w.lambda1 * inv_b;
        backward(params, tr, up);
    }
    out.total = total_loss(out.fully, 0.0, 0.0, w);
    adam_step(params, AdamOptions{lr});
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

CaseMetrics metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    CaseMetrics m;
    m.tp = tp, m.fp = fp, m.fn = fn;
    const double t = double(tp), p = double(fp), n = double(fn);
    const double union2 = 2 * t + p + n;
    if (union2 == 0) {
        m.dsc = m.sen = m.jac = m.vs = 100.0;
        m.flagged = true;
        return m;
    }
    m.dsc = 100.0 * 2 * t / union2;
    m.jac = 100.0 * t / (t + p + n);
    m.vs = 100.0 * (1.0 - std::abs(p - n) / union2);
    if (tp + fn == 0) {
        m.sen = 100.0;  // nothing to detect
        m.flagged = true;
    } else {
        m.sen = 100.0 * t / (t + n);
    }
    return m;
}

CaseMetrics case_metrics(const SegMask& pred, const SegMask& truth) {
    if (pred.dims != truth.dims) throw std::invalid_argument("case_metrics: prediction and truth dims differ");
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = truth.data[i] != 0;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
    }
    return metrics_from_counts(tp, fp, fn);
}

namespace {

Summary summary_of(const std::vector<CaseMetrics>& cs, double CaseMetrics::*field) {
    Summary s;
    if (cs.empty()) return s;
    for (const auto& c : cs) s.mean += c.*field;
    s.mean /= double(cs.size());
    double var = 0;
    for (const auto& c : cs) var += (c.*field - s.mean) * (c.*field - s.mean);
    s.std = std::sqrt(var / double(cs.size()));
    return s;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

EvalReport summarize(std::vector<CaseMetrics> cases) {
    EvalReport r;
    r.cases = std::move(cases);
    r.dsc = summary_of(r.cases, &CaseMetrics::dsc);
    r.sen = summary_of(r.cases, &CaseMetrics::sen);
    r.jac = summary_of(r.cases, &CaseMetrics::jac);
    r.vs = summary_of(r.cases, &CaseMetrics::vs);
    r.flagged = static_cast<std::size_t>(std::count_if(r.cases.begin(), r.cases.end(), [](const auto& c) { return c.flagged; }));
    return r;
}

std::string EvalReport::to_csv() const {
    std::string s = "case,dsc,sen,jac,vs,tp,fp,fn,flagged\n";
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        s += std::to_string(i) + "," + fmt_double(c.dsc) + "," + fmt_double(c.sen) + "," + fmt_double(c.jac) + "," +
             fmt_double(c.vs) + "," + std::to_string(c.tp) + "," + std::to_string(c.fp) + "," + std::to_string(c.fn) +
             "," + (c.flagged ? "1" : "0") + "\n";
    }
    s += "mean," + fmt_double(dsc.mean) + "," + fmt_double(sen.mean) + "," + fmt_double(jac.mean) + "," +
         fmt_double(vs.mean) + ",,,," + std::to_string(flagged) + "\n";
    s += "std," + fmt_double(dsc.std) + "," + fmt_double(sen.std) + "," + fmt_double(jac.std) + "," +
         fmt_double(vs.std) + ",,,,\n";
    return s;
}

EvalReport evaluate(const NetSpec& spec, std::span<const double> weights, std::span<const EvalCase> cases,
                    double threshold) {
    if (cases.empty()) throw std::invalid_argument("evaluate: no cases");
    std::vector<CaseMetrics> metrics(cases.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < cases.size(); ++i) {
        try {
            const ForwardTrace tr = forward(spec, weights, normalize(cases[i].image));
            SegMask pred(cases[i].image.dims);
            for (std::size_t v = 0; v < pred.data.size(); ++v) pred.data[v] = tr.probs.fg[v] > threshold ? 1 : 0;
            metrics[i] = case_metrics(pred, cases[i].truth);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return summarize(std::move(metrics));
}

std::string losses_to_csv(std::span<const LossRow> rows) {
    std::string s = "step,l_fully,l_semi,l_transwarp,total,lr\n";
    for (const auto& r : rows)
        s += std::to_string(r.step) + "," + fmt_double(r.losses.fully) + "," + fmt_double(r.losses.semi) + "," +
             fmt_double(r.losses.transwarp) + "," + fmt_double(r.losses.total) + "," + fmt_double(r.lr) + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

PhantomSets make_phantom_sets(const TrainConfig& cfg) {
    const auto make = [&](std::uint32_t count, Modality m, std::uint64_t stream) {
        std::vector<Phantom> out(count);
        std::vector<PhantomSpec> specs(count);
        for (std::uint32_t i = 0; i < count; ++i)
            specs[i] = PhantomSpec{cube(cfg.patch), cfg.n_tubes, cfg.radius_min, cfg.radius_max, m,
                                   mix_seed(cfg.seed, stream, i)};
        for (const auto& s : specs) s.validate();
#pragma omp parallel for schedule(static)
        for (std::uint32_t i = 0; i < count; ++i) out[i] = generate_phantom(specs[i]);
        return out;
    };
    PhantomSets sets;
    sets.source_train = make(cfg.n_train, Modality::A, 1);
    sets.target_train = make(cfg.n_train, Modality::B, 2);
    sets.target_eval = make(cfg.n_eval, Modality::B, 3);
    return sets;
}

std::vector<EvalCase> eval_cases(const PhantomSets& sets) {
    std::vector<EvalCase> cases;
    for (const auto& p : sets.target_eval) cases.push_back({p.volume, p.mask});
    return cases;
}

namespace {

void require_finite_losses(const StepLosses& l, std::uint64_t step) {
    for (double v : {l.fully, l.semi, l.transwarp, l.total})
        if (!std::isfinite(v)) throw std::runtime_error("non-finite loss at step " + std::to_string(step));
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

}  // namespace

ExperimentResult run_experiment(const TrainConfig& input_cfg, std::ostream* log) {
    ExperimentResult result;
    result.config = input_cfg.with_ablation();
    const TrainConfig& cfg = result.config;
    cfg.validate();
    result.spec = cfg.net_spec();

    const PhantomSets sets = make_phantom_sets(cfg);
    const std::size_t n = cfg.n_train;
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::uint64_t init_seed = mix_seed(cfg.seed, 5);
    std::uint64_t step = 0;

    const auto run_step = [&](auto&& body) {
        try {
            return body();
        } catch (const std::exception& e) {
            throw std::runtime_error("step " + std::to_string(step) + ": " + e.what());
        }
    };

    if (cfg.mode == Mode::full_method) {
        NetworkPair nets = NetworkPair::make(result.spec, init_seed, cfg.ema_role);
        for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            const double lr = lr_schedule(epoch, cfg);
            const auto perm_s = permutation(n, mix_seed(cfg.seed, 6, epoch));
            const auto perm_t = permutation(n, mix_seed(cfg.seed, 7, epoch));
            for (std::size_t k = 0; k < steps_per_epoch; ++k) {
                Batch batch;
                for (std::size_t j = k * cfg.batch_size; j < std::min(n, (k + 1) * cfg.batch_size); ++j) {
                    batch.source.push_back(sets.source_train[perm_s[j]].volume);
                    batch.labels.push_back(sets.source_train[perm_s[j]].mask);
                    batch.target.push_back(sets.target_train[perm_t[j]].volume);
                }
                const StepLosses l = run_step([&] { return train_step(nets, batch, cfg, lr); });
                require_finite_losses(l, step);
                result.losses.push_back({step++, l, lr});
            }
            if (log) {
                const auto& last = result.losses.back().losses;
                *log << "epoch " << epoch + 1 << "/" << cfg.epochs << " lr " << lr << " fully " << last.fully
                     << " semi " << last.semi << " transwarp " << last.transwarp << " total " << last.total << "\n";
            }
        }
        result.weights = nets.averaged().values;
    } else {
        const auto& train = cfg.mode == Mode::source_only ? sets.source_train : sets.target_train;
        ParamVector params = init_params(result.spec, init_seed);
        for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            const double lr = lr_schedule(epoch, cfg);
            const auto perm = permutation(n, mix_seed(cfg.seed, 6, epoch));
            for (std::size_t k = 0; k < steps_per_epoch; ++k) {
                std::vector<Volume> images;
                std::vector<SegMask> labels;
                for (std::size_t j = k * cfg.batch_size; j < std::min(n, (k + 1) * cfg.batch_size); ++j) {
                    images.push_back(train[perm[j]].volume);
                    labels.push_back(train[perm[j]].mask);
                }
                const StepLosses l =
                    run_step([&] { return supervised_step(result.spec, params, images, labels, cfg, lr); });
                require_finite_losses(l, step);
                result.losses.push_back({step++, l, lr});
            }
            if (log)
                *log << "epoch " << epoch + 1 << "/" << cfg.epochs << " lr " << lr << " fully "
                     << result.losses.back().losses.fully << "\n";
        }
        result.weights = params.values;
    }

    const auto cases = eval_cases(sets);
    result.report = evaluate(result.spec, result.weights, cases);
    if (!cfg.output_dir.empty()) persist_experiment(result, cfg.output_dir);
    return result;
}

void persist_experiment(const ExperimentResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "report.csv", r.report.to_csv());
    write_file_atomic(dir / "losses.csv", losses_to_csv(r.losses));
    write_file_atomic(dir / "config.json", r.config.to_json());
    save_checkpoint(dir / "model.ckpt", r.spec, r.weights);
}

}  // namespace hsda
