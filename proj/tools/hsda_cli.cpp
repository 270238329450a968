// hsda: phantom generation, spectral style transfer, gradient checks,
// training and evaluation from one binary.
//
// Exit codes: 0 success (and --help), 1 usage error, 2 runtime error.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hsda/gradcheck.hpp"
#include "hsda/io.hpp"
#include "hsda/model.hpp"
#include "hsda/spectral.hpp"
#include "hsda/trainer.hpp"
#include "hsda/volume.hpp"

namespace fs = std::filesystem;
using namespace hsda;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string need_out(const Globals& g, const char* what) {
    if (g.out.empty()) throw UsageError(std::string("--out is required (") + what + ")");
    return g.out;
}

Dims parse_dims(const std::string& s) {
    unsigned a = 0, b = 0, c = 0;
    char tail = 0;
    if (std::sscanf(s.c_str(), "%ux%ux%u%c", &a, &b, &c, &tail) == 3) return Dims{a, b, c};
    if (std::sscanf(s.c_str(), "%u%c", &a, &tail) == 1) return cube(a);
    throw UsageError("--dims expects N or NxNyNz, got '" + s + "'");
}

void print_summary(const EvalReport& r) {
    std::printf("cases %zu (flagged %zu)\n", r.cases.size(), r.flagged);
    std::printf("DSC %.2f +- %.2f\nSen %.2f +- %.2f\nJac %.2f +- %.2f\nVS  %.2f +- %.2f\n", r.dsc.mean, r.dsc.std,
                r.sen.mean, r.sen.std, r.jac.mean, r.jac.std, r.vs.mean, r.vs.std);
}

TrainConfig base_config(const Globals& g) {
    TrainConfig cfg;
    if (!g.config.empty()) cfg.merge_json(read_text_file(g.config));
    if (g.seed) cfg.seed = *g.seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HSDA style transfer and transwarp-contrastive UDA toolkit"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "RNG seed");
    app.add_option("--config", g.config, "TrainConfig JSON; explicit flags override its keys");
    app.add_option("--out", g.out, "output file (gen, transfer, mask, mip) or directory (gradcheck, train, eval)");

    // gen
    auto* gen = app.add_subcommand("gen", "write a synthetic vessel phantom (VOL1 with mask)");
    std::string gen_dims = "32", gen_modality = "A";
    std::uint32_t gen_tubes = 3;
    double gen_rmin = 1.0, gen_rmax = 3.0;
    gen->add_option("--dims", gen_dims, "N or NxNyNz")->capture_default_str();
    gen->add_option("--modality", gen_modality, "A or B")->capture_default_str();
    gen->add_option("--tubes", gen_tubes, "number of tubes")->capture_default_str();
    gen->add_option("--rmin", gen_rmin, "minimum tube radius (voxels)")->capture_default_str();
    gen->add_option("--rmax", gen_rmax, "maximum tube radius (voxels)")->capture_default_str();

    // transfer
    auto* xfer = app.add_subcommand("transfer", "move the target's low-frequency amplitude onto the source");
    std::string src_path, tgt_path, mask_type = "hsg";
    double sigma = 0.1, beta = 0.1;
    xfer->add_option("--src", src_path, "source VOL1")->required();
    xfer->add_option("--tgt", tgt_path, "target VOL1")->required();
    xfer->add_option("--sigma", sigma, "HSG mask width")->capture_default_str();
    xfer->add_option("--mask-type", mask_type, "hsg or fda")
        ->check(CLI::IsMember({"hsg", "fda"}))
        ->capture_default_str();
    xfer->add_option("--beta", beta, "FDA half-width fraction")->capture_default_str();

    // mask
    auto* mask = app.add_subcommand("mask", "export a centered spectral mask as VOL1");
    std::string mask_dims = "32", mask_kind = "hsg";
    double mask_sigma = 0.1, mask_beta = 0.1;
    mask->add_option("--dims", mask_dims, "N or NxNyNz")->capture_default_str();
    mask->add_option("--type", mask_kind, "hsg or fda")->check(CLI::IsMember({"hsg", "fda"}))->capture_default_str();
    mask->add_option("--sigma", mask_sigma, "HSG width")->capture_default_str();
    mask->add_option("--beta", mask_beta, "FDA half-width fraction")->capture_default_str();

    // mip
    auto* mip = app.add_subcommand("mip", "maximum intensity projection to 8-bit PGM");
    std::string mip_in, mip_axis = "z";
    bool mip_label = false;
    mip->add_option("--in", mip_in, "VOL1 input")->required();
    mip->add_option("--axis", mip_axis, "x, y or z")->check(CLI::IsMember({"x", "y", "z"}))->capture_default_str();
    mip->add_flag("--label", mip_label, "project the stored mask instead of the intensities");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "central-difference check of every analytic gradient");

    // train
    auto* train = app.add_subcommand("train", "train, evaluate on held-out target phantoms, write artifacts");
    std::string mode, ablation, tau_mode, ema_role, transfer;
    std::optional<double> t_sigma, t_tau, t_beta, t_lr;
    std::optional<std::uint32_t> t_epochs, t_ntrain, t_neval, t_batch;
    train->add_option("--mode", mode, "source_only, full_method or target_oracle")
        ->required()
        ->check(CLI::IsMember({"source_only", "full_method", "target_oracle"}));
    train->add_option("--ablation", ablation, "fully, semi, transwarp or hsda")
        ->check(CLI::IsMember({"none", "fully", "semi", "transwarp", "hsda"}));
    train->add_option("--sigma", t_sigma, "HSG width");
    train->add_option("--tau", t_tau, "transwarp temperature");
    train->add_option("--tau-mode", tau_mode, "printed or infonce")->check(CLI::IsMember({"printed", "infonce"}));
    train->add_option("--ema-role", ema_role, "as_printed or teacher_is_ema")
        ->check(CLI::IsMember({"as_printed", "teacher_is_ema"}));
    train->add_option("--transfer", transfer, "hsda, fda or none")->check(CLI::IsMember({"hsda", "fda", "none"}));
    train->add_option("--fda-beta", t_beta, "FDA half-width fraction");
    train->add_option("--lr", t_lr, "initial learning rate");
    train->add_option("--epochs", t_epochs, "epochs");
    train->add_option("--batch", t_batch, "batch size");
    train->add_option("--n-train", t_ntrain, "training phantoms per modality");
    train->add_option("--n-eval", t_neval, "held-out target phantoms");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out phantoms of a config");
    std::string ckpt;
    double threshold = 0.5;
    ev->add_option("--checkpoint", ckpt, "CKPT1 file")->required();
    ev->add_option("--threshold", threshold, "foreground probability threshold")->capture_default_str();

    for (auto* sub : {gen, xfer, mask, mip, gc, train, ev}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*gen) {
            PhantomSpec spec{parse_dims(gen_dims), gen_tubes, gen_rmin, gen_rmax, parse_modality(gen_modality),
                             g.seed.value_or(0)};
            const auto out = need_out(g, "VOL1 path");
            const Phantom p = generate_phantom(spec);
            vol_write(out, p.volume, p.mask);
            std::printf("wrote %s: dims %s, modality %s, seed %llu, foreground %.4f\n", out.c_str(),
                        spec.dims.str().c_str(), to_string(spec.modality), (unsigned long long)spec.seed,
                        p.mask.foreground_fraction());
        } else if (*xfer) {
            const auto out = need_out(g, "VOL1 path");
            const VolumeFile src = vol_read(src_path);
            const VolumeFile tgt = vol_read(tgt_path);
            if (src.volume.dims != tgt.volume.dims) {
                std::fprintf(stderr, "error: dims mismatch: src %s, tgt %s\n", src.volume.dims.str().c_str(),
                             tgt.volume.dims.str().c_str());
                return 2;
            }
            const SpectralMask k = mask_type == "hsg" ? make_hsg_mask(src.volume.dims, sigma)
                                                      : make_fda_mask(src.volume.dims, beta);
            const TransferResult r = hsda_transfer_ex(src.volume, tgt.volume, k);
            vol_write(out, r.volume, src.mask);
            const auto [lo, hi] = std::minmax_element(r.volume.data.begin(), r.volume.data.end());
            std::printf("wrote %s\nmax imaginary residue %.3e\noutput range [%.6g, %.6g]\n", out.c_str(), r.max_imag,
                        *lo, *hi);
        } else if (*mask) {
            const auto out = need_out(g, "VOL1 path");
            const Dims d = parse_dims(mask_dims);
            const SpectralMask k = mask_kind == "hsg" ? make_hsg_mask(d, mask_sigma) : make_fda_mask(d, mask_beta);
            const Volume v = k.as_volume();
            vol_write(out, v);
            double sum = 0.0;
            for (double x : v.data) sum += x;
            std::printf("wrote %s: %s mask %s, DC at center, weight sum %.6g\n", out.c_str(), mask_kind.c_str(),
                        d.str().c_str(), sum);
        } else if (*mip) {
            const auto out = need_out(g, "PGM path");
            const VolumeFile f = vol_read(mip_in);
            Volume v = f.volume;
            if (mip_label) {
                if (!f.mask) throw std::runtime_error(mip_in + " has no mask");
                for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = f.mask->data[i];
            }
            const Image2D img = mip_project(v, parse_axis(mip_axis));
            write_pgm(out, img);
            std::printf("wrote %s: %ux%u\n", out.c_str(), img.width, img.height);
        } else if (*gc) {
            const auto rows = run_gradcheck(g.seed.value_or(1));
            const std::string csv = gradcheck_csv(rows);
            std::fputs(csv.c_str(), stdout);
            if (!g.out.empty()) {
                fs::create_directories(g.out);
                write_file_atomic(fs::path(g.out) / "gradcheck.csv", csv);
            }
            for (const auto& r : rows)
                if (!(r.max_rel_err < 1e-3)) {
                    std::fprintf(stderr, "error: %s exceeds 1e-3\n", r.loss.c_str());
                    return 2;
                }
        } else if (*train) {
            TrainConfig cfg = base_config(g);
            cfg.mode = parse_mode(mode);
            if (!ablation.empty()) cfg.ablation = parse_ablation(ablation);
            if (!tau_mode.empty()) cfg.tau_mode = parse_tau_mode(tau_mode);
            if (!ema_role.empty()) cfg.ema_role = parse_ema_role(ema_role);
            if (!transfer.empty()) cfg.transfer = parse_transfer(transfer);
            if (t_sigma) cfg.sigma = *t_sigma;
            if (t_tau) cfg.tau = *t_tau;
            if (t_beta) cfg.fda_beta = *t_beta;
            if (t_lr) cfg.lr0 = *t_lr;
            if (t_epochs) cfg.epochs = *t_epochs;
            if (t_batch) cfg.batch_size = *t_batch;
            if (t_ntrain) cfg.n_train = *t_ntrain;
            if (t_neval) cfg.n_eval = *t_neval;
            cfg.output_dir = need_out(g, "directory");
            const ExperimentResult r = run_experiment(cfg, &std::cout);
            std::printf("mode %s, ablation %s, artifacts in %s\n", to_string(r.config.mode),
                        to_string(r.config.ablation), cfg.output_dir.c_str());
            print_summary(r.report);
        } else if (*ev) {
            TrainConfig cfg = base_config(g);
            cfg.validate();
            const Checkpoint c = load_checkpoint(ckpt);
            if (c.spec != cfg.net_spec())
                throw std::runtime_error("checkpoint network does not match the config (patch/channels)");
            const auto cases = eval_cases(make_phantom_sets(cfg));
            const EvalReport r = evaluate(c.spec, c.values, cases, threshold);
            if (!g.out.empty()) {
                fs::create_directories(g.out);
                write_file_atomic(fs::path(g.out) / "report.csv", r.to_csv());
            }
            print_summary(r);
        }
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\nRun with --help for usage.\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
