// Parallel kernels against the serial reference loops, plus whole-network
// forward/backward and training-step timings at the default patch size.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "hsda/kernels.hpp"
#include "hsda/model.hpp"
#include "hsda/spectral.hpp"
#include "hsda/trainer.hpp"

namespace {

using namespace hsda;

struct ConvCase {
    Dims d;
    std::size_t cin, cout;
    std::vector<double> in, w, b, out, gout, gin, gw, gb;

    ConvCase(std::uint32_t n, std::size_t ci, std::size_t co) : d(cube(n)), cin(ci), cout(co) {
        std::mt19937_64 rng(7);
        std::normal_distribution<double> g(0.0, 1.0);
        const auto fill = [&](std::vector<double>& v, std::size_t len) {
            v.resize(len);
            for (auto& x : v) x = g(rng);
        };
        fill(in, cin * d.count());
        fill(w, cout * cin * kernels::taps);
        fill(b, cout);
        fill(gout, cout * d.count());
        out.assign(cout * d.count(), 0.0);
        gin.assign(cin * d.count(), 0.0);
        gw.assign(w.size(), 0.0);
        gb.assign(cout, 0.0);
    }
};

void BM_conv3_forward(benchmark::State& state) {
    ConvCase c(static_cast<std::uint32_t>(state.range(0)), state.range(1), state.range(2));
    for (auto _ : state) {
        kernels::conv3_forward(c.in, c.d, c.cin, c.w, c.b, c.cout, c.out);
        benchmark::DoNotOptimize(c.out.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(c.d.count() * c.cin * c.cout * kernels::taps));
}

void BM_conv3_forward_reference(benchmark::State& state) {
    ConvCase c(static_cast<std::uint32_t>(state.range(0)), state.range(1), state.range(2));
    for (auto _ : state) {
        kernels::reference::conv3_forward(c.in, c.d, c.cin, c.w, c.b, c.cout, c.out);
        benchmark::DoNotOptimize(c.out.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(c.d.count() * c.cin * c.cout * kernels::taps));
}

void BM_conv3_backward(benchmark::State& state) {
    ConvCase c(static_cast<std::uint32_t>(state.range(0)), state.range(1), state.range(2));
    for (auto _ : state) {
        kernels::conv3_backward_input(c.gout, c.d, c.cin, c.cout, c.w, c.gin);
        kernels::conv3_backward_weights(c.in, c.gout, c.d, c.cin, c.cout, c.gw, c.gb);
        benchmark::DoNotOptimize(c.gin.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(2 * c.d.count() * c.cin * c.cout * kernels::taps));
}

void BM_conv3_backward_reference(benchmark::State& state) {
    ConvCase c(static_cast<std::uint32_t>(state.range(0)), state.range(1), state.range(2));
    for (auto _ : state) {
        kernels::reference::conv3_backward_input(c.gout, c.d, c.cin, c.cout, c.w, c.gin);
        kernels::reference::conv3_backward_weights(c.in, c.gout, c.d, c.cin, c.cout, c.gw, c.gb);
        benchmark::DoNotOptimize(c.gin.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(2 * c.d.count() * c.cin * c.cout * kernels::taps));
}

// (edge, cin, cout) of the three encoder convolutions at the default 32^3 patch.
#define CONV_SHAPES Args({32, 1, 8})->Args({16, 8, 16})->Args({8, 16, 32})->Args({16, 16, 8})
BENCHMARK(BM_conv3_forward)->CONV_SHAPES->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv3_forward_reference)->CONV_SHAPES->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv3_backward)->CONV_SHAPES->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv3_backward_reference)->CONV_SHAPES->Unit(benchmark::kMicrosecond);

void BM_fft3(benchmark::State& state) {
    const auto n = static_cast<std::uint32_t>(state.range(0));
    Volume v(cube(n));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& x : v.data) x = u(rng);
    for (auto _ : state) benchmark::DoNotOptimize(fft3(v));
}
BENCHMARK(BM_fft3)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_hsda_transfer(benchmark::State& state) {
    const auto a = generate_phantom(PhantomSpec{cube(32), 3, 1.0, 3.0, Modality::A, 1});
    const auto b = generate_phantom(PhantomSpec{cube(32), 3, 1.0, 3.0, Modality::B, 2});
    const auto mask = make_hsg_mask(cube(32), 0.1);
    for (auto _ : state) benchmark::DoNotOptimize(hsda_transfer(a.volume, b.volume, mask));
}
BENCHMARK(BM_hsda_transfer)->Unit(benchmark::kMillisecond);

void BM_network_forward_backward(benchmark::State& state) {
    const NetSpec spec;
    ParamVector p = init_params(spec, 1);
    const auto ph = generate_phantom(PhantomSpec{cube(32), 3, 1.0, 3.0, Modality::A, 1});
    const Volume x = normalize(ph.volume);
    for (auto _ : state) {
        const auto tr = forward(spec, p, x);
        Upstream up;
        up.d_logits = dice_ce_loss(tr.probs, ph.mask).grad_logits;
        backward(p, tr, up);
    }
}
BENCHMARK(BM_network_forward_backward)->Unit(benchmark::kMillisecond);

void BM_train_step_full_method(benchmark::State& state) {
    TrainConfig cfg;
    NetworkPair nets = NetworkPair::make(cfg.net_spec(), 1, cfg.ema_role);
    Batch batch;
    for (std::uint64_t i = 0; i < cfg.batch_size; ++i) {
        auto a = generate_phantom(PhantomSpec{cube(32), 3, 1.0, 3.0, Modality::A, i});
        auto b = generate_phantom(PhantomSpec{cube(32), 3, 1.0, 3.0, Modality::B, 100 + i});
        batch.source.push_back(a.volume);
        batch.labels.push_back(a.mask);
        batch.target.push_back(b.volume);
    }
    for (auto _ : state) benchmark::DoNotOptimize(train_step(nets, batch, cfg, 1e-3));
}
BENCHMARK(BM_train_step_full_method)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
