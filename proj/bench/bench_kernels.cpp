// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels against their OpenMP counterparts, plus one
// federated round with sequential and parallel clients. Thread count follows
// OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <vector>

#include "flexfed/federation/federation.hpp"
#include "flexfed/numerics/kernels.hpp"
#include "flexfed/numerics/rng.hpp"

using namespace flexfed;
namespace k = flexfed::num::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    num::RngStream rng(seed, "bench", "matrix");
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, 1.0);
    return v;
}

using Kernel = void (*)(std::span<const double>, std::span<const double>, std::span<double>, std::size_t,
                        std::size_t, std::size_t);

void run_gemm(benchmark::State& state, Kernel kernel) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        kernel(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}

void BM_gemm_nn_serial(benchmark::State& s) { run_gemm(s, k::gemm_nn_serial); }
void BM_gemm_nn_omp(benchmark::State& s) { run_gemm(s, k::gemm_nn); }
void BM_gemm_nt_serial(benchmark::State& s) { run_gemm(s, k::gemm_nt_serial); }
void BM_gemm_nt_omp(benchmark::State& s) { run_gemm(s, k::gemm_nt); }
void BM_gemm_tn_serial(benchmark::State& s) { run_gemm(s, k::gemm_tn_serial); }
void BM_gemm_tn_omp(benchmark::State& s) { run_gemm(s, k::gemm_tn); }

BENCHMARK(BM_gemm_nn_serial)->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm_nn_omp)->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm_nt_serial)->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm_nt_omp)->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm_tn_serial)->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm_tn_omp)->RangeMultiplier(2)->Range(32, 256);

void BM_federated_round(benchmark::State& state) {
    fed::RunConfig cfg;
    cfg.model.n_layers = 2;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.model.n_experts = 8;
    cfg.model.top_k = 2;
    cfg.local.steps = 2;
    cfg.adapter.rank = 8;
    cfg.adapter.alpha = 16.0;
    cfg.clients = 4;
    cfg.per_round = 4;
    cfg.rounds = 1;
    cfg.calibration_sequences = 4;
    cfg.parallel_clients = state.range(0) != 0;
    fed::FederationData data;
    data.train = data::synth_tasks(4, 16, 0, "train");
    data.eval = data::synth_tasks(4, 2, 0, "eval");
    data.partition = data::partition_pathological(data.train, 4);
    const auto base = model::ModelParams::init(cfg.model, 0);
    const auto initial = fed::init_federation(cfg, base, data);
    for (auto _ : state) {
        state.PauseTiming();
        auto s = initial;
        for (auto& c : s.clients) c.adapters = c.adapters.clone();
        state.ResumeTiming();
        fed::run_rounds(s, cfg, base);
        benchmark::DoNotOptimize(s.server.global);
    }
}
BENCHMARK(BM_federated_round)->Arg(0)->Arg(1)->ArgNames({"parallel"})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
