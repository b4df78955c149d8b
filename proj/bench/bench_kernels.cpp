// Serial reference vs OpenMP drivers for the two hot loops: the per-subject
// moment accumulation and the spectral null simulation.

#include <benchmark/benchmark.h>

#include "fvicm/fvicm_fit.hpp"
#include "fvicm/lmm_lrt.hpp"
#include "fvicm/qif_kernels.hpp"
#include "fvicm/sim_harness.hpp"

namespace {

struct MomentFixture {
  fvicm::LongitudinalDataset data;
  fvicm::BasisSpec spec0, spec1;
  fvicm::BasisMatrixSet mats;
  fvicm::KernelContext ctx;

  explicit MomentFixture(int n_subjects) {
    fvicm::SimConfig sim;
    sim.n_subjects = n_subjects;
    data = fvicm::generate_dataset(sim, 7);
    std::tie(spec0, spec1) = fvicm::specs_at(data, fvicm::SimTruth::beta0(), fvicm::SimTruth::beta1(), 3, 3);
    fvicm::ThetaFull theta = fvicm::initialize(data, spec0, spec1);
    mats = fvicm::BasisMatrixSet(fvicm::BasisKind::exchangeable, data);
    ctx = fvicm::make_kernel_context(data, spec0, spec1, mats, fvicm::to_free(theta), 0.1);
  }
};

void BM_MomentsSerial(benchmark::State& state) {
  MomentFixture fx(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(fvicm::accumulate_moments_serial(fx.ctx, true));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_MomentsParallel(benchmark::State& state) {
  MomentFixture fx(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(fvicm::accumulate_moments_parallel(fx.ctx, true));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

fvicm::NullSpectrum bench_spectrum() {
  fvicm::SimConfig sim;
  auto data = fvicm::generate_dataset(sim, 11);
  auto [s0, s1] = fvicm::specs_at(data, fvicm::SimTruth::beta0(), fvicm::SimTruth::beta1(), 3, 3);
  auto design = fvicm::build_lmm(data, fvicm::SimTruth::beta0(), fvicm::SimTruth::beta1(), s0, s1);
  return fvicm::null_spectrum(fvicm::reduced_design(design));
}

void BM_NullSerial(benchmark::State& state) {
  const auto spec = bench_spectrum();
  fvicm::LrtOptions opt;
  for (auto _ : state)
    benchmark::DoNotOptimize(fvicm::simulate_null_serial(spec, static_cast<int>(state.range(0)), 3, opt));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_NullParallel(benchmark::State& state) {
  const auto spec = bench_spectrum();
  fvicm::LrtOptions opt;
  for (auto _ : state)
    benchmark::DoNotOptimize(fvicm::simulate_null_parallel(spec, static_cast<int>(state.range(0)), 3, opt));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_MomentsSerial)->Arg(200)->Arg(500)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MomentsParallel)->Arg(200)->Arg(500)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_NullSerial)->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_NullParallel)->Arg(2000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
