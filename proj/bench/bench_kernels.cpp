#include <benchmark/benchmark.h>

#include "mcf/forest.hpp"
#include "mcf/inference.hpp"
#include "mcf/parallel.hpp"
#include "mcf/reference.hpp"

using namespace mcf;

namespace {

Sample synthetic(Index n, int p, std::uint64_t seed) {
  SeededRng rng(seed);
  Sample s;
  s.x.resize(n, p);
  s.d.resize(n);
  s.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) s.x(i, j) = rng.normal();
    s.d[i] = static_cast<int>(rng.index(2));
    s.y[i] = s.x(i, 0) + s.d[i] * (s.x(i, 1) > 0 ? 1.5 : 0.5) + rng.normal();
  }
  return s;
}

forest::McfParams params(int trees) {
  forest::McfParams p;
  p.num_trees = trees;
  p.nuisance.num_trees = 50;
  return p;
}

const forest::McfForest& shared_forest() {
  static const forest::McfForest f = forest::fit_forest(synthetic(2500, 20, 1), params(200), SeededRng(2));
  return f;
}

const Matrix& shared_queries() {
  static const Matrix q = synthetic(500, 20, 3).x;
  return q;
}

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

void BM_FitForest(benchmark::State& state) {
  const Sample s = synthetic(2500, 20, 4);
  for (auto _ : state) benchmark::DoNotOptimize(forest::fit_forest(s, params(100), SeededRng(5), exec_of(state)));
}
BENCHMARK(BM_FitForest)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PredictIate(benchmark::State& state) {
  const forest::McfForest& f = shared_forest();
  const Matrix& q = shared_queries();
  for (auto _ : state) benchmark::DoNotOptimize(forest::predict_iate(f, q, 1, 0, exec_of(state)));
}
BENCHMARK(BM_PredictIate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PredictIateReference(benchmark::State& state) {
  const forest::McfForest& f = shared_forest();
  const Matrix& q = shared_queries();
  for (auto _ : state) benchmark::DoNotOptimize(reference::predict_iate(f, q, 1, 0));
}
BENCHMARK(BM_PredictIateReference)->Unit(benchmark::kMillisecond);

void BM_GroupWeights(benchmark::State& state) {
  Labels g(shared_queries().rows());
  for (std::size_t q = 0; q < g.size(); ++q) g[q] = static_cast<int>(q % 5);
  const forest::QueryRouting routing(shared_forest(), shared_queries(), 1, 0);
  for (auto _ : state) benchmark::DoNotOptimize(forest::group_weights(shared_forest(), routing, g, 5, exec_of(state)));
}
BENCHMARK(BM_GroupWeights)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_GroupWeightsReference(benchmark::State& state) {
  Labels g(shared_queries().rows());
  for (std::size_t q = 0; q < g.size(); ++q) g[q] = static_cast<int>(q % 5);
  const forest::McfForest& f = shared_forest();
  const Matrix& q = shared_queries();
  for (auto _ : state) benchmark::DoNotOptimize(reference::group_weights(f, q, g, 5, 1, 0));
}
BENCHMARK(BM_GroupWeightsReference)->Unit(benchmark::kMillisecond);

void BM_MatchOutcomes(benchmark::State& state) {
  const Sample s = synthetic(state.range(0), 2, 6);
  const Matrix score = s.x.leftCols(2);
  for (auto _ : state) benchmark::DoNotOptimize(forest::match_outcomes(s.d, s.y, score, 2));
}
BENCHMARK(BM_MatchOutcomes)->Arg(500)->Arg(1250)->Unit(benchmark::kMillisecond);

void BM_MatchOutcomesReference(benchmark::State& state) {
  const Sample s = synthetic(state.range(0), 2, 6);
  const Matrix score = s.x.leftCols(2);
  for (auto _ : state) benchmark::DoNotOptimize(reference::match_outcomes(s.d, s.y, score, 2));
}
BENCHMARK(BM_MatchOutcomesReference)->Arg(500)->Arg(1250)->Unit(benchmark::kMillisecond);

void BM_KnnMoments(benchmark::State& state) {
  SeededRng rng(7);
  const Index n = state.range(0);
  Vector w(n), y(n);
  for (Index i = 0; i < n; ++i) {
    w[i] = rng.uniform();
    y[i] = rng.normal();
  }
  const int k = inference::default_neighbours(n);
  for (auto _ : state) benchmark::DoNotOptimize(inference::knn_conditional_moments(w, y, k));
}
BENCHMARK(BM_KnnMoments)->Arg(625)->Arg(1250)->Unit(benchmark::kMillisecond);

void BM_KnnMomentsReference(benchmark::State& state) {
  SeededRng rng(7);
  const Index n = state.range(0);
  Vector w(n), y(n);
  for (Index i = 0; i < n; ++i) {
    w[i] = rng.uniform();
    y[i] = rng.normal();
  }
  const int k = inference::default_neighbours(n);
  for (auto _ : state) benchmark::DoNotOptimize(reference::knn_conditional_moments(w, y, k));
}
BENCHMARK(BM_KnnMomentsReference)->Arg(625)->Arg(1250)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
