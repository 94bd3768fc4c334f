#include <benchmark/benchmark.h>

#include "slpmt/experiment.hpp"

namespace {

using namespace slpmt;

struct Fixture {
  SyntheticSuite suite;
  ModelParams params;
  std::vector<const ParallelCorpus*> hrl;

  Fixture() : suite(make_suite()), params(make_params(suite)) {
    for (const auto& c : suite.train)
      if (c.tier == Tier::high) hrl.push_back(&c);
  }

  static SyntheticSuite make_suite() {
    SuiteConfig c = default_suite_config();
    for (auto& l : c.languages) l.corpus_size = std::min<std::size_t>(l.corpus_size, 2000);
    return generate_synthetic_suite(c);
  }
  static ModelParams make_params(const SyntheticSuite& s) {
    Rng rng(7);
    return ModelParams::initialize(model_config_for(ModelShape{}, s, Stage::one), rng);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_Stage1Step(benchmark::State& state) {
  auto& f = fixture();
  TrainConfig tc;
  tc.batch_tokens = static_cast<std::size_t>(state.range(0));
  tc.alternation_probability = 0.0;
  ModelParams p = f.params.clone();
  Optimizer opt(tc);
  Rng rng(3);
  const BatchSampler sampler(f.hrl, tc.batch_tokens);
  const std::vector<double> w(f.hrl.size(), 1.0 / static_cast<double>(f.hrl.size()));
  std::size_t tokens = 0;
  for (auto _ : state) {
    const Batch b = sampler.sample(w, rng);
    tokens += b.rows * std::max(b.source_length, b.target_length);
    benchmark::DoNotOptimize(stage1_step(p, opt, b, tc, rng).loss);
  }
  state.counters["tokens/s"] = benchmark::Counter(static_cast<double>(tokens), benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Stage1Step)->Arg(512)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_ForwardOnly(benchmark::State& state) {
  auto& f = fixture();
  Rng rng(5);
  const BatchSampler sampler(f.hrl, 2048);
  const std::vector<double> w(f.hrl.size(), 1.0 / static_cast<double>(f.hrl.size()));
  const Batch b = sampler.sample(w, rng);
  for (auto _ : state) {
    Tape tape(Tape::Mode::inference);
    benchmark::DoNotOptimize(model_forward(tape, f.params, b, {PathMode::hard, false, nullptr}).logits.data());
  }
}
BENCHMARK(BM_ForwardOnly)->Unit(benchmark::kMillisecond);

void BM_BeamDecode(benchmark::State& state) {
  auto& f = fixture();
  const auto& pair = f.suite.dev[0].pairs[0];
  for (auto _ : state)
    benchmark::DoNotOptimize(
        beam_decode(f.params, pair.source, 0, static_cast<std::size_t>(state.range(0)), pair.source.size() + 3, 1.0));
}
BENCHMARK(BM_BeamDecode)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  slpmt::tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
