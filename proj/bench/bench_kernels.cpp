// Serial reference versus OpenMP path for the data-parallel kernels.
// Arguments: 0 = serial, 1 = parallel.

#include "hemosbi/flow.hpp"
#include "hemosbi/network_io.hpp"
#include "hemosbi/npe.hpp"
#include "hemosbi/population.hpp"
#include "hemosbi/uncertainty.hpp"

#include <benchmark/benchmark.h>

using namespace hemosbi;

namespace {

Execution mode(const benchmark::State& state)
{
    return state.range(0) == 0 ? Execution::serial : Execution::parallel;
}

std::vector<TrainingExample> random_batch(std::size_t n, int dim, std::uint64_t seed)
{
    auto rng = make_rng(seed);
    std::normal_distribution<double> d;
    std::vector<TrainingExample> batch(n);
    for (auto& ex : batch) {
        ex.phi.resize(dim);
        for (auto& v : ex.phi)
            v = d(rng);
        ex.x.resize(observation_length);
        for (auto& v : ex.x)
            v = d(rng);
        ex.age = 50.0;
    }
    return batch;
}

void BM_LossAndGradients(benchmark::State& state)
{
    const ConditionalFlow model(FlowConfig::standard(5, 0.2, 1));
    const auto batch = random_batch(100, 5, 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(loss_and_gradients(model, batch, mode(state)).loss);
    state.SetItemsProcessed(state.iterations() * static_cast<long>(batch.size()));
}
BENCHMARK(BM_LossAndGradients)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_DatasetGeneration(benchmark::State& state)
{
    const auto net = load_network(std::string(HEMOSBI_SOURCE_DIR) + "/networks/bifurcation_3seg.json");
    DatasetOptions opt;
    opt.execution = mode(state);
    for (auto _ : state)
        benchmark::DoNotOptimize(generate_dataset(PriorSpec{}, net, 20, 3, opt).records.size());
    state.SetItemsProcessed(state.iterations() * 20);
}
BENCHMARK(BM_DatasetGeneration)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

/// Trained linear-Gaussian posterior shared by the analysis benchmarks.
TrainConfig toy_config()
{
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.snr_db = std::nullopt;
    return cfg;
}

struct ToyPosterior {
    NpeProblem problem = linear_gaussian_toy(1000, 1);
    TrainResult trained = train(problem, toy_config());
    EvaluationSet set = make_evaluation_set(problem, 0);

    static const ToyPosterior& get()
    {
        // Fill the dip-threshold cache so neither variant pays for it.
        static const double warm = dip_threshold(1000);
        (void)warm;
        static const ToyPosterior p;
        return p;
    }
};

void BM_Analyze(benchmark::State& state)
{
    const auto& toy = ToyPosterior::get();
    const FlowPosterior post(toy.trained.model, toy.set.observations, toy.set.ages);
    for (auto _ : state)
        benchmark::DoNotOptimize(analyze(post, toy.set, {}, mode(state)).parameters.size());
    state.SetItemsProcessed(state.iterations() * static_cast<long>(toy.set.size()));
}
BENCHMARK(BM_Analyze)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_CredibilityLevels(benchmark::State& state)
{
    const auto& toy = ToyPosterior::get();
    const FlowPosterior post(toy.trained.model, toy.set.observations, toy.set.ages);
    for (auto _ : state)
        benchmark::DoNotOptimize(credibility_levels(post, toy.set.truth, 1000, 1, mode(state)).size());
}
BENCHMARK(BM_CredibilityLevels)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Stratify(benchmark::State& state)
{
    const auto& toy = ToyPosterior::get();
    const FlowPosterior post(toy.trained.model, toy.set.observations, toy.set.ages);
    for (auto _ : state)
        benchmark::DoNotOptimize(
            population_stratify(post, {0}, toy.set.bounds, 1000, 0.95, 1, mode(state)).multimodal.size());
}
BENCHMARK(BM_Stratify)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
