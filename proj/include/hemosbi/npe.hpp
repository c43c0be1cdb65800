#pragma once

#include "hemosbi/flow.hpp"
#include "hemosbi/population.hpp"

#include <array>
#include <functional>
#include <optional>

namespace hemosbi {

/// A supervised inference problem: labelled items per split and a stochastic
/// observation model. observe(split, index, seed) returns the raw
/// (unnormalized) observation of that item; the same arguments always give
/// the same observation.
struct NpeProblem {
    struct Item {
        std::string id;
        Vec phi;
        double age = 0.0;
    };

    std::string name;
    std::vector<std::string> parameter_names;
    std::vector<std::pair<double, double>> bounds;  // per parameter, for analyses
    int input_length = 0;
    /// Raw observations feed the flow directly instead of the CNN encoder.
    bool raw_conditioning = false;
    std::array<std::vector<Item>, 3> items;  // indexed by Split
    std::function<Vec(Split, std::size_t, std::uint64_t)> observe;

    const std::vector<Item>& split(Split s) const { return items[static_cast<int>(s)]; }
    int dim() const { return static_cast<int>(parameter_names.size()); }
    /// Throws ConfigError for an empty split or inconsistent shapes.
    void validate() const;
};

/// Seed of the observation of item `index` in `split` for a given epoch.
/// Validation and test seeds ignore the epoch.
std::uint64_t observation_seed(std::uint64_t seed, Split split, std::size_t index, std::size_t epoch = 0);

/// Observations of a dataset site at one SNR (nullopt for noise-free).
/// Parameters are the five interest parameters.
NpeProblem simulation_problem(const SimulationDataset& ds, const std::string& site, std::optional<double> snr_db);

/// Analysis bounds for the interest parameters: prior support for HR and
/// LVET, padded dataset range for the derived parameters.
std::vector<std::pair<double, double>> interest_bounds(const SimulationDataset& ds);

/// phi ~ N(0, 1), x = phi + N(0, s^2). The exact posterior is
/// N(x / (1 + s^2), s^2 / (1 + s^2)).
NpeProblem linear_gaussian_toy(std::size_t n, std::uint64_t seed, double noise_sd = 0.5);
/// Mean and standard deviation of the exact posterior of the toy.
std::pair<double, double> linear_gaussian_posterior(double x, double noise_sd = 0.5);

/// phi ~ N(0, 1), age ~ U(25, 75), x = phi + (age - 50) / 25 + N(0, noise_sd^2).
/// The posterior mean moves with age for a fixed x.
NpeProblem age_informative_toy(std::size_t n, std::uint64_t seed, double noise_sd = 0.3);

/// phi ~ U(-1, 1), x = phi^2 + N(0, noise_sd^2). The posterior is bimodal at
/// +-sqrt(x) once |phi| is well above the noise.
NpeProblem quadratic_toy(std::size_t n, std::uint64_t seed, double noise_sd = 0.05);

/// Toy by name: "linear-gaussian", "age-informative", "quadratic".
NpeProblem toy_problem(const std::string& name, std::size_t n, std::uint64_t seed,
                       std::optional<double> snr_db = std::nullopt);

struct TrainConfig {
    int batch_size = 100;
    double learning_rate = 1e-3;
    double weight_decay = 1e-6;
    int epochs = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double clip_norm = 10.0;
    std::uint64_t seed = 0;
    std::optional<double> snr_db = 20.0;
    std::string site = "radial_ppg";
    double width = 0.2;
    /// Conditioner width for raw-conditioning problems.
    int toy_hidden_width = 32;
    /// Re-draw crop and noise of training observations every epoch.
    bool redraw = true;

    /// Throws ConfigError on invalid values.
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainingHistory {
    Vec train_loss;
    Vec validation_loss;
    Vec wall_time;  // seconds spent in each epoch
    int best_epoch = -1;  // zero-based; -1 before the first epoch

    std::size_t size() const { return validation_loss.size(); }
    double best_validation_loss() const;
    void write_csv(const std::filesystem::path& path) const;
};

/// Zero-based index of the smallest validation loss; ties go to the
/// earliest epoch. Throws DomainError for an empty history.
std::size_t select_best(const TrainingHistory& history);

template <class Checkpoint>
const Checkpoint& select_best(const TrainingHistory& history, const std::vector<Checkpoint>& checkpoints)
{
    const auto i = select_best(history);
    if (checkpoints.size() != history.size())
        throw ShapeError("one checkpoint per epoch expected");
    return checkpoints[i];
}

/// Thrown when a training loss becomes non-finite; carries the history so far.
class TrainingDiverged : public NumericError {
public:
    TrainingDiverged(const std::string& what, TrainingHistory history)
        : NumericError(what), history_(std::move(history)) {}
    const TrainingHistory& history() const { return history_; }

private:
    TrainingHistory history_;
};

struct TrainResult {
    ConditionalFlow model;
    TrainingHistory history;
};

/// Flow configuration train() uses for a problem.
FlowConfig flow_config_for(const NpeProblem& problem, const TrainConfig& cfg);

/// Adam on the negative log density with best-validation model selection.
/// Normalization statistics come from the training split. The result is
/// independent of `exec`.
TrainResult train(const NpeProblem& problem, const TrainConfig& cfg, Execution exec = Execution::parallel);

/// Examples of a split with frozen observation seeds.
std::vector<TrainingExample> evaluation_examples(const NpeProblem& problem, std::uint64_t seed,
                                                 Split split = Split::test);

struct GridConfig {
    std::vector<std::string> sites = {"radial_ppg"};
    std::vector<std::optional<double>> snr_levels = {0.0, 5.0, 10.0, 15.0, 20.0};
    int repeats = 3;
    /// Repeat r trains with seed base + r; false reuses the base seed.
    bool vary_seed = true;
    TrainConfig train;
};

struct GridCell {
    std::string id;
    std::string site;
    std::optional<double> snr_db;
    int repeat = 0;
    TrainConfig config;
    std::optional<TrainResult> result;
    std::string error;
};

struct GridSummaryRow {
    std::string site;
    std::optional<double> snr_db;
    int completed = 0;
    double best_validation_mean = 0.0;
    double best_validation_std = 0.0;  // sample std over repeats
};

struct GridResult {
    std::vector<GridCell> cells;
    std::vector<GridSummaryRow> summary;
};

/// Builds the problem for a (site, snr) cell.
using ProblemFactory = std::function<NpeProblem(const std::string& site, std::optional<double> snr_db)>;

/// Trains one model per (site, snr, repeat). Cells run concurrently under
/// a parallel execution; a failed cell is recorded and the grid continues.
GridResult run_experiment_grid(const ProblemFactory& make_problem, const GridConfig& grid,
                               Execution exec = Execution::parallel);
GridResult run_experiment_grid(const SimulationDataset& ds, const GridConfig& grid,
                               Execution exec = Execution::parallel);

/// Mean and sample standard deviation (0 for fewer than two values).
std::pair<double, double> mean_and_std(std::span<const double> values);

std::string snr_label(std::optional<double> snr_db);

} // namespace hemosbi
