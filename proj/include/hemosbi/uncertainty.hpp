#pragma once

#include "hemosbi/flow.hpp"
#include "hemosbi/npe.hpp"

#include <Eigen/Dense>
#include <functional>
#include <iosfwd>
#include <optional>

namespace hemosbi {

/// Posterior over the observations of a test set. Implementations must be
/// safe to call concurrently.
class Posterior {
public:
    virtual ~Posterior() = default;
    virtual std::size_t size() const = 0;
    virtual int dim() const = 0;
    /// n draws (rows) for observation i.
    virtual Eigen::MatrixXd sample(std::size_t i, std::size_t n, Rng& rng) const = 0;
    virtual bool has_density() const { return false; }
    /// Throws DomainError when the posterior has no density.
    virtual double log_prob(std::size_t i, std::span<const double> phi) const;
};

/// A trained flow evaluated on fixed observations; encodings are computed once.
class FlowPosterior : public Posterior {
public:
    FlowPosterior(const ConditionalFlow& model, const std::vector<Vec>& observations, const Vec& ages,
                  Execution exec = Execution::parallel);

    std::size_t size() const override { return h_.size(); }
    int dim() const override { return model_->dim(); }
    Eigen::MatrixXd sample(std::size_t i, std::size_t n, Rng& rng) const override;
    bool has_density() const override { return true; }
    double log_prob(std::size_t i, std::span<const double> phi) const override;

private:
    const ConditionalFlow* model_;
    std::vector<Vec> h_;
};

/// Posterior given by callables, for oracles and synthetic checks.
class FunctionPosterior : public Posterior {
public:
    using Sampler = std::function<Eigen::MatrixXd(std::size_t, std::size_t, Rng&)>;
    using Density = std::function<double(std::size_t, std::span<const double>)>;

    FunctionPosterior(std::size_t size, int dim, Sampler sampler, Density density = {})
        : size_(size), dim_(dim), sampler_(std::move(sampler)), density_(std::move(density)) {}

    std::size_t size() const override { return size_; }
    int dim() const override { return dim_; }
    Eigen::MatrixXd sample(std::size_t i, std::size_t n, Rng& rng) const override { return sampler_(i, n, rng); }
    bool has_density() const override { return static_cast<bool>(density_); }
    double log_prob(std::size_t i, std::span<const double> phi) const override;

private:
    std::size_t size_;
    int dim_;
    Sampler sampler_;
    Density density_;
};

/// Ground truth and observations of one split with frozen observation seeds.
struct EvaluationSet {
    std::vector<std::string> ids;
    std::vector<Vec> truth;
    std::vector<Vec> observations;
    Vec ages;
    std::vector<std::string> parameter_names;
    std::vector<std::pair<double, double>> bounds;

    std::size_t size() const { return truth.size(); }
};

EvaluationSet make_evaluation_set(const NpeProblem& problem, std::uint64_t seed, Split split = Split::test);

/// Per dimension, the rank of the true value among n posterior draws
/// divided by n (0 below every draw, 1 above every draw). Throws
/// DomainError for n < 100. Result is indexed [dimension][observation].
std::vector<Vec> credibility_levels(const Posterior& posterior, const std::vector<Vec>& truth, std::size_t n_samples,
                                    std::uint64_t seed, Execution exec = Execution::parallel);

/// Mean over the grid i/k, i = 1..k, of |i/k - fraction of levels <= i/k|.
/// 0 for perfect calibration, at most 0.5.
double calibration_score(std::span<const double> levels, int k = 100);

/// Kolmogorov-Smirnov distance of the levels from U(0, 1) and its
/// asymptotic p-value.
std::pair<double, double> uniformity_ks(std::span<const double> levels);

/// Number of cells in the smallest union of histogram cells over [lo, hi]
/// holding at least a fraction alpha of the samples. Cells are taken in
/// descending count; equal counts are taken in ascending cell index.
/// Samples outside the bounds go to the edge cells and are counted in
/// `clipped`.
std::size_t credible_cells(std::span<const double> samples, double lo, double hi, int n_cells, double alpha,
                           std::size_t* clipped = nullptr);

struct SciResult {
    double alpha = 0.0;
    int n_cells = 0;
    Vec cell_width;                               // per dimension
    Vec mean_size;                                // per dimension, parameter units
    std::vector<std::vector<std::size_t>> cells;  // [dimension][observation]
    std::size_t clipped = 0;
};

/// Expected per-dimension credible-region size over the observations.
SciResult sci(const Posterior& posterior, double alpha, const std::vector<std::pair<double, double>>& bounds,
              int n_cells = 100, std::size_t n_samples = 1000, std::uint64_t seed = 0,
              Execution exec = Execution::parallel);

/// Bits to encode the credible region: -a log2(a / S) - (1 - a) log2((1 - a) / (N - S)),
/// with 0 log 0 = 0. Throws DomainError unless 1 <= S <= N and 0 <= a <= 1.
double mi_bound(std::size_t cells, double alpha, std::size_t total_cells);

struct LaplaceResult {
    Vec mean;
    Eigen::MatrixXd covariance;
    Vec sample_mean;
    Eigen::MatrixXd sample_covariance;
    /// True when the Hessian was not negative definite and the sample
    /// covariance was used instead.
    bool fallback = false;
};

/// Gaussian centred on the posterior sample mean with covariance from the
/// inverse negative Hessian of log_prob there (central differences).
LaplaceResult laplace_baseline(const Posterior& posterior, std::size_t index, std::size_t n_samples, Rng& rng);

struct PointEstimateMetrics {
    Vec mae;                                  // per dimension
    std::vector<std::optional<double>> correlation;  // nullopt for zero-variance data
    std::vector<Vec> estimates;               // [observation][dimension]
};

/// Posterior-mean point estimates against the true values.
PointEstimateMetrics point_estimate_metrics(const Posterior& posterior, const std::vector<Vec>& truth,
                                            std::size_t n_samples = 1000, std::uint64_t seed = 0,
                                            Execution exec = Execution::parallel);

/// Pearson correlation; nullopt when either input has zero variance.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

/// Hartigan's dip statistic of a one-dimensional sample (at least 1/(2n)).
double dip_statistic(std::span<const double> samples);

/// Dip value exceeded by standard-normal samples of size n with
/// probability `false_positive_rate`, by Monte Carlo (cached per n).
double dip_threshold(std::size_t n, double false_positive_rate = 0.05);

struct DipResult {
    double dip = 0.0;
    double threshold = 0.0;
    bool multimodal = false;
};

/// Throws DomainError for fewer than 200 samples.
DipResult dip_multimodality(std::span<const double> samples, std::optional<double> threshold = std::nullopt);

struct StratumSummary {
    std::size_t count = 0;
    Vec mean_sci;  // per named parameter, at alpha
    std::optional<double> mean_correlation;  // between the two named parameters
};

struct StratifyResult {
    std::vector<int> parameters;
    double alpha = 0.95;
    std::vector<char> multimodal;  // per observation
    std::vector<Vec> dips;         // [observation][named parameter]
    StratumSummary unimodal;
    StratumSummary multimodal_group;
};

/// Labels each observation multimodal when the dip test flags the posterior
/// marginal of any of the named parameters (one or two indices).
StratifyResult population_stratify(const Posterior& posterior, const std::vector<int>& parameters,
                                   const std::vector<std::pair<double, double>>& bounds,
                                   std::size_t n_samples = 1000, double alpha = 0.95, std::uint64_t seed = 0,
                                   Execution exec = Execution::parallel);

struct AnalysisOptions {
    std::size_t n_samples = 1000;
    int n_cells = 100;
    Vec levels = {0.68, 0.95};
    int calibration_grid = 100;
    double dip_false_positive_rate = 0.05;
    std::uint64_t seed = 0;
};

struct ObservationReport {
    std::string id;
    Vec truth;
    Vec posterior_mean;
    Vec posterior_std;
    Vec credibility;               // per dimension
    std::vector<Vec> sci;          // [level][dimension], parameter units
    std::vector<std::vector<std::size_t>> cells;  // [level][dimension]
    Vec dip;                       // per dimension (NaN below 200 samples)
    std::vector<char> multimodal;  // per dimension
};

struct ParameterReport {
    std::string name;
    double calibration = 0.0;
    double ks_p_value = 0.0;
    Vec sci_mean;  // per level
    Vec sci_std;   // per level, over observations
    Vec bits;      // per level, mean MI bound
    double mae = 0.0;
    std::optional<double> correlation;
    double multimodal_fraction = 0.0;
};

struct UncertaintyReport {
    AnalysisOptions options;
    std::vector<std::pair<double, double>> bounds;
    std::vector<ParameterReport> parameters;
    std::vector<ObservationReport> observations;
    std::size_t clipped = 0;

    nlohmann::json to_json() const;
    /// One row per observation and parameter.
    void write_csv(const std::filesystem::path& path) const;
    /// Rows prefixed by a `checkpoint` column when `key` is non-empty.
    void write_csv(std::ostream& out, const std::string& key = {}, bool header = true) const;
};

/// All per-observation analyses from one set of posterior draws per
/// observation, then aggregated in index order; the result does not depend
/// on `exec`.
UncertaintyReport analyze(const Posterior& posterior, const EvaluationSet& set, const AnalysisOptions& options = {},
                          Execution exec = Execution::parallel);

} // namespace hemosbi
