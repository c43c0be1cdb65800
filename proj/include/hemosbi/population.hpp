#pragma once

#include "hemosbi/parallel.hpp"
#include "hemosbi/rng.hpp"
#include "hemosbi/solver.hpp"

#include <array>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

namespace hemosbi {

/// One simulated subject. The five parameters of interest are HR, LVET,
/// Diameter, PWV and SVR; PWV and SVR are derived from the simulation, the
/// Diameter is the mean reference diameter of the instantiated network.
struct ParameterVector {
    std::string id;
    double age = 50.0;  // years

    double heart_rate = 75.0;  // bpm
    double lvet = 0.3;         // s
    double diameter = 0.0;     // m
    double pwv = 0.0;          // m/s
    double svr = 0.0;          // Pa s/m^3

    double stroke_volume = 70e-6;  // m^3
    double peak_flow_time = 0.08;  // s
    double reflected_fraction = 0.0;
    double diameter_scale = 1.0;
    double stiffness_scale = 1.0;
    double resistance_scale = 1.0;
    double compliance_scale = 1.0;
    double aorta_length_scale = 1.0;

    HeartFunction heart() const;
    /// HR, LVET, Diameter, PWV, SVR in SI units (HR in bpm).
    Vec interest() const;
    static const std::vector<std::string>& interest_names();
    static const std::vector<std::string>& interest_units();

    /// All fields as (column, value) in a fixed order; used for params.csv.
    std::vector<std::pair<std::string, double>> columns() const;
    static ParameterVector from_columns(const std::map<std::string, double>& cols);
};

enum class MarginalFamily { uniform, truncated_normal, point };

struct AgeKnot {
    double age;
    double shift;
};

/// Marginal prior of one parameter. The location moves with age along a
/// piecewise-linear curve (constant beyond the end knots): a uniform
/// support is translated, a truncated normal has its mean translated inside
/// fixed truncation bounds, a point mass is translated.
struct Marginal {
    MarginalFamily family = MarginalFamily::uniform;
    double low = 0.0;
    double high = 0.0;
    double mean = 0.0;
    double sd = 0.0;
    std::vector<AgeKnot> age_shift;

    double shift(double age) const;
    double sample(Rng& rng, double age) const;
    /// Support at a given age.
    std::pair<double, double> support(double age) const;

    static Marginal uniform(double low, double high, std::vector<AgeKnot> shift = {});
    static Marginal truncated_normal(double mean, double sd, double low, double high,
                                     std::vector<AgeKnot> shift = {});
    static Marginal point(double value);
};

/// LVET = intercept - hr_slope HR + sv_slope (SV - sv_reference) + jitter,
/// with Gaussian jitter truncated to [low, high].
struct LvetLink {
    double intercept = 0.413;
    double hr_slope = 0.0017;
    double sv_slope = 1500.0;
    double sv_reference = 70e-6;
    double jitter_sd = 0.01;
    double low = 0.2;
    double high = 0.4;

    double deterministic(double heart_rate, double stroke_volume) const;
};

struct PriorSpec {
    Marginal age = Marginal::uniform(25.0, 75.0);
    Marginal heart_rate = Marginal::uniform(50.0, 100.0);
    Marginal stroke_volume = Marginal::truncated_normal(70e-6, 10e-6, 45e-6, 100e-6);
    Marginal peak_flow_time = Marginal::uniform(0.06, 0.1);
    Marginal reflected_fraction = Marginal::uniform(0.0, 0.08);
    Marginal diameter_scale = Marginal::uniform(0.85, 1.15, {{25.0, -0.03}, {75.0, 0.03}});
    Marginal stiffness_scale = Marginal::truncated_normal(1.0, 0.1, 0.6, 1.6, {{25.0, -0.15}, {75.0, 0.25}});
    Marginal resistance_scale = Marginal::truncated_normal(1.0, 0.12, 0.7, 1.4);
    Marginal compliance_scale = Marginal::uniform(0.7, 1.3, {{25.0, 0.1}, {75.0, -0.1}});
    Marginal aorta_length_scale = Marginal::uniform(0.85, 1.15, {{25.0, -0.05}, {75.0, 0.05}});
    LvetLink lvet;
    int max_rejections = 1000;

    /// Throws ConfigError for malformed marginals.
    void validate() const;
    nlohmann::json to_json() const;
    static PriorSpec from_json(const nlohmann::json& j);
    std::string hash() const;
};

/// One draw. Rejects draws that violate the heart-function constraints
/// (PFT < LVET < period, a usable inflow profile); throws ConfigError when
/// no valid draw is found within spec.max_rejections attempts.
ParameterVector sample_parameters(const PriorSpec& spec, Rng& rng);

/// n draws; draw i uses its own stream derived from (seed, i), so the result
/// does not depend on n or on scheduling.
std::vector<ParameterVector> sample_prior(const PriorSpec& spec, std::uint64_t seed, std::size_t n);

/// Unweighted mean over segments of the mid-length reference diameter (m).
double mean_reference_diameter(const ArterialNetwork& net);

/// Applies the scales to a template and installs the heart function.
/// Throws ConfigError when the result fails validation.
ArterialNetwork instantiate_network(const ArterialNetwork& tmpl, const ParameterVector& p);

/// Foot-to-foot PWV between the network's biomarker sites (m/s).
double derive_pwv(const std::map<std::string, WaveformRecord>& waveforms, const ArterialNetwork& net);

/// (MAP - P_out) / CO with CO = HR SV / 60. Throws DomainError for CO = 0.
double derive_svr(double mean_arterial_pressure, double outflow_pressure, const HeartFunction& heart);
double derive_svr(const std::map<std::string, WaveformRecord>& waveforms, const ArterialNetwork& net);

enum class Split { train, validation, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Train, validation and test counts for n items (70/10/20).
std::array<std::size_t, 3> split_sizes(std::size_t n);
std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed);

struct SubjectRecord {
    ParameterVector params;
    std::map<std::string, WaveformRecord> waveforms;
    double mean_arterial_pressure = 0.0;
    int cycles = 0;
    bool converged = false;
    int attempts = 1;
};

struct SimulationDataset {
    std::vector<SubjectRecord> records;
    std::vector<Split> splits;
    std::uint64_t seed = 0;
    std::string prior_hash;
    nlohmann::json prior;
    std::string network;
    int failures = 0;
    std::vector<std::string> failure_messages;
    std::string version;

    std::vector<std::size_t> indices(Split s) const;
    /// Hash over parameters, waveforms and splits.
    std::string hash() const;
};

struct DatasetOptions {
    SolverConfig solver;
    /// Rate used for simulation and PWV timing; stored waveforms are
    /// resampled to solver.sample_rate.
    double derivation_rate = 1000.0;
    Execution execution = Execution::parallel;
    int max_attempts = 20;
    double max_failure_fraction = 0.1;
};

/// Simulates one subject from its parameters. Fills PWV, SVR and Diameter.
SubjectRecord simulate_subject(const ArterialNetwork& tmpl, ParameterVector p, const DatasetOptions& opt = {});

/// sample_prior -> instantiate_network -> simulate -> biomarkers, with
/// failed draws resampled. Throws Error when failures exceed the allowed
/// fraction or n < 10.
SimulationDataset generate_dataset(const PriorSpec& spec, const ArterialNetwork& tmpl, std::size_t n,
                                   std::uint64_t seed, const DatasetOptions& opt = {});

/// Directory with params.csv, waveforms/<id>/<site>.{f32,json} and manifest.json.
void write_dataset(const std::filesystem::path& dir, const SimulationDataset& ds);
SimulationDataset read_dataset(const std::filesystem::path& dir);

} // namespace hemosbi
