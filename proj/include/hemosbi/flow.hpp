#pragma once

#include "hemosbi/measurement.hpp"
#include "hemosbi/parallel.hpp"
#include "hemosbi/rng.hpp"

#include <Eigen/Dense>
#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

namespace hemosbi {

/// Named tensors stored back to back in one flat vector.
class ParameterSet {
public:
    struct Tensor {
        std::string name;
        std::vector<int> shape;
        std::size_t offset = 0;
        std::size_t size = 0;
    };

    std::size_t add(const std::string& name, std::vector<int> shape);
    const std::vector<Tensor>& tensors() const { return tensors_; }
    const Tensor& tensor(std::size_t i) const { return tensors_.at(i); }
    std::size_t find(const std::string& name) const;

    Vec& values() { return values_; }
    const Vec& values() const { return values_; }
    double* data(std::size_t i) { return values_.data() + tensors_.at(i).offset; }
    const double* data(std::size_t i) const { return values_.data() + tensors_.at(i).offset; }
    std::size_t size() const { return values_.size(); }

private:
    std::vector<Tensor> tensors_;
    Vec values_;
};

/// Gradient of a scalar with the same layout as the model's ParameterSet.
struct GradientBundle {
    Vec values;

    double norm() const;
    bool finite() const;
};

struct EncoderLayer {
    enum Kind { conv, pool };
    Kind kind = conv;
    int channels = 0;  // conv output channels (ignored for pool)
    int kernel = 3;
    int stride = 2;
};

/// Strided 1D convolutions without padding and one max-pool. With no layers
/// the encoder passes the (normalized) input through unchanged.
struct EncoderConfig {
    int input_length = static_cast<int>(observation_length);
    std::vector<EncoderLayer> layers;

    /// Channels (40, 40, 40, pool, 20, 10) times the width factor.
    static EncoderConfig standard(double width = 1.0);
    static EncoderConfig identity(int input_length);
    int output_dim() const;
    /// Length after each layer; throws ShapeError if a layer has no output.
    std::vector<int> lengths() const;
};

struct FlowConfig {
    int dim = 1;
    EncoderConfig encoder = EncoderConfig::standard(0.2);
    int hidden_width = 70;
    int hidden_layers = 3;
    int steps = 3;
    double sigma_clamp = 7.0;
    std::uint64_t seed = 0;

    /// Width factor 1.0 gives the full model (conditioner width 350).
    static FlowConfig standard(int dim, double width = 0.2, std::uint64_t seed = 0);
    /// Toy model whose conditioning is the raw observation vector.
    static FlowConfig toy(int dim, int input_length, int hidden_width = 32, std::uint64_t seed = 0);

    nlohmann::json to_json() const;
    static FlowConfig from_json(const nlohmann::json& j);
};

struct FlowForward {
    Vec z;
    double logdet = 0.0;
};

struct TrainingExample {
    Vec phi;   // parameters in their own units
    Vec x;     // raw observation
    double age = 0.0;
};

struct LossGradient {
    double loss = 0.0;  // negative mean log density
    GradientBundle gradient;
};

/// Conditional density p(phi | x, age): CNN encoder, age appended, then
/// `steps` blocks of (affine masked autoregressive transform, permutation)
/// mapping standardized phi to a standard normal z. Conditioner output
/// layers start at zero, so a fresh model is the identity flow.
///
/// Observations are normalized with obs_stats, ages with age_stats and
/// parameters with param_mean/param_std inside the model, so every entry
/// point takes raw values. forward/inverse work in standardized
/// coordinates, log_prob and sample in parameter units.
class ConditionalFlow {
public:
    explicit ConditionalFlow(FlowConfig cfg);

    const FlowConfig& config() const { return cfg_; }
    int dim() const { return cfg_.dim; }
    int embedding_dim() const { return cfg_.encoder.output_dim(); }
    int conditioning_dim() const { return embedding_dim() + 1; }

    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }
    const std::vector<std::vector<int>>& permutations() const { return perms_; }

    NormalizationStats obs_stats;
    NormalizationStats age_stats;
    Vec param_mean;
    Vec param_std;

    /// h = (encoder(normalized x), standardized age). Throws ShapeError on a
    /// wrong length.
    Vec encode(std::span<const double> x, double age) const;
    FlowForward forward(std::span<const double> u, std::span<const double> h) const;
    Vec inverse(std::span<const double> z, std::span<const double> h) const;

    double log_prob(std::span<const double> phi, std::span<const double> x, double age) const;
    /// Log densities of many parameter vectors for one observation.
    Vec log_prob(const std::vector<Vec>& phis, std::span<const double> x, double age) const;
    double log_prob_given(std::span<const double> phi, std::span<const double> h) const;
    /// n draws (rows) in parameter units.
    Eigen::MatrixXd sample(std::span<const double> x, double age, std::size_t n, Rng& rng) const;
    Eigen::MatrixXd sample_given(std::span<const double> h, std::size_t n, Rng& rng) const;

    /// Boolean mask over parameters(): false for entries removed by the
    /// autoregressive masks (they never influence the output).
    const std::vector<char>& trainable() const { return trainable_; }

    Vec standardize(std::span<const double> phi) const;
    Vec unstandardize(std::span<const double> u) const;
    double log_scale() const;

private:
    friend struct FlowKernel;

    FlowConfig cfg_;
    ParameterSet params_;
    std::vector<char> trainable_;
    std::vector<std::vector<int>> perms_;
    std::vector<Eigen::MatrixXd> masks_;  // per step, per MADE layer

    std::vector<std::size_t> conv_w_, conv_b_;
    std::vector<std::vector<std::size_t>> made_w_, made_b_;  // [step][layer]
};

/// Negative mean log density of the batch and its exact gradient with
/// respect to every parameter. The batch is split into a fixed number of
/// contiguous chunks that are reduced in order, so serial and parallel
/// execution give bit-identical results. Throws NumericError naming the
/// first example with a non-finite loss.
LossGradient loss_and_gradients(const ConditionalFlow& model, std::span<const TrainingExample> batch,
                                Execution exec = Execution::parallel);

/// Checkpoint: magic, format version, JSON header (config, tensor table,
/// normalization stats, extra metadata), then little-endian float32 weights.
void save_checkpoint(const std::filesystem::path& path, const ConditionalFlow& model,
                     const nlohmann::json& extra = nlohmann::json::object());
ConditionalFlow load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

} // namespace hemosbi
