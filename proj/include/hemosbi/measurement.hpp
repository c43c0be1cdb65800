#pragma once

#include "hemosbi/rng.hpp"
#include "hemosbi/waveform.hpp"

#include <json.hpp>
#include <optional>
#include <span>
#include <vector>

namespace hemosbi {

inline constexpr double observation_rate = 125.0;     // Hz
inline constexpr double observation_duration = 8.0;   // s
inline constexpr std::size_t observation_length = 1000;

/// Scalar mean and standard deviation pooled over all samples of a split.
struct NormalizationStats {
    double mean = 0.0;
    double std = 1.0;

    nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}}; }
    static NormalizationStats from_json(const nlohmann::json& j)
    {
        return {j.at("mean").get<double>(), j.at("std").get<double>()};
    }
};

struct Observation {
    Vec samples;
    double age = 0.0;
    std::optional<double> snr_db;
    SignalKind kind = SignalKind::pressure;
    NormalizationStats stats;  // identity until normalize_apply
    std::uint64_t seed = 0;
};

/// Repeats the beat the smallest whole number of times reaching min_duration.
WaveformRecord tile_beat(const WaveformRecord& beat, double min_duration = 10.0);

/// Uniformly placed window of `length` samples. Throws DomainError when the
/// input is shorter than the window.
Vec random_crop(std::span<const double> x, Rng& rng, std::size_t length = observation_length);

/// Adds white Gaussian noise with sigma = rms(x - mean(x)) / 10^(snr_db/20).
/// An infinite SNR returns x unchanged. Throws SignalError for constant x.
Vec add_noise_snr(std::span<const double> x, double snr_db, Rng& rng);

/// Pools every sample of every series. Throws SignalError when std = 0.
NormalizationStats normalize_fit(const std::vector<Vec>& series);
Vec normalize_apply(std::span<const double> x, const NormalizationStats& stats);
void normalize_apply(Observation& obs, const NormalizationStats& stats);

/// tile -> crop -> noise, with crop and noise drawn from streams derived
/// from `seed`. The same (beat, age, snr, seed) gives the same observation.
Observation make_observation(const WaveformRecord& beat, double age, std::optional<double> snr_db,
                             std::uint64_t seed);

/// Default SNR levels (dB) of the noise sweep.
inline const std::vector<double>& default_snr_levels()
{
    static const std::vector<double> levels = {0.0, 5.0, 10.0, 15.0, 20.0};
    return levels;
}

} // namespace hemosbi
