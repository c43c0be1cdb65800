#include "hemosbi/measurement.hpp"

#include "hemosbi/signal.hpp"

#include <cmath>

namespace hemosbi {

WaveformRecord tile_beat(const WaveformRecord& beat, double min_duration)
{
    if (beat.samples.empty())
        throw DomainError("cannot tile an empty beat");
    const std::size_t n = beat.samples.size();
    const double period = static_cast<double>(n) / beat.sampling_rate;
    const auto reps = static_cast<std::size_t>(std::ceil(min_duration / period - 1e-9));
    WaveformRecord out = beat;
    out.samples.clear();
    out.samples.reserve(reps * n);
    for (std::size_t r = 0; r < std::max<std::size_t>(reps, 1); ++r)
        out.samples.insert(out.samples.end(), beat.samples.begin(), beat.samples.end());
    return out;
}

Vec random_crop(std::span<const double> x, Rng& rng, std::size_t length)
{
    if (x.size() < length)
        throw DomainError("input of " + std::to_string(x.size()) + " samples is shorter than the "
                          + std::to_string(length) + "-sample crop");
    std::uniform_int_distribution<std::size_t> offset(0, x.size() - length);
    const std::size_t start = offset(rng);
    return Vec(x.begin() + static_cast<std::ptrdiff_t>(start),
               x.begin() + static_cast<std::ptrdiff_t>(start + length));
}

Vec add_noise_snr(std::span<const double> x, double snr_db, Rng& rng)
{
    const double signal = rms_about_mean(x);
    if (!(signal > 0.0))
        throw SignalError("cannot set an SNR on a constant signal");
    Vec out(x.begin(), x.end());
    if (std::isinf(snr_db) && snr_db > 0.0)
        return out;
    const double sigma = signal / std::pow(10.0, snr_db / 20.0);
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& v : out)
        v += noise(rng);
    return out;
}

NormalizationStats normalize_fit(const std::vector<Vec>& series)
{
    double n = 0.0, m = 0.0, m2 = 0.0;
    for (const auto& s : series)
        for (double v : s) {
            n += 1.0;
            const double d = v - m;
            m += d / n;
            m2 += d * (v - m);
        }
    if (n < 2.0 || !(m2 > 0.0))
        throw SignalError("normalization needs a non-constant training pool");
    return {m, std::sqrt(m2 / n)};
}

Vec normalize_apply(std::span<const double> x, const NormalizationStats& stats)
{
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = (x[i] - stats.mean) / stats.std;
    return out;
}

void normalize_apply(Observation& obs, const NormalizationStats& stats)
{
    obs.samples = normalize_apply(obs.samples, stats);
    obs.stats = stats;
}

Observation make_observation(const WaveformRecord& beat, double age, std::optional<double> snr_db, std::uint64_t seed)
{
    const auto tiled = tile_beat(beat.sampling_rate == observation_rate ? beat : resample_beat(beat, observation_rate), 10.0);
    auto crop_rng = make_rng(seed, {stream::crop});
    Observation obs;
    obs.samples = random_crop(tiled.samples, crop_rng);
    if (snr_db) {
        auto noise_rng = make_rng(seed, {stream::noise});
        obs.samples = add_noise_snr(obs.samples, *snr_db, noise_rng);
    }
    obs.age = age;
    obs.snr_db = snr_db;
    obs.kind = beat.kind;
    obs.seed = seed;
    return obs;
}

} // namespace hemosbi
