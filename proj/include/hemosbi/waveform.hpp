#pragma once

#include "hemosbi/common.hpp"
#include "hemosbi/vessel.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace hemosbi {

/// One periodic beat (or a longer series) sampled at a measurement site.
struct WaveformRecord {
    std::string site;
    SignalKind kind = SignalKind::pressure;
    int segment = 0;
    double position = 0.0;
    Vec samples;
    double sampling_rate = 125.0;  // Hz
    double beat_period = 0.0;      // s
    std::string parameter_id;
    std::optional<double> snr_db;

    double duration() const { return static_cast<double>(samples.size()) / sampling_rate; }
    std::string units() const;
};

/// Number of samples covering `duration` seconds at `rate` Hz.
std::size_t sample_count(double duration, double rate);

/// Resamples a periodic beat onto a new rate with linear interpolation
/// (wrapping at the period). Exact when the new sample times coincide with
/// old ones.
WaveformRecord resample_beat(const WaveformRecord& beat, double new_rate);

/// Writes `<stem>.f32` (little-endian float32 samples) and `<stem>.json`.
void write_waveform(const std::filesystem::path& stem, const WaveformRecord& rec);
WaveformRecord read_waveform(const std::filesystem::path& stem);
void write_waveform_csv(const std::filesystem::path& path, const WaveformRecord& rec);

/// Little-endian float32 array I/O shared by waveform and checkpoint files.
void write_f32_le(std::ostream& out, const double* data, std::size_t n);
void read_f32_le(std::istream& in, double* data, std::size_t n);

} // namespace hemosbi
