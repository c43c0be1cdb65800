#include "hemosbi/waveform.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>

namespace hemosbi {

std::string WaveformRecord::units() const
{
    switch (kind) {
    case SignalKind::pressure: return "Pa";
    case SignalKind::ppg_proxy: return "normalized";
    case SignalKind::area: return "m^2";
    case SignalKind::flow: return "m^3/s";
    }
    return "";
}

std::size_t sample_count(double duration, double rate)
{
    return static_cast<std::size_t>(std::llround(duration * rate));
}

WaveformRecord resample_beat(const WaveformRecord& beat, double new_rate)
{
    if (beat.samples.empty() || !(new_rate > 0.0))
        throw DomainError("resample_beat needs a non-empty beat and a positive rate");
    WaveformRecord out = beat;
    const double period = beat.beat_period > 0.0 ? beat.beat_period : beat.duration();
    const std::size_t n_new = sample_count(period, new_rate);
    const std::size_t n_old = beat.samples.size();
    out.sampling_rate = new_rate;
    out.samples.assign(n_new, 0.0);
    for (std::size_t k = 0; k < n_new; ++k) {
        const double pos = static_cast<double>(k) / new_rate * beat.sampling_rate;
        const double fl = std::floor(pos);
        const double w = pos - fl;
        const std::size_t i0 = static_cast<std::size_t>(fl) % n_old;
        const std::size_t i1 = (i0 + 1) % n_old;
        out.samples[k] = w < 1e-9 ? beat.samples[i0] : (1.0 - w) * beat.samples[i0] + w * beat.samples[i1];
    }
    return out;
}

void write_f32_le(std::ostream& out, const double* data, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(data[i]));
        if constexpr (std::endian::native == std::endian::big)
            bits = __builtin_bswap32(bits);
        out.write(reinterpret_cast<const char*>(&bits), 4);
    }
}

void read_f32_le(std::istream& in, double* data, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        in.read(reinterpret_cast<char*>(&bits), 4);
        if (!in)
            throw IoError("truncated float32 stream");
        if constexpr (std::endian::native == std::endian::big)
            bits = __builtin_bswap32(bits);
        data[i] = std::bit_cast<float>(bits);
    }
}

void write_waveform(const std::filesystem::path& stem, const WaveformRecord& rec)
{
    auto bin_path = stem;
    bin_path += ".f32";
    auto json_path = stem;
    json_path += ".json";
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin)
        throw IoError("cannot write " + bin_path.string());
    write_f32_le(bin, rec.samples.data(), rec.samples.size());

    nlohmann::json j = {{"site", rec.site},
                        {"kind", to_string(rec.kind)},
                        {"segment", rec.segment},
                        {"position", rec.position},
                        {"sampling_rate_hz", rec.sampling_rate},
                        {"beat_period_s", rec.beat_period},
                        {"n_samples", rec.samples.size()},
                        {"units", rec.units()},
                        {"encoding", "float32-le"},
                        {"parameter_id", rec.parameter_id}};
    if (rec.snr_db)
        j["snr_db"] = *rec.snr_db;
    std::ofstream js(json_path);
    if (!js)
        throw IoError("cannot write " + json_path.string());
    js << j.dump(2) << '\n';
}

WaveformRecord read_waveform(const std::filesystem::path& stem)
{
    auto bin_path = stem;
    bin_path += ".f32";
    auto json_path = stem;
    json_path += ".json";
    std::ifstream js(json_path);
    if (!js)
        throw IoError("cannot open " + json_path.string());
    const auto j = nlohmann::json::parse(js);
    WaveformRecord rec;
    rec.site = j.at("site").get<std::string>();
    rec.kind = signal_kind_from_string(j.at("kind").get<std::string>());
    rec.segment = j.at("segment").get<int>();
    rec.position = j.at("position").get<double>();
    rec.sampling_rate = j.at("sampling_rate_hz").get<double>();
    rec.beat_period = j.at("beat_period_s").get<double>();
    rec.parameter_id = j.value("parameter_id", std::string());
    if (j.contains("snr_db"))
        rec.snr_db = j.at("snr_db").get<double>();
    rec.samples.resize(j.at("n_samples").get<std::size_t>());
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin)
        throw IoError("cannot open " + bin_path.string());
    read_f32_le(bin, rec.samples.data(), rec.samples.size());
    return rec;
}

void write_waveform_csv(const std::filesystem::path& path, const WaveformRecord& rec)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << "time_s," << to_string(rec.kind) << "_" << rec.units() << '\n';
    out << std::setprecision(10);
    for (std::size_t i = 0; i < rec.samples.size(); ++i)
        out << static_cast<double>(i) / rec.sampling_rate << ',' << rec.samples[i] << '\n';
}

} // namespace hemosbi
