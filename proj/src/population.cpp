#include "hemosbi/population.hpp"

#include "hemosbi/inflow.hpp"
#include "hemosbi/signal.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace hemosbi {

using nlohmann::json;

HeartFunction ParameterVector::heart() const
{
    HeartFunction h;
    h.heart_rate = heart_rate;
    h.stroke_volume = stroke_volume;
    h.ejection_time = lvet;
    h.peak_flow_time = peak_flow_time;
    h.reflected_fraction = reflected_fraction;
    return h;
}

Vec ParameterVector::interest() const
{
    return {heart_rate, lvet, diameter, pwv, svr};
}

const std::vector<std::string>& ParameterVector::interest_names()
{
    static const std::vector<std::string> names = {"HR", "LVET", "Diameter", "PWV", "SVR"};
    return names;
}

const std::vector<std::string>& ParameterVector::interest_units()
{
    static const std::vector<std::string> u = {"bpm", "s", "m", "m/s", "Pa s/m^3"};
    return u;
}

std::vector<std::pair<std::string, double>> ParameterVector::columns() const
{
    return {{"age_years", age},
            {"heart_rate_bpm", heart_rate},
            {"lvet_s", lvet},
            {"diameter_m", diameter},
            {"pwv_m_s", pwv},
            {"svr_Pa_s_m3", svr},
            {"stroke_volume_m3", stroke_volume},
            {"pft_s", peak_flow_time},
            {"rfv", reflected_fraction},
            {"diameter_scale", diameter_scale},
            {"stiffness_scale", stiffness_scale},
            {"resistance_scale", resistance_scale},
            {"compliance_scale", compliance_scale},
            {"aorta_length_scale", aorta_length_scale}};
}

ParameterVector ParameterVector::from_columns(const std::map<std::string, double>& c)
{
    auto get = [&](const char* k) {
        const auto it = c.find(k);
        if (it == c.end())
            throw IoError(std::string("params.csv: missing column ") + k);
        return it->second;
    };
    ParameterVector p;
    p.age = get("age_years");
    p.heart_rate = get("heart_rate_bpm");
    p.lvet = get("lvet_s");
    p.diameter = get("diameter_m");
    p.pwv = get("pwv_m_s");
    p.svr = get("svr_Pa_s_m3");
    p.stroke_volume = get("stroke_volume_m3");
    p.peak_flow_time = get("pft_s");
    p.reflected_fraction = get("rfv");
    p.diameter_scale = get("diameter_scale");
    p.stiffness_scale = get("stiffness_scale");
    p.resistance_scale = get("resistance_scale");
    p.compliance_scale = get("compliance_scale");
    p.aorta_length_scale = get("aorta_length_scale");
    return p;
}

double Marginal::shift(double age) const
{
    if (age_shift.empty())
        return 0.0;
    if (age <= age_shift.front().age)
        return age_shift.front().shift;
    if (age >= age_shift.back().age)
        return age_shift.back().shift;
    for (std::size_t i = 1; i < age_shift.size(); ++i) {
        const auto& a = age_shift[i - 1];
        const auto& b = age_shift[i];
        if (age <= b.age) {
            const double w = (age - a.age) / (b.age - a.age);
            return a.shift + w * (b.shift - a.shift);
        }
    }
    return age_shift.back().shift;
}

std::pair<double, double> Marginal::support(double age) const
{
    const double s = shift(age);
    switch (family) {
    case MarginalFamily::uniform: return {low + s, high + s};
    case MarginalFamily::truncated_normal: return {low, high};
    case MarginalFamily::point: return {low + s, low + s};
    }
    return {low, high};
}

double Marginal::sample(Rng& rng, double age) const
{
    const double s = shift(age);
    switch (family) {
    case MarginalFamily::point: return low + s;
    case MarginalFamily::uniform: {
        std::uniform_real_distribution<double> u(low + s, high + s);
        return u(rng);
    }
    case MarginalFamily::truncated_normal: {
        const boost::math::normal_distribution<double> nd(mean + s, sd);
        const double a = boost::math::cdf(nd, low);
        const double b = boost::math::cdf(nd, high);
        if (!(b > a))
            throw ConfigError("truncated normal has no mass inside its bounds");
        std::uniform_real_distribution<double> u(a, b);
        double q = u(rng);
        q = std::clamp(q, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
        return std::clamp(boost::math::quantile(nd, q), low, high);
    }
    }
    return low;
}

Marginal Marginal::uniform(double low, double high, std::vector<AgeKnot> shift)
{
    Marginal m;
    m.family = MarginalFamily::uniform;
    m.low = low;
    m.high = high;
    m.age_shift = std::move(shift);
    return m;
}

Marginal Marginal::truncated_normal(double mean, double sd, double low, double high, std::vector<AgeKnot> shift)
{
    Marginal m;
    m.family = MarginalFamily::truncated_normal;
    m.mean = mean;
    m.sd = sd;
    m.low = low;
    m.high = high;
    m.age_shift = std::move(shift);
    return m;
}

Marginal Marginal::point(double value)
{
    Marginal m;
    m.family = MarginalFamily::point;
    m.low = m.high = value;
    return m;
}

double LvetLink::deterministic(double heart_rate, double stroke_volume) const
{
    return intercept - hr_slope * heart_rate + sv_slope * (stroke_volume - sv_reference);
}

namespace {

const char* family_name(MarginalFamily f)
{
    switch (f) {
    case MarginalFamily::uniform: return "uniform";
    case MarginalFamily::truncated_normal: return "truncated_normal";
    case MarginalFamily::point: return "point";
    }
    return "";
}

json marginal_to_json(const Marginal& m)
{
    json knots = json::array();
    for (const auto& k : m.age_shift)
        knots.push_back({k.age, k.shift});
    json j = {{"family", family_name(m.family)}, {"low", m.low}, {"high", m.high}, {"age_shift", knots}};
    if (m.family == MarginalFamily::truncated_normal) {
        j["mean"] = m.mean;
        j["sd"] = m.sd;
    }
    return j;
}

Marginal marginal_from_json(const json& j, const std::string& name)
{
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "family" && it.key() != "low" && it.key() != "high" && it.key() != "mean"
            && it.key() != "sd" && it.key() != "age_shift" && it.key() != "value")
            throw ConfigError("prior." + name + ": unknown key '" + it.key() + "'");
    Marginal m;
    const auto family = j.value("family", std::string("uniform"));
    if (family == "uniform")
        m.family = MarginalFamily::uniform;
    else if (family == "truncated_normal")
        m.family = MarginalFamily::truncated_normal;
    else if (family == "point")
        m.family = MarginalFamily::point;
    else
        throw ConfigError("prior." + name + ": unknown family '" + family + "'");
    if (m.family == MarginalFamily::point && j.contains("value")) {
        m.low = m.high = j.at("value").get<double>();
    } else {
        m.low = j.at("low").get<double>();
        m.high = j.value("high", m.low);
    }
    m.mean = j.value("mean", 0.5 * (m.low + m.high));
    m.sd = j.value("sd", 0.0);
    if (j.contains("age_shift"))
        for (const auto& k : j.at("age_shift"))
            m.age_shift.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
    return m;
}

template <class Fn>
void for_each_marginal(const PriorSpec& s, Fn&& fn)
{
    fn("age", s.age);
    fn("heart_rate", s.heart_rate);
    fn("stroke_volume", s.stroke_volume);
    fn("peak_flow_time", s.peak_flow_time);
    fn("reflected_fraction", s.reflected_fraction);
    fn("diameter_scale", s.diameter_scale);
    fn("stiffness_scale", s.stiffness_scale);
    fn("resistance_scale", s.resistance_scale);
    fn("compliance_scale", s.compliance_scale);
    fn("aorta_length_scale", s.aorta_length_scale);
}

template <class Fn>
void for_each_marginal(PriorSpec& s, Fn&& fn)
{
    fn("age", s.age);
    fn("heart_rate", s.heart_rate);
    fn("stroke_volume", s.stroke_volume);
    fn("peak_flow_time", s.peak_flow_time);
    fn("reflected_fraction", s.reflected_fraction);
    fn("diameter_scale", s.diameter_scale);
    fn("stiffness_scale", s.stiffness_scale);
    fn("resistance_scale", s.resistance_scale);
    fn("compliance_scale", s.compliance_scale);
    fn("aorta_length_scale", s.aorta_length_scale);
}

bool usable_heart(const HeartFunction& h)
{
    try {
        h.validate();
        InflowProfile probe(h);
        return true;
    } catch (const DomainError&) {
        return false;
    }
}

} // namespace

void PriorSpec::validate() const
{
    for_each_marginal(*this, [](const std::string& name, const Marginal& m) {
        if (!std::isfinite(m.low) || !std::isfinite(m.high) || m.high < m.low)
            throw ConfigError("prior." + name + ": need finite bounds with low <= high");
        if (m.family == MarginalFamily::truncated_normal && !(m.sd > 0.0))
            throw ConfigError("prior." + name + ": truncated normal needs sd > 0");
        for (std::size_t i = 1; i < m.age_shift.size(); ++i)
            if (!(m.age_shift[i].age > m.age_shift[i - 1].age))
                throw ConfigError("prior." + name + ": age knots must increase");
    });
    if (!(lvet.low < lvet.high) || lvet.jitter_sd < 0.0)
        throw ConfigError("prior.lvet: need low < high and jitter_sd >= 0");
    if (max_rejections < 1)
        throw ConfigError("prior.max_rejections must be positive");
}

json PriorSpec::to_json() const
{
    json j;
    for_each_marginal(*this, [&](const std::string& name, const Marginal& m) { j[name] = marginal_to_json(m); });
    j["lvet"] = {{"intercept_s", lvet.intercept},      {"hr_slope_s_per_bpm", lvet.hr_slope},
                 {"sv_slope_s_per_m3", lvet.sv_slope}, {"sv_reference_m3", lvet.sv_reference},
                 {"jitter_sd_s", lvet.jitter_sd},      {"low_s", lvet.low},
                 {"high_s", lvet.high}};
    j["max_rejections"] = max_rejections;
    return j;
}

PriorSpec PriorSpec::from_json(const json& j)
{
    PriorSpec s;
    std::set<std::string> known = {"lvet", "max_rejections"};
    for_each_marginal(s, [&](const std::string& name, Marginal& m) {
        known.insert(name);
        if (j.contains(name))
            m = marginal_from_json(j.at(name), name);
    });
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("prior: unknown key '" + it.key() + "'");
    if (j.contains("lvet")) {
        const auto& l = j.at("lvet");
        s.lvet.intercept = l.value("intercept_s", s.lvet.intercept);
        s.lvet.hr_slope = l.value("hr_slope_s_per_bpm", s.lvet.hr_slope);
        s.lvet.sv_slope = l.value("sv_slope_s_per_m3", s.lvet.sv_slope);
        s.lvet.sv_reference = l.value("sv_reference_m3", s.lvet.sv_reference);
        s.lvet.jitter_sd = l.value("jitter_sd_s", s.lvet.jitter_sd);
        s.lvet.low = l.value("low_s", s.lvet.low);
        s.lvet.high = l.value("high_s", s.lvet.high);
    }
    s.max_rejections = j.value("max_rejections", s.max_rejections);
    s.validate();
    return s;
}

std::string PriorSpec::hash() const
{
    return hex64(fnv1a(to_json().dump()));
}

ParameterVector sample_parameters(const PriorSpec& spec, Rng& rng)
{
    for (int attempt = 0; attempt < spec.max_rejections; ++attempt) {
        ParameterVector p;
        p.age = spec.age.sample(rng, 50.0);
        p.heart_rate = spec.heart_rate.sample(rng, p.age);
        p.stroke_volume = spec.stroke_volume.sample(rng, p.age);
        p.peak_flow_time = spec.peak_flow_time.sample(rng, p.age);
        p.reflected_fraction = spec.reflected_fraction.sample(rng, p.age);
        p.diameter_scale = spec.diameter_scale.sample(rng, p.age);
        p.stiffness_scale = spec.stiffness_scale.sample(rng, p.age);
        p.resistance_scale = spec.resistance_scale.sample(rng, p.age);
        p.compliance_scale = spec.compliance_scale.sample(rng, p.age);
        p.aorta_length_scale = spec.aorta_length_scale.sample(rng, p.age);

        const double base = spec.lvet.deterministic(p.heart_rate, p.stroke_volume);
        if (spec.lvet.jitter_sd > 0.0) {
            auto jitter = Marginal::truncated_normal(base, spec.lvet.jitter_sd, spec.lvet.low, spec.lvet.high);
            if (base < spec.lvet.low - 8 * spec.lvet.jitter_sd || base > spec.lvet.high + 8 * spec.lvet.jitter_sd)
                continue;
            p.lvet = jitter.sample(rng, 0.0);
        } else {
            p.lvet = std::clamp(base, spec.lvet.low, spec.lvet.high);
        }

        const bool positive = p.heart_rate > 0 && p.stroke_volume > 0 && p.diameter_scale > 0
                              && p.stiffness_scale > 0 && p.resistance_scale > 0 && p.compliance_scale > 0
                              && p.aorta_length_scale > 0 && p.reflected_fraction >= 0;
        if (positive && usable_heart(p.heart()))
            return p;
    }
    throw ConfigError("prior support is empty after constraints (no valid draw in "
                      + std::to_string(spec.max_rejections) + " attempts)");
}

std::vector<ParameterVector> sample_prior(const PriorSpec& spec, std::uint64_t seed, std::size_t n)
{
    spec.validate();
    std::vector<ParameterVector> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = make_rng(seed, {stream::prior, i, 0});
        out.push_back(sample_parameters(spec, rng));
        out.back().id = "s" + std::to_string(i);
    }
    return out;
}

double mean_reference_diameter(const ArterialNetwork& net)
{
    if (net.segments.empty())
        throw DomainError("network has no segments");
    double s = 0.0;
    for (const auto& seg : net.segments)
        s += 2.0 * seg.reference_radius(0.5 * seg.length);
    return s / static_cast<double>(net.segments.size());
}

ArterialNetwork instantiate_network(const ArterialNetwork& tmpl, const ParameterVector& p)
{
    ArterialNetwork net = tmpl;
    for (auto& seg : net.segments) {
        seg.radius_proximal *= p.diameter_scale;
        seg.radius_distal *= p.diameter_scale;
        seg.elastic_modulus *= p.stiffness_scale;
        if (seg.proximal_aorta)
            seg.length *= p.aorta_length_scale;
    }
    for (auto& [leaf, bed] : net.beds) {
        bed.proximal_resistance *= p.resistance_scale;
        bed.distal_resistance *= p.resistance_scale;
        bed.compliance *= p.compliance_scale;
    }
    net.heart = p.heart();
    const auto report = validate_network(net);
    if (!report.empty())
        throw ConfigError("instantiated network is invalid:\n" + format_report(report));
    return net;
}

double derive_pwv(const std::map<std::string, WaveformRecord>& waveforms, const ArterialNetwork& net)
{
    const auto& b = net.biomarkers;
    if (b.pwv_proximal.empty() || b.pwv_distal.empty())
        throw ConfigError("network does not name PWV sites");
    const auto& prox = waveforms.at(b.pwv_proximal);
    const auto& dist = waveforms.at(b.pwv_distal);
    const double length = net.distance_from_root(net.site(b.pwv_distal)) - net.distance_from_root(net.site(b.pwv_proximal));
    if (!(length > 0.0))
        throw ConfigError("PWV sites must lie on a root-to-leaf path, proximal first");
    const double period = prox.beat_period > 0.0 ? prox.beat_period : prox.duration();
    const double t0 = foot_time(prox.samples, prox.sampling_rate, true);
    const double t1 = foot_time(dist.samples, dist.sampling_rate, true);
    double transit = std::fmod(t1 - t0, period);
    if (transit < 0.0)
        transit += period;
    if (!(transit > 0.0))
        throw SignalError("zero foot-to-foot transit time");
    return length / transit;
}

double derive_svr(double mean_arterial_pressure, double outflow_pressure, const HeartFunction& heart)
{
    const double co = heart.heart_rate * heart.stroke_volume / 60.0;
    if (!(co > 0.0))
        throw DomainError("cardiac output must be positive to derive SVR");
    return (mean_arterial_pressure - outflow_pressure) / co;
}

namespace {

double mean_outflow_pressure(const ArterialNetwork& net)
{
    double s = 0.0;
    for (const auto& [leaf, bed] : net.beds)
        s += bed.outflow_pressure;
    return net.beds.empty() ? 0.0 : s / static_cast<double>(net.beds.size());
}

} // namespace

double derive_svr(const std::map<std::string, WaveformRecord>& waveforms, const ArterialNetwork& net)
{
    const auto& root = waveforms.at(net.biomarkers.root_pressure);
    return derive_svr(mean(root.samples), mean_outflow_pressure(net), net.heart);
}

std::string to_string(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::validation: return "val";
    case Split::test: return "test";
    }
    return "";
}

Split split_from_string(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "val")
        return Split::validation;
    if (s == "test")
        return Split::test;
    throw IoError("unknown split '" + s + "'");
}

std::array<std::size_t, 3> split_sizes(std::size_t n)
{
    const auto train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
    const auto val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    return {train, val, n - train - val};
}

std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, {stream::split});
    std::shuffle(order.begin(), order.end(), rng);
    const auto sizes = split_sizes(n);
    std::vector<Split> out(n, Split::test);
    for (std::size_t k = 0; k < n; ++k)
        out[order[k]] = k < sizes[0] ? Split::train : k < sizes[0] + sizes[1] ? Split::validation : Split::test;
    return out;
}

std::vector<std::size_t> SimulationDataset::indices(Split s) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
        if (splits[i] == s)
            out.push_back(i);
    return out;
}

std::string SimulationDataset::hash() const
{
    std::uint64_t h = fnv1a(prior_hash + network);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        h = fnv1a(r.params.id, h);
        for (const auto& [name, v] : r.params.columns())
            h = fnv1a(&v, sizeof v, h);
        for (const auto& [site, w] : r.waveforms) {
            h = fnv1a(site, h);
            h = fnv1a(w.samples.data(), w.samples.size() * sizeof(double), h);
        }
        if (i < splits.size())
            h = fnv1a(to_string(splits[i]), h);
    }
    return hex64(h);
}

SubjectRecord simulate_subject(const ArterialNetwork& tmpl, ParameterVector p, const DatasetOptions& opt)
{
    const auto net = instantiate_network(tmpl, p);
    auto cfg = opt.solver;
    cfg.sample_rate = opt.derivation_rate;
    auto sim = simulate(net, cfg);

    SubjectRecord rec;
    rec.cycles = sim.diagnostics.cycles;
    rec.converged = sim.diagnostics.converged;
    p.diameter = mean_reference_diameter(net);
    p.pwv = derive_pwv(sim.waveforms, net);
    rec.mean_arterial_pressure = mean(sim.waveforms.at(net.biomarkers.root_pressure).samples);
    p.svr = derive_svr(rec.mean_arterial_pressure, mean_outflow_pressure(net), net.heart);
    for (auto& [site, w] : sim.waveforms) {
        auto stored = opt.derivation_rate == opt.solver.sample_rate ? w : resample_beat(w, opt.solver.sample_rate);
        if (stored.kind == SignalKind::ppg_proxy)
            stored = extract_ppg(stored);
        // Stored at float32 precision so a dataset read back from disk is identical.
        for (auto& v : stored.samples)
            v = static_cast<float>(v);
        stored.parameter_id = p.id;
        rec.waveforms.emplace(site, std::move(stored));
    }
    rec.params = std::move(p);
    return rec;
}

SimulationDataset generate_dataset(const PriorSpec& spec, const ArterialNetwork& tmpl, std::size_t n,
                                   std::uint64_t seed, const DatasetOptions& opt)
{
    if (n < 10)
        throw ConfigError("n too small: a dataset needs at least 10 subjects");
    spec.validate();
    const auto report = validate_network(tmpl);
    if (!report.empty())
        throw ConfigError("template network is invalid:\n" + format_report(report));

    SimulationDataset ds;
    ds.records.resize(n);
    ds.seed = seed;
    ds.prior = spec.to_json();
    ds.prior_hash = spec.hash();
    ds.network = tmpl.name;
    ds.version = code_version();

    std::vector<std::vector<std::string>> errors(n);
    std::vector<char> ok(n, 0);
    for_each_index(n, opt.execution, [&](std::size_t i) {
        for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
            auto rng = make_rng(seed, {stream::prior, i, static_cast<std::uint64_t>(attempt)});
            try {
                auto p = sample_parameters(spec, rng);
                p.id = "s" + std::to_string(i);
                ds.records[i] = simulate_subject(tmpl, std::move(p), opt);
                ds.records[i].attempts = attempt + 1;
                ok[i] = 1;
                return;
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                errors[i].push_back("subject " + std::to_string(i) + " attempt " + std::to_string(attempt) + ": "
                                    + e.what());
            }
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        ds.failures += static_cast<int>(errors[i].size());
        for (auto& m : errors[i])
            ds.failure_messages.push_back(std::move(m));
    }
    const bool all_ok = std::all_of(ok.begin(), ok.end(), [](char c) { return c != 0; });
    if (!all_ok || ds.failures > opt.max_failure_fraction * static_cast<double>(n)) {
        std::string msg = "dataset generation aborted: " + std::to_string(ds.failures) + " failed simulations for "
                          + std::to_string(n) + " subjects";
        for (std::size_t k = 0; k < std::min<std::size_t>(5, ds.failure_messages.size()); ++k)
            msg += "\n  " + ds.failure_messages[k];
        throw Error(msg);
    }
    ds.splits = assign_splits(n, seed);
    return ds;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
        out.push_back(cell);
    return out;
}

} // namespace

void write_dataset(const std::filesystem::path& dir, const SimulationDataset& ds)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir / "waveforms");
    std::ofstream csv(dir / "params.csv");
    if (!csv)
        throw IoError("cannot write " + (dir / "params.csv").string());
    csv.precision(17);
    csv << "id,split";
    if (!ds.records.empty())
        for (const auto& [name, v] : ds.records.front().params.columns())
            csv << ',' << name;
    csv << ",map_Pa,cycles,converged\n";

    json sites = json::array();
    if (!ds.records.empty())
        for (const auto& [site, w] : ds.records.front().waveforms)
            sites.push_back(site);

    json split_json = json::object();
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        csv << r.params.id << ',' << to_string(ds.splits.at(i));
        for (const auto& [name, v] : r.params.columns())
            csv << ',' << v;
        csv << ',' << r.mean_arterial_pressure << ',' << r.cycles << ',' << (r.converged ? 1 : 0) << '\n';
        split_json[r.params.id] = to_string(ds.splits.at(i));
        const auto sub = dir / "waveforms" / r.params.id;
        fs::create_directories(sub);
        for (const auto& [site, w] : r.waveforms)
            write_waveform(sub / site, w);
    }
    const auto sizes = split_sizes(ds.records.size());
    json manifest = {{"seed", ds.seed},
                     {"n", ds.records.size()},
                     {"network", ds.network},
                     {"prior", ds.prior},
                     {"prior_hash", ds.prior_hash},
                     {"sites", sites},
                     {"split_sizes", {{"train", sizes[0]}, {"val", sizes[1]}, {"test", sizes[2]}}},
                     {"splits", split_json},
                     {"failures", ds.failures},
                     {"failure_messages", ds.failure_messages},
                     {"dataset_hash", ds.hash()},
                     {"code_version", ds.version}};
    std::ofstream m(dir / "manifest.json");
    if (!m)
        throw IoError("cannot write " + (dir / "manifest.json").string());
    m << manifest.dump(2) << '\n';
}

SimulationDataset read_dataset(const std::filesystem::path& dir)
{
    std::ifstream mf(dir / "manifest.json");
    if (!mf)
        throw IoError("no manifest.json in " + dir.string());
    const auto manifest = json::parse(mf);
    SimulationDataset ds;
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.network = manifest.at("network").get<std::string>();
    ds.prior = manifest.at("prior");
    ds.prior_hash = manifest.at("prior_hash").get<std::string>();
    ds.failures = manifest.value("failures", 0);
    ds.failure_messages = manifest.value("failure_messages", std::vector<std::string>{});
    ds.version = manifest.value("code_version", std::string());
    const auto sites = manifest.at("sites").get<std::vector<std::string>>();

    std::ifstream csv(dir / "params.csv");
    if (!csv)
        throw IoError("no params.csv in " + dir.string());
    std::string line;
    std::getline(csv, line);
    const auto header = split_csv_line(line);
    while (std::getline(csv, line)) {
        if (line.empty())
            continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw IoError("params.csv: row has " + std::to_string(cells.size()) + " cells, header has "
                          + std::to_string(header.size()));
        std::map<std::string, double> cols;
        for (std::size_t c = 2; c < cells.size(); ++c)
            cols[header[c]] = std::stod(cells[c]);
        SubjectRecord r;
        r.params = ParameterVector::from_columns(cols);
        r.params.id = cells[0];
        r.mean_arterial_pressure = cols.at("map_Pa");
        r.cycles = static_cast<int>(cols.at("cycles"));
        r.converged = cols.at("converged") != 0.0;
        for (const auto& site : sites)
            r.waveforms.emplace(site, read_waveform(dir / "waveforms" / r.params.id / site));
        ds.splits.push_back(split_from_string(cells[1]));
        ds.records.push_back(std::move(r));
    }
    return ds;
}

} // namespace hemosbi
