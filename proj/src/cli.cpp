#include "hemosbi/cli.hpp"

#include "hemosbi/network_io.hpp"
#include "hemosbi/npe.hpp"
#include "hemosbi/population.hpp"
#include "hemosbi/uncertainty.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace hemosbi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* output_root_env = "HEMOSBI_OUTPUT_ROOT";

/// Raised for bad command lines; reported with the usage hint.
struct UsageError : ConfigError {
    using ConfigError::ConfigError;
};

struct Globals {
    std::uint64_t seed = 0;
    int workers = 0;
    bool force = false;
    std::string out;
};

fs::path output_root()
{
    const char* env = std::getenv(output_root_env);
    return env && *env ? fs::path(env) : fs::path("hemosbi_runs");
}

fs::path output_dir(const Globals& g, const std::string& fallback)
{
    return g.out.empty() ? output_root() / fallback : fs::path(g.out);
}

/// Creates `dir`; an existing non-empty directory is replaced only with --force.
void prepare_dir(const fs::path& dir, bool force)
{
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force)
            throw IoError(dir.string() + " already exists and is not empty (use --force to replace it)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

void write_json(const fs::path& path, const json& j)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::ofstream open_csv(const fs::path& path)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    out.precision(10);
    return out;
}

/// Settings file merged under explicit flags.
json load_settings(const std::string& file)
{
    if (file.empty())
        return json::object();
    auto j = read_json_file(file);
    if (!j.is_object())
        throw ConfigError(file + ": expected a JSON object");
    return j;
}

json solver_to_json(const SolverConfig& c)
{
    return {{"cell_size_m", c.cell_size}, {"cfl", c.cfl},           {"sample_rate_hz", c.sample_rate},
            {"tolerance", c.tolerance},   {"max_cycles", c.max_cycles}};
}

SolverConfig solver_from_json(const json& j)
{
    SolverConfig c;
    for (const auto& [k, v] : j.items()) {
        if (k == "cell_size_m")
            c.cell_size = v.get<double>();
        else if (k == "cfl")
            c.cfl = v.get<double>();
        else if (k == "sample_rate_hz")
            c.sample_rate = v.get<double>();
        else if (k == "tolerance")
            c.tolerance = v.get<double>();
        else if (k == "max_cycles")
            c.max_cycles = v.get<int>();
        else
            throw ConfigError("solver: unknown key '" + k + "'");
    }
    return c;
}

std::optional<double> parse_snr(const std::string& s)
{
    if (s == "clean" || s == "none")
        return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size())
            return v;
    } catch (const std::exception&) {
    }
    throw UsageError("invalid SNR '" + s + "' (expected a number in dB or 'clean')");
}

json snr_json(std::optional<double> snr)
{
    return snr ? json(*snr) : json(nullptr);
}

std::optional<double> snr_from_json(const json& j)
{
    return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

std::string snr_text(std::optional<double> snr)
{
    if (!snr)
        return "clean";
    std::ostringstream s;
    s << *snr;
    return s.str();
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
    std::string config;
    std::string network;
    std::string params;
    bool prior_draw = false;
    std::string prior;
    bool csv = true;
};

ParameterVector parameters_from_json(const json& j)
{
    std::map<std::string, double> cols;
    for (const auto& [k, v] : ParameterVector{}.columns())
        cols[k] = v;
    for (const auto& [k, v] : j.items()) {
        if (k == "id")
            continue;
        if (!cols.count(k))
            throw ConfigError("parameters: unknown key '" + k + "'");
        cols[k] = v.get<double>();
    }
    auto p = ParameterVector::from_columns(cols);
    p.id = j.value("id", std::string("subject"));
    return p;
}

json parameters_to_json(const ParameterVector& p)
{
    json j = {{"id", p.id}};
    for (const auto& [k, v] : p.columns())
        j[k] = v;
    return j;
}

int cmd_simulate(const Globals& g, const SimulateArgs& a, std::ostream& out, std::ostream& err)
{
    json cfg = load_settings(a.config);
    if (!a.network.empty())
        cfg["network"] = a.network;
    if (!a.params.empty())
        cfg["parameters"] = read_json_file(a.params);
    if (a.prior_draw)
        cfg["prior_draw"] = true;
    if (!a.prior.empty())
        cfg["prior"] = read_json_file(a.prior);
    if (!cfg.contains("network"))
        throw UsageError("simulate needs --network");
    const bool draw = cfg.value("prior_draw", false);
    if (draw && cfg.contains("parameters"))
        throw UsageError("--params and --prior-draw are exclusive");

    const auto net = load_network(cfg.at("network").get<std::string>());
    const auto violations = validate_network(net);
    if (!violations.empty()) {
        err << "invalid network:\n" << format_report(violations);
        return 1;
    }
    DatasetOptions opt;
    opt.solver = solver_from_json(cfg.value("solver", json::object()));
    cfg["solver"] = solver_to_json(opt.solver);
    cfg["command"] = "simulate";
    cfg["seed"] = g.seed;
    cfg["version"] = code_version();

    std::map<std::string, WaveformRecord> waveforms;
    json summary;
    bool converged = false;
    if (draw || cfg.contains("parameters")) {
        ParameterVector p;
        if (draw) {
            const auto spec = cfg.contains("prior") ? PriorSpec::from_json(cfg["prior"]) : PriorSpec{};
            cfg["prior"] = spec.to_json();
            p = sample_prior(spec, g.seed, 1).front();
        } else {
            p = parameters_from_json(cfg["parameters"]);
        }
        opt.derivation_rate = std::max(opt.derivation_rate, opt.solver.sample_rate);
        auto rec = simulate_subject(net, p, opt);
        converged = rec.converged;
        waveforms = std::move(rec.waveforms);
        summary = {{"parameters", parameters_to_json(rec.params)},
                   {"cycles", rec.cycles},
                   {"converged", rec.converged},
                   {"mean_arterial_pressure_Pa", rec.mean_arterial_pressure}};
    } else {
        auto sim = simulate(net, opt.solver);
        converged = sim.diagnostics.converged;
        waveforms = std::move(sim.waveforms);
        summary = {{"cycles", sim.diagnostics.cycles},
                   {"converged", sim.diagnostics.converged},
                   {"residual", sim.diagnostics.residual},
                   {"residual_history", sim.diagnostics.residual_history},
                   {"steps", sim.diagnostics.steps},
                   {"cycle_volume_drift_m3", sim.diagnostics.cycle_volume_drift},
                   {"cycle_inflow_m3", sim.diagnostics.cycle_inflow},
                   {"warnings", sim.diagnostics.warnings}};
    }

    const auto dir = output_dir(g, "simulate");
    prepare_dir(dir, g.force);
    fs::create_directories(dir / "waveforms");
    for (const auto& [site, w] : waveforms) {
        write_waveform(dir / "waveforms" / site, w);
        if (a.csv)
            write_waveform_csv(dir / "waveforms" / (site + ".csv"), w);
    }
    write_json(dir / "diagnostics.json", summary);
    write_json(dir / "config.json", cfg);

    out << "simulated " << waveforms.size() << " sites in " << summary["cycles"].get<int>() << " cycles -> "
        << dir.string() << '\n';
    if (!converged) {
        err << "warning: periodic state not reached within " << opt.solver.max_cycles << " cycles\n";
        return 2;
    }
    return 0;
}

// dataset -------------------------------------------------------------------

struct DatasetArgs {
    std::string config;
    std::string network;
    std::string prior;
    long n = -1;
};

int cmd_dataset(const Globals& g, const DatasetArgs& a, std::ostream& out, std::ostream& err)
{
    json cfg = load_settings(a.config);
    if (!a.network.empty())
        cfg["network"] = a.network;
    if (!a.prior.empty())
        cfg["prior"] = read_json_file(a.prior);
    if (a.n >= 0)
        cfg["n"] = a.n;
    if (!cfg.contains("network") || !cfg.contains("n"))
        throw UsageError("dataset needs --network and --n");
    const long n = cfg["n"].get<long>();
    if (n < 10)
        throw ConfigError("n too small: a dataset needs at least 10 subjects");

    const auto spec = cfg.contains("prior") ? PriorSpec::from_json(cfg["prior"]) : PriorSpec{};
    DatasetOptions opt;
    opt.solver = solver_from_json(cfg.value("solver", json::object()));
    opt.derivation_rate = cfg.value("derivation_rate_hz", opt.derivation_rate);
    opt.max_failure_fraction = cfg.value("max_failure_fraction", opt.max_failure_fraction);
    cfg["prior"] = spec.to_json();
    cfg["solver"] = solver_to_json(opt.solver);
    cfg["derivation_rate_hz"] = opt.derivation_rate;
    cfg["max_failure_fraction"] = opt.max_failure_fraction;
    cfg["command"] = "dataset";
    cfg["seed"] = g.seed;
    cfg["version"] = code_version();

    const auto net = load_network(cfg["network"].get<std::string>());
    const auto violations = validate_network(net);
    if (!violations.empty()) {
        err << "invalid network:\n" << format_report(violations);
        return 1;
    }
    const auto dir = output_dir(g, "dataset");
    prepare_dir(dir, g.force);
    const auto ds = generate_dataset(spec, net, static_cast<std::size_t>(n), g.seed, opt);
    write_dataset(dir, ds);
    write_json(dir / "config.json", cfg);

    const auto sizes = split_sizes(ds.records.size());
    out << "train / validation / test: " << sizes[0] << " / " << sizes[1] << " / " << sizes[2] << '\n';
    out << "dataset hash " << ds.hash() << " -> " << dir.string() << '\n';
    if (ds.failures > 0)
        out << ds.failures << " failed draws were resampled\n";
    int unconverged = 0;
    for (const auto& r : ds.records)
        unconverged += r.converged ? 0 : 1;
    if (unconverged > 0) {
        err << "warning: " << unconverged << " subjects did not reach a periodic state\n";
        return 2;
    }
    return 0;
}

// train ---------------------------------------------------------------------

/// Where the training data of a run comes from, as stored in config.json.
struct DataSource {
    std::string dataset;  // directory, or empty for a toy
    std::string toy;
    std::size_t n = 5000;
    std::uint64_t data_seed = 0;

    json to_json() const
    {
        if (!dataset.empty())
            return {{"dataset", dataset}};
        return {{"toy", toy}, {"n", n}, {"data_seed", data_seed}};
    }

    static DataSource from_json(const json& j)
    {
        DataSource d;
        if (j.contains("dataset")) {
            d.dataset = j["dataset"].get<std::string>();
        } else if (j.contains("toy")) {
            d.toy = j["toy"].get<std::string>();
            d.n = j.value("n", d.n);
            d.data_seed = j.value("data_seed", d.data_seed);
        } else {
            throw UsageError("no training data: give --dataset or --toy");
        }
        return d;
    }
};

/// Problem, data hash and prior hash of a source at one SNR.
struct LoadedProblem {
    NpeProblem problem;
    std::string data_hash;
    std::string prior_hash;
};

class ProblemCache {
public:
    LoadedProblem load(const DataSource& src, const std::string& site, std::optional<double> snr)
    {
        if (src.dataset.empty()) {
            auto p = toy_problem(src.toy, src.n, src.data_seed, snr);
            return {std::move(p), hex64(fnv1a(src.to_json().dump())), "toy"};
        }
        const auto& ds = dataset(src.dataset);
        return {simulation_problem(ds, site, snr), ds.hash(), ds.prior_hash};
    }

    const SimulationDataset& dataset(const std::string& dir)
    {
        auto it = cache_.find(dir);
        if (it == cache_.end())
            it = cache_.emplace(dir, read_dataset(dir)).first;
        return it->second;
    }

private:
    std::map<std::string, SimulationDataset> cache_;
};

struct TrainArgs {
    std::string config;
    std::string dataset;
    std::string toy;
    long n = -1;
    long data_seed = -1;
    std::string snr;
    std::string site;
    int epochs = -1;
    int batch_size = -1;
    double learning_rate = -1.0;
    double width = -1.0;
};

void write_summary_csv(const fs::path& path, const TrainingHistory& h, const std::string& status, std::size_t n_train)
{
    auto out = open_csv(path);
    out << "key,value\n";
    out << "status," << status << '\n';
    out << "epochs_completed," << h.size() << '\n';
    out << "best_epoch," << h.best_epoch << '\n';
    out << "best_validation_loss,";
    if (h.size() > 0)
        out << h.best_validation_loss();
    out << '\n';
    out << "final_train_loss,";
    if (!h.train_loss.empty())
        out << h.train_loss.back();
    out << '\n';
    out << "n_train," << n_train << '\n';
}

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, std::ostream& err)
{
    json cfg = load_settings(a.config);
    json data = cfg.value("data", json::object());
    if (!a.dataset.empty())
        data = {{"dataset", a.dataset}};
    if (!a.toy.empty())
        data = {{"toy", a.toy}};
    if (a.n >= 0)
        data["n"] = a.n;
    if (data.contains("toy") && !data.contains("data_seed"))
        data["data_seed"] = a.data_seed >= 0 ? static_cast<std::uint64_t>(a.data_seed) : g.seed;
    const auto src = DataSource::from_json(data);

    json tj = cfg.value("train", json::object());
    tj["seed"] = g.seed;
    if (a.epochs >= 0)
        tj["epochs"] = a.epochs;
    if (a.batch_size >= 0)
        tj["batch_size"] = a.batch_size;
    if (a.learning_rate >= 0.0)
        tj["learning_rate"] = a.learning_rate;
    if (a.width >= 0.0)
        tj["width"] = a.width;
    if (!a.site.empty())
        tj["site"] = a.site;
    if (!a.snr.empty())
        tj["snr_db"] = snr_json(parse_snr(a.snr));
    else if (!src.toy.empty() && !tj.contains("snr_db"))
        tj["snr_db"] = nullptr;
    const auto tc = TrainConfig::from_json(tj);

    ProblemCache cache;
    const auto loaded = cache.load(src, tc.site, tc.snr_db);
    const json stored = {{"command", "train"},
                         {"seed", g.seed},
                         {"version", code_version()},
                         {"data", src.to_json()},
                         {"train", tc.to_json()}};

    const auto dir = output_dir(g, "train");
    prepare_dir(dir, g.force);
    write_json(dir / "config.json", stored);
    const std::size_t n_train = loaded.problem.split(Split::train).size();
    try {
        const auto r = train(loaded.problem, tc);
        r.history.write_csv(dir / "history.csv");
        save_checkpoint(dir / "model.ckpt", r.model,
                        {{"data_hash", loaded.data_hash},
                         {"prior_hash", loaded.prior_hash},
                         {"problem", loaded.problem.name},
                         {"train", tc.to_json()}});
        write_summary_csv(dir / "summary.csv", r.history, "ok", n_train);
        out << "trained " << r.history.size() << " epochs, best epoch " << r.history.best_epoch
            << " validation loss " << (r.history.size() ? r.history.best_validation_loss() : 0.0) << " -> "
            << dir.string() << '\n';
    } catch (const TrainingDiverged& e) {
        e.history().write_csv(dir / "history.csv");
        write_summary_csv(dir / "summary.csv", e.history(), "diverged", n_train);
        err << "error: " << e.what() << " (history kept in " << dir.string() << ")\n";
        return 1;
    }
    return 0;
}

// analyze -------------------------------------------------------------------

const std::set<std::string>& known_metrics()
{
    static const std::set<std::string> m = {"calibration", "sci", "mi", "point", "dip", "laplace"};
    return m;
}

struct AnalyzeArgs {
    std::string config;
    std::vector<std::string> runs;
    std::string metrics;
    std::vector<std::string> snr;
    std::string dataset;
    std::vector<double> levels;
    long n_samples = -1;
    long laplace_count = -1;
};

json filter_report(const json& report, const std::set<std::string>& metrics)
{
    json r = report;
    for (auto& p : r["parameters"]) {
        if (!metrics.count("calibration")) {
            p.erase("calibration");
            p.erase("ks_p_value");
        }
        if (!metrics.count("point")) {
            p.erase("mae");
            p.erase("correlation");
        }
        if (!metrics.count("dip"))
            p.erase("multimodal_fraction");
        if (!metrics.count("sci") && !metrics.count("mi"))
            p.erase("sci");
        else
            for (auto& l : p["sci"]) {
                if (!metrics.count("mi"))
                    l.erase("mi_bound_bits");
                if (!metrics.count("sci")) {
                    l.erase("sci_mean");
                    l.erase("sci_std");
                }
            }
    }
    return r;
}

int cmd_analyze(const Globals& g, const AnalyzeArgs& a, std::ostream& out, std::ostream& err)
{
    json cfg = load_settings(a.config);
    if (!a.runs.empty())
        cfg["runs"] = a.runs;
    if (!a.metrics.empty()) {
        json m = json::array();
        std::stringstream s(a.metrics);
        for (std::string item; std::getline(s, item, ',');)
            if (!item.empty())
                m.push_back(item);
        cfg["metrics"] = m;
    }
    if (!a.snr.empty()) {
        json s = json::array();
        for (const auto& v : a.snr)
            s.push_back(snr_json(parse_snr(v)));
        cfg["snr_db"] = s;
    }
    if (!a.dataset.empty())
        cfg["dataset"] = a.dataset;
    if (!a.levels.empty())
        cfg["levels"] = a.levels;
    if (a.n_samples >= 0)
        cfg["n_samples"] = a.n_samples;
    if (a.laplace_count >= 0)
        cfg["laplace_count"] = a.laplace_count;

    if (!cfg.contains("metrics") || cfg["metrics"].empty())
        throw UsageError("analyze needs a non-empty --metrics list (one or more of "
                         "calibration,sci,mi,point,dip,laplace)");
    std::set<std::string> metrics;
    for (const auto& m : cfg["metrics"]) {
        if (!known_metrics().count(m.get<std::string>()))
            throw UsageError("unknown metric '" + m.get<std::string>() + "'");
        metrics.insert(m.get<std::string>());
    }
    if (!cfg.contains("runs") || cfg["runs"].empty())
        throw UsageError("analyze needs at least one run directory");

    AnalysisOptions opt;
    opt.seed = g.seed;
    if (cfg.contains("levels"))
        opt.levels = cfg["levels"].get<Vec>();
    opt.n_samples = cfg.value("n_samples", opt.n_samples);
    const std::size_t laplace_count = cfg.value("laplace_count", std::size_t{20});
    cfg["levels"] = opt.levels;
    cfg["n_samples"] = opt.n_samples;
    cfg["laplace_count"] = laplace_count;
    cfg["command"] = "analyze";
    cfg["seed"] = g.seed;
    cfg["version"] = code_version();

    struct Entry {
        std::string checkpoint;
        std::string site;
        std::optional<double> snr;
        UncertaintyReport report;
        json laplace_rows = json::array();
    };
    std::vector<Entry> entries;
    std::set<std::string> used_ids;
    ProblemCache cache;

    for (const auto& run_json : cfg["runs"]) {
        const fs::path run = run_json.get<std::string>();
        const auto run_cfg = read_json_file(run / "config.json");
        auto src = DataSource::from_json(run_cfg.at("data"));
        if (cfg.contains("dataset"))
            src.dataset = cfg["dataset"].get<std::string>();
        const auto tc = TrainConfig::from_json(run_cfg.at("train"));
        json extra;
        const auto model = load_checkpoint(run / "model.ckpt", &extra);

        std::vector<std::optional<double>> snrs;
        if (cfg.contains("snr_db"))
            for (const auto& s : cfg["snr_db"])
                snrs.push_back(snr_from_json(s));
        else
            snrs.push_back(tc.snr_db);

        std::string base = run.filename().string();
        if (base.empty())
            base = run.parent_path().filename().string();
        for (const auto& snr : snrs) {
            const auto loaded = cache.load(src, tc.site, snr);
            if (extra.value("data_hash", std::string()) != loaded.data_hash ||
                extra.value("prior_hash", std::string()) != loaded.prior_hash) {
                const std::string msg = run.string() + ": checkpoint was trained on data " +
                                        extra.value("data_hash", std::string("?")) + " but the test data hashes to " +
                                        loaded.data_hash;
                if (!g.force) {
                    err << "error: " << msg << " (use --force to analyze anyway)\n";
                    return 1;
                }
                err << "warning: " << msg << '\n';
            }
            std::string id = cfg.contains("snr_db") ? base + "@" + snr_text(snr) : base;
            for (int k = 2; used_ids.count(id); ++k)
                id = base + "_" + std::to_string(k);
            used_ids.insert(id);

            const auto set = make_evaluation_set(loaded.problem, tc.seed);
            const FlowPosterior post(model, set.observations, set.ages);
            Entry e{id, tc.site, snr, analyze(post, set, opt), json::array()};
            if (metrics.count("laplace")) {
                const std::size_t m = std::min(laplace_count, set.size());
                for (std::size_t i = 0; i < m; ++i) {
                    auto rng = make_rng(g.seed, {stream::laplace, i});
                    const auto lap = laplace_baseline(post, i, opt.n_samples, rng);
                    for (int d = 0; d < post.dim(); ++d)
                        e.laplace_rows.push_back(
                            {id, set.ids[i], set.parameter_names[d], set.truth[i][d],
                             lap.sample_mean[d], std::sqrt(lap.sample_covariance(d, d)), lap.mean[d],
                             std::sqrt(lap.covariance(d, d)), lap.fallback ? 1 : 0,
                             e.report.observations[i].multimodal[d] ? 1 : 0});
                }
            }
            entries.push_back(std::move(e));
        }
    }

    const auto dir = output_dir(g, "analysis");
    prepare_dir(dir, g.force);
    write_json(dir / "config.json", cfg);

    json checkpoints = json::array();
    for (const auto& e : entries)
        checkpoints.push_back({{"checkpoint", e.checkpoint},
                               {"site", e.site},
                               {"snr_db", snr_json(e.snr)},
                               {"report", filter_report(e.report.to_json(), metrics)}});
    write_json(dir / "report.json", {{"metrics", std::vector<std::string>(metrics.begin(), metrics.end())},
                                     {"checkpoints", checkpoints}});

    {
        auto csv = open_csv(dir / "report.csv");
        for (std::size_t k = 0; k < entries.size(); ++k)
            entries[k].report.write_csv(csv, entries[k].checkpoint, k == 0);
    }

    if (metrics.count("sci")) {
        // Mean and sample std over checkpoints of the per-checkpoint SCI.
        std::map<std::tuple<std::string, std::optional<double>, std::size_t, std::size_t>, Vec> groups;
        std::vector<std::string> names;
        for (const auto& e : entries)
            for (std::size_t d = 0; d < e.report.parameters.size(); ++d)
                for (std::size_t l = 0; l < opt.levels.size(); ++l)
                    groups[{e.site, e.snr, d, l}].push_back(e.report.parameters[d].sci_mean[l]);
        auto csv = open_csv(dir / "fig2_sci.csv");
        csv << "site,snr_db,parameter,level,sci_mean,sci_std\n";
        for (const auto& [key, values] : groups) {
            const auto& [site, snr, d, l] = key;
            const auto [m, s] = mean_and_std(values);
            csv << site << ',' << snr_text(snr) << ',' << entries.front().report.parameters[d].name << ','
                << opt.levels[l] << ',' << m << ',' << s << '\n';
        }
    }
    if (metrics.count("laplace")) {
        auto csv = open_csv(dir / "fig3_laplace.csv");
        csv << "checkpoint,id,parameter,truth,posterior_mean,posterior_std,laplace_mean,laplace_std,"
               "laplace_fallback,multimodal\n";
        for (const auto& e : entries)
            for (const auto& row : e.laplace_rows) {
                for (std::size_t c = 0; c < row.size(); ++c) {
                    if (c)
                        csv << ',';
                    if (row[c].is_string())
                        csv << row[c].get<std::string>();
                    else
                        csv << row[c].get<double>();
                }
                csv << '\n';
            }
    }

    out << "analyzed " << entries.size() << " checkpoint(s) -> " << dir.string() << '\n';
    return 0;
}

// report --------------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> dirs;
};

int cmd_report(const Globals& g, const ReportArgs& a, std::ostream& out, std::ostream& err)
{
    if (a.dirs.empty())
        throw UsageError("report needs at least one directory");
    std::vector<std::string> missing;
    // (parameter, site, snr, level) -> per-checkpoint values
    struct Cell {
        Vec sci, calibration, mae;
    };
    std::map<std::tuple<std::string, std::string, std::optional<double>, double>, Cell> cells;
    std::vector<std::string> order;
    std::size_t n_checkpoints = 0;
    for (const auto& d : a.dirs) {
        const fs::path p = fs::path(d) / "report.json";
        if (!fs::exists(p)) {
            missing.push_back(d);
            continue;
        }
        const auto j = read_json_file(p);
        for (const auto& c : j.at("checkpoints")) {
            ++n_checkpoints;
            const auto snr = snr_from_json(c.at("snr_db"));
            for (const auto& par : c.at("report").at("parameters")) {
                const auto name = par.at("name").get<std::string>();
                if (std::find(order.begin(), order.end(), name) == order.end())
                    order.push_back(name);
                if (!par.contains("sci"))
                    continue;
                for (const auto& l : par["sci"]) {
                    if (!l.contains("sci_mean"))
                        continue;
                    auto& cell = cells[{name, c.at("site").get<std::string>(), snr, l.at("level").get<double>()}];
                    cell.sci.push_back(l["sci_mean"].get<double>());
                    if (par.contains("calibration"))
                        cell.calibration.push_back(par["calibration"].get<double>());
                    if (par.contains("mae"))
                        cell.mae.push_back(par["mae"].get<double>());
                }
            }
        }
    }

    const auto dir = output_dir(g, "report");
    prepare_dir(dir, g.force);
    write_json(dir / "config.json",
               {{"command", "report"}, {"dirs", a.dirs}, {"seed", g.seed}, {"version", code_version()}});
    auto csv = open_csv(dir / "summary.csv");
    csv << "parameter,site,snr_db,level,n,sci_mean,sci_std,calibration_mean,mae_mean\n";
    std::ofstream md(dir / "report.md");
    md.precision(4);
    md << "# Uncertainty summary\n\n" << n_checkpoints << " checkpoint(s) from " << a.dirs.size() - missing.size()
       << " report(s). Standard deviations are sample deviations over checkpoints.\n";
    auto opt_mean = [](const Vec& v) -> std::string {
        if (v.empty())
            return "";
        std::ostringstream s;
        s.precision(10);
        s << mean_and_std(v).first;
        return s.str();
    };
    for (const auto& name : order) {
        md << "\n## " << name << "\n\n| site | SNR (dB) | level | n | SCI mean | SCI std | calibration | MAE |\n"
           << "|---|---|---|---|---|---|---|---|\n";
        for (const auto& [key, cell] : cells) {
            const auto& [pname, site, snr, level] = key;
            if (pname != name)
                continue;
            const auto [m, s] = mean_and_std(cell.sci);
            csv << name << ',' << site << ',' << snr_text(snr) << ',' << level << ',' << cell.sci.size() << ','
                << m << ',' << s << ',' << opt_mean(cell.calibration) << ',' << opt_mean(cell.mae) << '\n';
            md << "| " << site << " | " << snr_text(snr) << " | " << level << " | " << cell.sci.size() << " | " << m
               << " | " << s << " | " << opt_mean(cell.calibration) << " | " << opt_mean(cell.mae) << " |\n";
        }
    }
    if (!missing.empty()) {
        md << "\n## Missing reports\n\n";
        for (const auto& d : missing) {
            md << "- " << d << '\n';
            err << "missing report: " << (fs::path(d) / "report.json").string() << '\n';
        }
    }
    out << "report for " << n_checkpoints << " checkpoint(s) -> " << dir.string() << '\n';
    return missing.empty() ? 0 : 2;
}

// stream redirection for CLI11 help and parse errors
int cli_exit(CLI::App& app, const CLI::Error& e, std::ostream& out, std::ostream& err)
{
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Hemodynamic simulation-based inference pipeline"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Base random seed")->capture_default_str();
    app.add_option("--workers", g.workers, "Worker threads (0: all cores)");
    app.add_flag("--force", g.force, "Replace existing outputs and accept hash mismatches");
    app.add_option("-o,--out", g.out,
                   std::string("Output directory (default: a folder under $") + output_root_env + ")");

    SimulateArgs sa;
    auto* sim = app.add_subcommand("simulate", "Simulate one network to a periodic state");
    sim->add_option("--config", sa.config, "JSON settings file");
    sim->add_option("--network", sa.network, "Network definition (JSON)");
    sim->add_option("--params", sa.params, "Parameter vector (JSON object of params.csv columns)");
    sim->add_flag("--prior-draw", sa.prior_draw, "Draw the parameters from the prior with --seed");
    sim->add_option("--prior", sa.prior, "Prior specification (JSON)");
    sim->add_flag("!--no-csv", sa.csv, "Skip CSV copies of the waveforms");

    DatasetArgs da;
    auto* dsc = app.add_subcommand("dataset", "Generate a simulated population");
    dsc->add_option("--config", da.config, "JSON settings file");
    dsc->add_option("--network", da.network, "Network template (JSON)");
    dsc->add_option("--prior", da.prior, "Prior specification (JSON)");
    dsc->add_option("-n,--n", da.n, "Number of subjects");

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "Train a posterior estimator");
    trn->add_option("--config", ta.config, "JSON settings file (keys: data, train)");
    trn->add_option("--dataset", ta.dataset, "Dataset directory");
    trn->add_option("--toy", ta.toy, "Toy problem: linear-gaussian, age-informative, quadratic");
    trn->add_option("--n", ta.n, "Toy problem size");
    trn->add_option("--data-seed", ta.data_seed, "Toy data seed (default: --seed)");
    trn->add_option("--snr", ta.snr, "Noise level in dB or 'clean'");
    trn->add_option("--site", ta.site, "Measurement site");
    trn->add_option("--epochs", ta.epochs, "Training epochs");
    trn->add_option("--batch-size", ta.batch_size, "Batch size");
    trn->add_option("--lr", ta.learning_rate, "Learning rate");
    trn->add_option("--width", ta.width, "Network width factor");

    AnalyzeArgs aa;
    auto* ana = app.add_subcommand("analyze", "Uncertainty analysis of trained runs");
    ana->add_option("runs", aa.runs, "Run directories");
    ana->add_option("--config", aa.config, "JSON settings file");
    ana->add_option("--metrics", aa.metrics, "Comma list of calibration,sci,mi,point,dip,laplace");
    ana->add_option("--snr", aa.snr, "Evaluate at these SNRs instead of the training SNR")->delimiter(',');
    ana->add_option("--dataset", aa.dataset, "Test dataset directory (default: the training dataset)");
    ana->add_option("--levels", aa.levels, "Credible levels")->delimiter(',');
    ana->add_option("--n-samples", aa.n_samples, "Posterior draws per observation");
    ana->add_option("--laplace-count", aa.laplace_count, "Observations compared with the Laplace baseline");

    ReportArgs ra;
    auto* rep = app.add_subcommand("report", "Consolidate analysis reports");
    rep->add_option("dirs", ra.dirs, "Analysis directories");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return cli_exit(app, e, out, err);
    }
    set_worker_count(g.workers);

    try {
        if (*sim)
            return cmd_simulate(g, sa, out, err);
        if (*dsc)
            return cmd_dataset(g, da, out, err);
        if (*trn)
            return cmd_train(g, ta, out, err);
        if (*ana)
            return cmd_analyze(g, aa, out, err);
        return cmd_report(g, ra, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << "run with --help for usage\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

int run_cli(int argc, const char* const* argv)
{
    return run_cli(argc, argv, std::cout, std::cerr);
}

} // namespace hemosbi
