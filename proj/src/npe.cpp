#include "hemosbi/npe.hpp"

#include "hemosbi/signal.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

namespace hemosbi {

using nlohmann::json;

void NpeProblem::validate() const
{
    if (parameter_names.empty())
        throw ConfigError("problem '" + name + "' has no parameters");
    if (bounds.size() != parameter_names.size())
        throw ConfigError("problem '" + name + "': one bound per parameter expected");
    if (input_length < 1)
        throw ConfigError("problem '" + name + "': input length must be positive");
    if (!observe)
        throw ConfigError("problem '" + name + "' has no observation model");
    for (Split s : {Split::train, Split::validation, Split::test}) {
        if (split(s).empty())
            throw ConfigError("problem '" + name + "': split " + to_string(s) + " is empty");
        for (const auto& item : split(s))
            if (static_cast<int>(item.phi.size()) != dim())
                throw ConfigError("problem '" + name + "': item " + item.id + " has the wrong dimension");
    }
}

std::uint64_t observation_seed(std::uint64_t seed, Split split, std::size_t index, std::size_t epoch)
{
    switch (split) {
    case Split::train:
        return derive_seed(seed, {stream::train, epoch, index});
    case Split::validation:
        return derive_seed(seed, {stream::validation, index});
    case Split::test:
        break;
    }
    return derive_seed(seed, {stream::test, index});
}

namespace {

std::pair<double, double> support_over_ages(const Marginal& m, const Marginal& age)
{
    const auto [alo, ahi] = age.support(50.0);
    std::vector<double> ages = {alo, ahi};
    for (const auto& k : m.age_shift)
        if (k.age > alo && k.age < ahi)
            ages.push_back(k.age);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double a : ages) {
        const auto [l, h] = m.support(a);
        lo = std::min(lo, l);
        hi = std::max(hi, h);
    }
    return {lo, hi};
}

NpeProblem split_toy(std::string name, std::size_t n, std::uint64_t seed,
                     const std::function<NpeProblem::Item(Rng&)>& draw)
{
    if (n < 10)
        throw ConfigError("n too small for a train/val/test split (need at least 10)");
    NpeProblem p;
    p.name = std::move(name);
    p.raw_conditioning = true;
    const auto splits = assign_splits(n, seed);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = make_rng(seed, {stream::toy, i});
        auto item = draw(rng);
        item.id = "t" + std::to_string(i);
        p.items[static_cast<int>(splits[i])].push_back(std::move(item));
    }
    return p;
}

double toy_noise_sd(double signal_sd, std::optional<double> snr_db, double fallback)
{
    return snr_db ? signal_sd * std::pow(10.0, -*snr_db / 20.0) : fallback;
}

} // namespace

std::vector<std::pair<double, double>> interest_bounds(const SimulationDataset& ds)
{
    const PriorSpec prior = ds.prior.is_null() ? PriorSpec{} : PriorSpec::from_json(ds.prior);
    std::vector<std::pair<double, double>> b(5);
    b[0] = support_over_ages(prior.heart_rate, prior.age);
    b[1] = {prior.lvet.low, prior.lvet.high};
    for (int d = 2; d < 5; ++d) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& r : ds.records) {
            const double v = r.params.interest()[d];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (ds.records.empty())
            throw ConfigError("dataset is empty");
        const double pad = 0.05 * std::max(hi - lo, 1e-12 * std::abs(hi));
        b[d] = {lo - pad, hi + pad};
    }
    return b;
}

NpeProblem simulation_problem(const SimulationDataset& ds, const std::string& site, std::optional<double> snr_db)
{
    NpeProblem p;
    p.name = ds.network + ":" + site + ":" + snr_label(snr_db);
    p.parameter_names = ParameterVector::interest_names();
    p.bounds = interest_bounds(ds);
    p.input_length = static_cast<int>(observation_length);
    auto beats = std::make_shared<std::array<std::vector<WaveformRecord>, 3>>();
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        const auto it = r.waveforms.find(site);
        if (it == r.waveforms.end())
            throw ConfigError("dataset has no waveform for site '" + site + "' (subject " + r.params.id + ")");
        const int s = static_cast<int>(ds.splits.at(i));
        p.items[s].push_back({r.params.id, r.params.interest(), r.params.age});
        (*beats)[s].push_back(it->second);
    }
    p.observe = [beats, snr_db](Split s, std::size_t i, std::uint64_t seed) {
        return make_observation((*beats)[static_cast<int>(s)].at(i), 0.0, snr_db, seed).samples;
    };
    return p;
}

std::pair<double, double> linear_gaussian_posterior(double x, double noise_sd)
{
    const double s2 = noise_sd * noise_sd;
    return {x / (1.0 + s2), std::sqrt(s2 / (1.0 + s2))};
}

NpeProblem linear_gaussian_toy(std::size_t n, std::uint64_t seed, double noise_sd)
{
    auto p = split_toy("linear-gaussian", n, seed, [](Rng& rng) {
        std::normal_distribution<double> normal;
        return NpeProblem::Item{"", {normal(rng)}, 0.0};
    });
    p.parameter_names = {"phi"};
    p.bounds = {{-5.0, 5.0}};
    p.input_length = 1;
    auto items = std::make_shared<std::array<std::vector<NpeProblem::Item>, 3>>(p.items);
    p.observe = [items, noise_sd](Split s, std::size_t i, std::uint64_t seed) {
        auto rng = make_rng(seed);
        std::normal_distribution<double> noise(0.0, noise_sd);
        return Vec{(*items)[static_cast<int>(s)].at(i).phi[0] + noise(rng)};
    };
    return p;
}

NpeProblem age_informative_toy(std::size_t n, std::uint64_t seed, double noise_sd)
{
    auto p = split_toy("age-informative", n, seed, [](Rng& rng) {
        std::normal_distribution<double> normal;
        std::uniform_real_distribution<double> age(25.0, 75.0);
        const double phi = normal(rng);
        return NpeProblem::Item{"", {phi}, age(rng)};
    });
    p.parameter_names = {"phi"};
    p.bounds = {{-5.0, 5.0}};
    p.input_length = 1;
    auto items = std::make_shared<std::array<std::vector<NpeProblem::Item>, 3>>(p.items);
    p.observe = [items, noise_sd](Split s, std::size_t i, std::uint64_t seed) {
        auto rng = make_rng(seed);
        std::normal_distribution<double> noise(0.0, noise_sd);
        const auto& item = (*items)[static_cast<int>(s)].at(i);
        return Vec{item.phi[0] + (item.age - 50.0) / 25.0 + noise(rng)};
    };
    return p;
}

NpeProblem quadratic_toy(std::size_t n, std::uint64_t seed, double noise_sd)
{
    auto p = split_toy("quadratic", n, seed, [](Rng& rng) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        return NpeProblem::Item{"", {u(rng)}, 0.0};
    });
    p.parameter_names = {"phi"};
    p.bounds = {{-1.0, 1.0}};
    p.input_length = 1;
    auto items = std::make_shared<std::array<std::vector<NpeProblem::Item>, 3>>(p.items);
    p.observe = [items, noise_sd](Split s, std::size_t i, std::uint64_t seed) {
        auto rng = make_rng(seed);
        std::normal_distribution<double> noise(0.0, noise_sd);
        const double phi = (*items)[static_cast<int>(s)].at(i).phi[0];
        return Vec{phi * phi + noise(rng)};
    };
    return p;
}

NpeProblem toy_problem(const std::string& name, std::size_t n, std::uint64_t seed, std::optional<double> snr_db)
{
    if (name == "linear-gaussian")
        return linear_gaussian_toy(n, seed, toy_noise_sd(1.0, snr_db, 0.5));
    if (name == "age-informative")
        return age_informative_toy(n, seed, toy_noise_sd(1.0, snr_db, 0.3));
    if (name == "quadratic")
        return quadratic_toy(n, seed, toy_noise_sd(std::sqrt(4.0 / 45.0), snr_db, 0.05));
    throw ConfigError("unknown toy '" + name + "' (expected linear-gaussian, age-informative or quadratic)");
}

void TrainConfig::validate() const
{
    if (batch_size < 1)
        throw ConfigError("batch_size must be at least 1");
    if (!(learning_rate > 0.0))
        throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0)
        throw ConfigError("weight_decay must be non-negative");
    if (epochs < 0)
        throw ConfigError("epochs must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_epsilon > 0.0))
        throw ConfigError("invalid Adam hyperparameters");
    if (!(clip_norm > 0.0))
        throw ConfigError("clip_norm must be positive");
    if (!(width > 0.0))
        throw ConfigError("width must be positive");
    if (toy_hidden_width < 1)
        throw ConfigError("toy_hidden_width must be positive");
}

json TrainConfig::to_json() const
{
    return {{"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_epsilon", adam_epsilon},
            {"clip_norm", clip_norm},
            {"seed", seed},
            {"snr_db", snr_db ? json(*snr_db) : json(nullptr)},
            {"site", site},
            {"width", width},
            {"toy_hidden_width", toy_hidden_width},
            {"redraw", redraw}};
}

TrainConfig TrainConfig::from_json(const json& j)
{
    TrainConfig c;
    static const std::set<std::string> known = {"batch_size", "learning_rate", "weight_decay", "epochs",
                                                "beta1", "beta2", "adam_epsilon", "clip_norm",
                                                "seed", "snr_db", "site", "width",
                                                "toy_hidden_width", "redraw"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key))
            throw ConfigError("unknown training option '" + key + "'");
    try {
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.epochs = j.value("epochs", c.epochs);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.seed = j.value("seed", c.seed);
        if (j.contains("snr_db"))
            c.snr_db = j.at("snr_db").is_null() ? std::nullopt : std::optional<double>(j.at("snr_db").get<double>());
        c.site = j.value("site", c.site);
        c.width = j.value("width", c.width);
        c.toy_hidden_width = j.value("toy_hidden_width", c.toy_hidden_width);
        c.redraw = j.value("redraw", c.redraw);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid training config: ") + e.what());
    }
    c.validate();
    return c;
}

double TrainingHistory::best_validation_loss() const
{
    if (best_epoch < 0)
        throw DomainError("history has no epochs");
    return validation_loss.at(static_cast<std::size_t>(best_epoch));
}

void TrainingHistory::write_csv(const std::filesystem::path& path) const
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "epoch,train_loss,validation_loss,wall_time_s,best\n";
    for (std::size_t e = 0; e < size(); ++e)
        out << e + 1 << ',' << train_loss[e] << ',' << validation_loss[e] << ',' << wall_time[e] << ','
            << (static_cast<int>(e) == best_epoch ? 1 : 0) << '\n';
    if (!out)
        throw IoError("failed writing " + path.string());
}

std::size_t select_best(const TrainingHistory& history)
{
    if (history.validation_loss.empty())
        throw DomainError("select_best needs at least one epoch");
    std::size_t best = 0;
    for (std::size_t e = 1; e < history.validation_loss.size(); ++e)
        if (history.validation_loss[e] < history.validation_loss[best])
            best = e;
    return best;
}

FlowConfig flow_config_for(const NpeProblem& problem, const TrainConfig& cfg)
{
    const std::uint64_t init_seed = derive_seed(cfg.seed, {stream::init});
    if (problem.raw_conditioning)
        return FlowConfig::toy(problem.dim(), problem.input_length, cfg.toy_hidden_width, init_seed);
    auto fc = FlowConfig::standard(problem.dim(), cfg.width, init_seed);
    fc.encoder.input_length = problem.input_length;
    return fc;
}

namespace {

std::vector<Vec> observe_split(const NpeProblem& problem, Split split, std::uint64_t seed, std::size_t epoch,
                               std::span<const std::size_t> indices, Execution exec)
{
    std::vector<Vec> out(indices.size());
    for_each_index(indices.size(), exec, [&](std::size_t k) {
        out[k] = problem.observe(split, indices[k], observation_seed(seed, split, indices[k], epoch));
        if (static_cast<int>(out[k].size()) != problem.input_length)
            throw ShapeError("observation of " + problem.split(split)[indices[k]].id + " has length " +
                             std::to_string(out[k].size()));
    });
    return out;
}

std::vector<std::size_t> iota(std::size_t n)
{
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

TrainingExample make_example(const NpeProblem::Item& item, const Vec& raw)
{
    return {item.phi, raw, item.age};
}

void fit_statistics(ConditionalFlow& model, const NpeProblem& problem, const std::vector<Vec>& train_obs)
{
    const auto& items = problem.split(Split::train);
    if (problem.raw_conditioning) {
        // A one-dimensional observation needs a single pooled scale only.
        try {
            model.obs_stats = normalize_fit(train_obs);
        } catch (const SignalError&) {
            model.obs_stats = {0.0, 1.0};
        }
    } else {
        model.obs_stats = normalize_fit(train_obs);
    }
    Vec ages;
    for (const auto& it : items)
        ages.push_back(it.age);
    const auto [am, as] = mean_and_std(ages);
    model.age_stats = {am, as > 0.0 ? as : 1.0};

    const int k = problem.dim();
    model.param_mean.assign(k, 0.0);
    model.param_std.assign(k, 1.0);
    for (int d = 0; d < k; ++d) {
        Vec v;
        for (const auto& it : items)
            v.push_back(it.phi[d]);
        const auto [m, s] = mean_and_std(v);
        model.param_mean[d] = m;
        model.param_std[d] = s > 0.0 ? s : 1.0;
    }
}

} // namespace

std::vector<TrainingExample> evaluation_examples(const NpeProblem& problem, std::uint64_t seed,
                                                 Split split)
{
    const auto& items = problem.split(split);
    const auto idx = iota(items.size());
    const auto raw = observe_split(problem, split, seed, 0, idx, Execution::parallel);
    std::vector<TrainingExample> out;
    out.reserve(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
        out.push_back(make_example(items[i], raw[i]));
    return out;
}

TrainResult train(const NpeProblem& problem, const TrainConfig& cfg, Execution exec)
{
    problem.validate();
    cfg.validate();
    using clock = std::chrono::steady_clock;

    ConditionalFlow model(flow_config_for(problem, cfg));
    const auto& train_items = problem.split(Split::train);
    const auto all_train = iota(train_items.size());
    const auto first_obs = observe_split(problem, Split::train, cfg.seed, 0, all_train, exec);
    fit_statistics(model, problem, first_obs);

    const auto validation = evaluation_examples(problem, cfg.seed, Split::validation);
    std::vector<TrainingExample> frozen_train;
    if (!cfg.redraw)
        for (std::size_t i = 0; i < train_items.size(); ++i)
            frozen_train.push_back(make_example(train_items[i], first_obs[i]));

    TrainingHistory history;
    auto& params = model.parameters().values();
    const auto& mask = model.trainable();
    Vec best = params;
    Vec m1(params.size(), 0.0), m2(params.size(), 0.0);
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = clock::now();
        auto order = all_train;
        auto rng = make_rng(cfg.seed, {stream::batch, static_cast<std::uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_loss = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const std::size_t> idx(order.data() + b0, b1 - b0);
            std::vector<TrainingExample> batch;
            batch.reserve(idx.size());
            if (cfg.redraw) {
                const auto raw = observe_split(problem, Split::train, cfg.seed, epoch, idx, exec);
                for (std::size_t k = 0; k < idx.size(); ++k)
                    batch.push_back(make_example(train_items[idx[k]], raw[k]));
            } else {
                for (auto i : idx)
                    batch.push_back(frozen_train[i]);
            }

            LossGradient lg;
            try {
                lg = loss_and_gradients(model, batch, exec);
            } catch (const NumericError& e) {
                throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what(),
                                       history);
            }
            if (!std::isfinite(lg.loss) || !lg.gradient.finite())
                throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch + 1), history);
            epoch_loss += lg.loss * static_cast<double>(idx.size());

            auto& g = lg.gradient.values;
            const double norm = lg.gradient.norm();
            const double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t p = 0; p < params.size(); ++p) {
                if (!mask[p])
                    continue;
                const double gp = g[p] * scale + cfg.weight_decay * params[p];
                m1[p] = cfg.beta1 * m1[p] + (1.0 - cfg.beta1) * gp;
                m2[p] = cfg.beta2 * m2[p] + (1.0 - cfg.beta2) * gp * gp;
                params[p] -= cfg.learning_rate * (m1[p] / c1) / (std::sqrt(m2[p] / c2) + cfg.adam_epsilon);
            }
        }

        double val = 0.0;
        try {
            val = loss_and_gradients(model, validation, exec).loss;
        } catch (const NumericError&) {
            val = std::numeric_limits<double>::quiet_NaN();
        }
        history.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
        history.validation_loss.push_back(val);
        history.wall_time.push_back(std::chrono::duration<double>(clock::now() - started).count());
        if (!std::isfinite(val))
            throw TrainingDiverged("validation loss is not finite in epoch " + std::to_string(epoch + 1), history);
        if (history.best_epoch < 0 || val < history.validation_loss[history.best_epoch]) {
            history.best_epoch = epoch;
            best = params;
        }
    }
    params = best;
    return {std::move(model), std::move(history)};
}

std::pair<double, double> mean_and_std(std::span<const double> values)
{
    if (values.empty())
        return {std::numeric_limits<double>::quiet_NaN(), 0.0};
    const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() < 2)
        return {m, 0.0};
    double ss = 0.0;
    for (double v : values)
        ss += (v - m) * (v - m);
    return {m, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

std::string snr_label(std::optional<double> snr_db)
{
    if (!snr_db)
        return "clean";
    std::ostringstream s;
    s << *snr_db << "dB";
    return s.str();
}

GridResult run_experiment_grid(const ProblemFactory& make_problem, const GridConfig& grid, Execution exec)
{
    if (grid.sites.empty() || grid.snr_levels.empty() || grid.repeats < 1)
        throw ConfigError("experiment grid needs at least one site, one SNR level and one repeat");
    grid.train.validate();

    GridResult out;
    for (const auto& site : grid.sites)
        for (const auto& snr : grid.snr_levels)
            for (int r = 0; r < grid.repeats; ++r) {
                GridCell cell;
                cell.site = site;
                cell.snr_db = snr;
                cell.repeat = r;
                cell.config = grid.train;
                cell.config.site = site;
                cell.config.snr_db = snr;
                cell.config.seed = grid.train.seed + (grid.vary_seed ? static_cast<std::uint64_t>(r) : 0);
                cell.id = site + "_" + snr_label(snr) + "_r" + std::to_string(r);
                out.cells.push_back(std::move(cell));
            }

    // Problems are shared by the repeats of a (site, snr) pair.
    std::map<std::pair<std::string, std::string>, std::shared_ptr<NpeProblem>> problems;
    std::map<std::pair<std::string, std::string>, std::string> problem_errors;
    for (const auto& site : grid.sites)
        for (const auto& snr : grid.snr_levels) {
            const auto key = std::make_pair(site, snr_label(snr));
            try {
                problems[key] = std::make_shared<NpeProblem>(make_problem(site, snr));
            } catch (const Error& e) {
                problem_errors[key] = e.what();
            }
        }

    const bool outer = exec == Execution::parallel && out.cells.size() > 1;
    for_each_index(out.cells.size(), outer ? Execution::parallel : Execution::serial, [&](std::size_t c) {
        auto& cell = out.cells[c];
        const auto key = std::make_pair(cell.site, snr_label(cell.snr_db));
        if (problem_errors.count(key)) {
            cell.error = problem_errors.at(key);
            return;
        }
        try {
            cell.result = train(*problems.at(key), cell.config, outer ? Execution::serial : exec);
        } catch (const Error& e) {
            cell.error = e.what();
        }
    });

    for (const auto& site : grid.sites)
        for (const auto& snr : grid.snr_levels) {
            GridSummaryRow row;
            row.site = site;
            row.snr_db = snr;
            Vec best;
            for (const auto& cell : out.cells)
                if (cell.site == site && snr_label(cell.snr_db) == snr_label(snr) && cell.result &&
                    cell.result->history.best_epoch >= 0)
                    best.push_back(cell.result->history.best_validation_loss());
            row.completed = static_cast<int>(best.size());
            if (!best.empty())
                std::tie(row.best_validation_mean, row.best_validation_std) = mean_and_std(best);
            out.summary.push_back(row);
        }
    return out;
}

GridResult run_experiment_grid(const SimulationDataset& ds, const GridConfig& grid, Execution exec)
{
    return run_experiment_grid(
        [&ds](const std::string& site, std::optional<double> snr) { return simulation_problem(ds, site, snr); },
        grid, exec);
}

} // namespace hemosbi
