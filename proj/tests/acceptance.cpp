// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include "hemosbi/npe.hpp"
#include "hemosbi/uncertainty.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

using namespace hemosbi;
using namespace hemosbi::testing;
using Eigen::MatrixXd;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

// 1 ---------------------------------------------------------------------------

Outcome wave_speed_criterion()
{
    Outcome o;
    const auto t0 = Clock::now();
    const auto sp = measure_pulse_speeds();
    const double t = seconds_since(t0);
    const double er = std::abs(sp.right / sp.c0 - 1.0), el = std::abs(sp.left / sp.c0 - 1.0);
    o.detail << "c0 " << sp.c0 << " m/s, measured " << sp.right << " / " << sp.left << " m/s (errors " << 100 * er
             << "% / " << 100 * el << "%), " << t << " s";
    o.require(er < 0.03 && el < 0.03, "speed within 3%");
    o.require(t < 60.0, "runtime < 60 s");
    return o;
}

// 2 ---------------------------------------------------------------------------

Outcome mass_criterion()
{
    Outcome o;
    const auto net = bundled("bifurcation_3seg");
    const auto res = simulate(net);
    const double drift = std::abs(res.diagnostics.cycle_volume_drift) / net.heart.stroke_volume;

    Solver solver(net);
    auto s = solver.initial_state();
    double worst = 0.0;
    for (int k = 0; k < 2000; ++k) {
        StepFluxes fl;
        const double v0 = solver.volume(s);
        auto next = solver.advance(s, solver.stable_timestep(s), &fl);
        worst = std::max(worst, std::abs(solver.volume(next) - v0 - (fl.inflow - fl.outflow)) / v0);
        s = std::move(next);
    }
    o.detail << "cycle drift " << 100 * drift << "% of SV, worst per-step imbalance " << worst << " (relative)";
    o.require(drift < 1e-3, "drift < 0.1% of SV");
    o.require(worst < 1e-10, "per-step conservation 1e-10");
    return o;
}

// 3 ---------------------------------------------------------------------------

Outcome periodic_criterion()
{
    Outcome o;
    for (const char* name : {"tube_1seg", "bifurcation_3seg", "arm_7seg"}) {
        const auto d = simulate(bundled(name)).diagnostics;
        o.detail << name << " " << d.cycles << " cycles (residual " << d.residual << ") ";
        o.require(d.converged && d.cycles <= 10 && d.residual < 1e-3, std::string(name) + " converged in 10 cycles");
    }
    return o;
}

// 4 ---------------------------------------------------------------------------

Outcome grid_criterion()
{
    Outcome o;
    // At 1 cm every segment of the bundled networks doubles its cell count.
    for (const char* name : {"tube_1seg", "bifurcation_3seg", "arm_7seg"}) {
        const auto g = grid_convergence(bundled(name), 0.01, 8);
        o.detail << name << " error " << g.coarse_error << " -> " << g.fine_error << " (factor " << g.factor() << ") ";
        o.require(g.factor() >= 3.0, std::string(name) + " factor >= 3");
    }
    return o;
}

// 5 ---------------------------------------------------------------------------

void randomize(ConditionalFlow& m, double scale, std::uint64_t seed)
{
    auto rng = make_rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    auto& v = m.parameters().values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (m.trainable()[i])
            v[i] = n(rng);
}

Vec normal_vec(std::size_t n, Rng& rng, double scale = 1.0)
{
    std::normal_distribution<double> d(0.0, scale);
    Vec v(n);
    for (auto& x : v)
        x = d(rng);
    return v;
}

Outcome flow_criterion()
{
    Outcome o;
    const auto t0 = Clock::now();
    auto cfg = FlowConfig::standard(3, 0.2, 5);
    cfg.hidden_width = 8;
    ConditionalFlow m(cfg);
    randomize(m, 0.3, 42);
    auto rng = make_rng(7);
    const auto h = m.encode(normal_vec(1000, rng), 45.0);
    double roundtrip = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const auto u = normal_vec(3, rng, 2.0);
        const auto back = m.inverse(m.forward(u, h).z, h);
        for (int i = 0; i < 3; ++i)
            roundtrip = std::max(roundtrip, std::abs(back[i] - u[i]));
    }
    double logdet = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto u = normal_vec(3, rng);
        Eigen::Matrix3d J;
        const double eps = 1e-6;
        for (int j = 0; j < 3; ++j) {
            auto up = u, dn = u;
            up[j] += eps;
            dn[j] -= eps;
            const auto zp = m.forward(up, h).z, zm = m.forward(dn, h).z;
            for (int i = 0; i < 3; ++i)
                J(i, j) = (zp[i] - zm[i]) / (2 * eps);
        }
        logdet = std::max(logdet, std::abs(std::log(std::abs(J.determinant())) - m.forward(u, h).logdet));
    }

    auto g8 = FlowConfig::standard(2, 0.2, 5);
    g8.hidden_width = 8;
    ConditionalFlow w(g8);
    randomize(w, 0.25, 21);
    w.param_mean = {1.0, -2.0};
    w.param_std = {0.5, 3.0};
    w.age_stats = {50.0, 15.0};
    std::vector<TrainingExample> batch;
    for (int i = 0; i < 3; ++i)
        batch.push_back({{1.0 + 0.5 * normal_vec(1, rng)[0], -2.0 + 3.0 * normal_vec(1, rng)[0]},
                         normal_vec(1000, rng), 30.0 + 10.0 * i});
    const auto g = loss_and_gradients(w, batch, Execution::serial);
    auto& v = w.parameters().values();
    const double eps = 1e-6;
    double worst = 0.0;
    std::size_t checked = 0, kinked = 0;
    for (std::size_t p = 0; p < v.size(); ++p) {
        if (!w.trainable()[p])
            continue;
        const double keep = v[p];
        v[p] = keep + eps;
        const double lp = loss_and_gradients(w, batch, Execution::serial).loss;
        v[p] = keep - eps;
        const double lm = loss_and_gradients(w, batch, Execution::serial).loss;
        v[p] = keep;
        const double right = (lp - g.loss) / eps, left = (g.loss - lm) / eps;
        if (std::abs(right - left) > 1e-3 * std::max(std::abs(right) + std::abs(left), 1e-3)) {
            ++kinked;
            continue;
        }
        const double fd = (lp - lm) / (2 * eps);
        const double a = g.gradient.values[p];
        worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4}));
        ++checked;
    }
    const double t = seconds_since(t0);
    o.detail << "roundtrip " << roundtrip << ", logdet error " << logdet << ", gradient worst relative error " << worst
             << " over " << checked << " weights (" << kinked << " at ReLU/max-pool kinks skipped), " << t << " s";
    o.require(roundtrip < 1e-9, "roundtrip < 1e-9");
    o.require(logdet < 1e-5, "logdet within 1e-5");
    o.require(worst < 1e-4, "gradient relative error < 1e-4");
    o.require(kinked * 20 < checked, "fewer than 5% of weights at kinks");
    o.require(t < 120.0, "runtime < 2 min");
    return o;
}

// 6 ---------------------------------------------------------------------------

Outcome recovery_criterion()
{
    Outcome o;
    const std::uint64_t seed = 3;
    const auto p = linear_gaussian_toy(5000, 1);
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.snr_db = std::nullopt;
    const auto t0 = Clock::now();
    const auto r = train(p, cfg);
    const double t = seconds_since(t0);
    double mean_err = 0.0, std_err = 0.0, worst_mean = 0.0, worst_std = 0.0;
    const std::size_t n = 100;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec x = p.observe(Split::test, i, observation_seed(seed, Split::test, i));
        auto rng = make_rng(seed, {stream::posterior, i});
        const auto s = r.model.sample(x, 0.0, 4000, rng);
        const double m = s.col(0).mean();
        const double sd = std::sqrt((s.col(0).array() - m).square().mean());
        const auto [em, es] = linear_gaussian_posterior(x[0]);
        mean_err += std::abs(m - em) / n;
        std_err += std::abs(sd / es - 1.0) / n;
        worst_mean = std::max(worst_mean, std::abs(m - em));
        worst_std = std::max(worst_std, std::abs(sd / es - 1.0));
    }
    o.detail << "over 100 test points: mean error " << mean_err << ", std error " << 100 * std_err
             << "% (worst point " << worst_mean << ", " << 100 * worst_std << "%), training " << t << " s";
    o.require(mean_err < 0.05, "average mean error < 0.05");
    o.require(std_err < 0.10, "average std error < 10%");
    o.require(t < 300.0, "training < 5 min");
    return o;
}

// 7 ---------------------------------------------------------------------------

FunctionPosterior conjugate_sampler(const Vec& x, double scale)
{
    return FunctionPosterior(x.size(), 1, [&x, scale](std::size_t i, std::size_t n, Rng& rng) {
        const auto [m, s] = linear_gaussian_posterior(x[i]);
        std::normal_distribution<double> d(m, s * scale);
        MatrixXd out(n, 1);
        for (std::size_t r = 0; r < n; ++r)
            out(r, 0) = d(rng);
        return out;
    });
}

Outcome calibration_criterion()
{
    Outcome o;
    auto rng = make_rng(2024, {stream::test});
    std::normal_distribution<double> normal;
    std::vector<Vec> truth;
    Vec x;
    for (int i = 0; i < 1000; ++i) {
        truth.push_back({normal(rng)});
        x.push_back(truth.back()[0] + 0.5 * normal(rng));
    }
    const double exact = calibration_score(credibility_levels(conjugate_sampler(x, 1.0), truth, 1000, 11)[0]);
    const double half = calibration_score(credibility_levels(conjugate_sampler(x, 0.5), truth, 1000, 11)[0]);
    const Vec zeros(1000, 0.0);
    const double z100 = calibration_score(zeros, 100), z10k = calibration_score(zeros, 10000);
    o.detail << "exact C " << exact << ", half-std C " << half << ", all-zero C " << z100 << " (k = 100), " << z10k
             << " (k = 10000)";
    o.require(exact < 0.02, "exact C < 0.02");
    o.require(half > 0.1, "half-std C > 0.1");
    o.require(std::abs(z100 - 0.495) < 1e-12 && z10k > 0.4999, "all-zero C -> 0.5");
    return o;
}

// 8 ---------------------------------------------------------------------------

Outcome sci_criterion()
{
    Outcome o;
    std::vector<std::size_t> cells;
    const std::size_t n = 200;
    const FunctionPosterior normal_post(n, 1, [](std::size_t, std::size_t m, Rng& rng) {
        std::normal_distribution<double> d;
        MatrixXd out(m, 1);
        for (std::size_t r = 0; r < m; ++r)
            out(r, 0) = d(rng);
        return out;
    });
    const auto s68 = sci(normal_post, 0.68, {{-4.0, 4.0}}, 100, 10000, 8);
    Vec uniform;
    for (int i = 0; i < 100000; ++i)
        uniform.push_back(-4.0 + 8.0 * (i + 0.5) / 100000.0);
    const auto u95 = credible_cells(uniform, -4.0, 4.0, 100, 0.95);
    o.detail << "N(0,1) SCI@0.68 " << s68.mean_size[0] << ", uniform cells@0.95 " << u95;
    o.require(std::abs(s68.mean_size[0] - 2.0) <= 0.15, "SCI = 2.00 +- 0.15");
    o.require(u95 == 95, "exactly 95 cells");
    return o;
}

// 9 ---------------------------------------------------------------------------

Outcome mi_criterion()
{
    Outcome o;
    const double v = mi_bound(10, 0.9, 100);
    // -a log2(a / S) - (1 - a) log2((1 - a) / (N - S)), evaluated independently.
    const double ref = 4.107916188620875;
    o.detail << "mi_bound(10, 0.9, 100) = " << v << " bits (reference " << ref << ")";
    o.require(std::abs(v - ref) < 1e-9, "within 1e-9");
    return o;
}

// 10 --------------------------------------------------------------------------

Outcome fig2_criterion()
{
    Outcome o;
    const auto t0 = Clock::now();
    const auto net = bundled("arm_7seg");
    const auto ds = generate_dataset(PriorSpec{}, net, 400, 2024);
    const double t_data = seconds_since(t0);
    const auto bounds = interest_bounds(ds);

    GridConfig grid;
    grid.sites = {"radial_ppg"};
    grid.snr_levels = {0.0, 5.0, 10.0, 15.0, 20.0};
    grid.repeats = 3;
    grid.train.seed = 100;
    grid.train.epochs = 500;
    const auto result = run_experiment_grid(ds, grid);

    std::map<double, Vec> hr_sci;
    for (const auto& cell : result.cells) {
        if (!cell.result) {
            o.require(false, "cell " + cell.id + " failed: " + cell.error);
            continue;
        }
        const auto problem = simulation_problem(ds, cell.site, cell.snr_db);
        const auto set = make_evaluation_set(problem, cell.config.seed);
        const FlowPosterior post(cell.result->model, set.observations, set.ages);
        const auto s = sci(post, 0.95, bounds, 100, 1000, cell.config.seed);
        hr_sci[*cell.snr_db].push_back(s.mean_size[0]);
    }
    const double t = seconds_since(t0);
    const double range = bounds[0].second - bounds[0].first;
    o.detail << "HR SCI@0.95 (bpm, mean +- std over repeats):";
    std::vector<std::pair<double, double>> curve;
    for (const auto& [snr, v] : hr_sci) {
        const auto [m, s] = mean_and_std(v);
        curve.emplace_back(m, s);
        o.detail << " " << snr << " dB " << m << " +- " << s << ";";
    }
    int inversions = 0;
    bool within_std = true;
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (curve[i].first > curve[i - 1].first) {
            ++inversions;
            within_std &= curve[i].first - curve[i - 1].first <= std::max(curve[i].second, curve[i - 1].second);
        }
    o.detail << " prior HR range " << range << " bpm; dataset " << t_data << " s, total " << t << " s";
    o.require(curve.size() == 5, "all SNR levels trained");
    o.require(inversions <= 1 && within_std, "non-increasing in SNR (at most one inversion within repeat std)");
    o.require(!curve.empty() && curve.back().first < 0.2 * range, "20 dB SCI < 20% of the prior HR range");
    o.require(t < 7200.0, "runtime < 2 h");
    return o;
}

// 11 --------------------------------------------------------------------------

/// Location of the highest histogram bin of the draws on one side of zero.
std::optional<double> side_mode(const MatrixXd& draws, bool positive)
{
    const int bins = 50;
    std::vector<int> count(bins, 0);
    int total = 0;
    for (Eigen::Index r = 0; r < draws.rows(); ++r) {
        const double v = draws(r, 0);
        if ((v > 0.0) != positive || v == 0.0 || std::abs(v) > 1.0)
            continue;
        ++count[std::min(bins - 1, static_cast<int>(std::abs(v) * bins))];
        ++total;
    }
    if (total < draws.rows() / 20)
        return std::nullopt;
    const int b = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
    const double centre = (b + 0.5) / bins;
    return positive ? centre : -centre;
}

Outcome fig1_criterion()
{
    Outcome o;
    const std::uint64_t seed = 3;
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.snr_db = std::nullopt;
    const auto quad = quadratic_toy(5000, 1);
    const auto model = train(quad, cfg).model;
    const auto set = make_evaluation_set(quad, seed);
    const FlowPosterior post(model, set.observations, set.ages);
    const auto strat = population_stratify(post, {0}, set.bounds, 1000, 0.95, 5);

    std::size_t far = 0, far_flagged = 0;
    for (std::size_t i = 0; i < set.size(); ++i)
        if (std::abs(set.truth[i][0]) > 0.3) {
            ++far;
            far_flagged += strat.multimodal[i] ? 1 : 0;
        }

    const auto lin = linear_gaussian_toy(5000, 1);
    const auto lin_model = train(lin, cfg).model;
    const auto lin_set = make_evaluation_set(lin, seed);
    const FlowPosterior lin_post(lin_model, lin_set.observations, lin_set.ages);
    const auto control = population_stratify(lin_post, {0}, lin_set.bounds, 1000, 0.95, 6);
    const double fpr = static_cast<double>(control.multimodal_group.count) / lin_set.size();

    std::size_t bimodal = 0, laplace_between = 0;
    double worst_mode = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const double x = set.observations[i][0];
        if (!strat.multimodal[i] || x <= 0.09)
            continue;
        ++bimodal;
        auto rng = make_rng(seed, {stream::laplace, i});
        const auto lap = laplace_baseline(post, i, 1000, rng);
        laplace_between += std::abs(lap.mean[0]) < std::sqrt(x) ? 1 : 0;
        auto srng = make_rng(seed, {stream::posterior, i});
        const auto draws = post.sample(i, 4000, srng);
        const auto lo = side_mode(draws, false), hi = side_mode(draws, true);
        worst_mode = std::max(worst_mode, lo ? std::abs(*lo + std::sqrt(x)) : 1.0);
        worst_mode = std::max(worst_mode, hi ? std::abs(*hi - std::sqrt(x)) : 1.0);
    }
    o.detail << "NPE flags " << far_flagged << " of " << far << " observations with |phi| > 0.3; unimodal control flagged "
             << 100 * fpr << "%; bimodal group with sqrt(x) > 0.3: " << bimodal << ", Laplace mean between modes "
             << laplace_between << ", worst mode error " << worst_mode;
    o.require(far > 0 && far_flagged >= 0.9 * far, ">= 90% of |phi| > 0.3 flagged");
    o.require(fpr <= 0.10, "control false positives <= 10%");
    o.require(bimodal > 0 && laplace_between == bimodal, "Laplace mean between the modes");
    o.require(bimodal > 0 && worst_mode <= 0.1, "NPE modes within 0.1 of +-sqrt(x)");
    return o;
}

} // namespace

int main(int argc, char** argv)
{
    const std::vector<std::pair<std::string, Outcome (*)()>> criteria = {
        {"solver wave speed", wave_speed_criterion},
        {"mass conservation", mass_criterion},
        {"periodic convergence", periodic_criterion},
        {"grid convergence", grid_criterion},
        {"flow correctness", flow_criterion},
        {"NPE recovery (linear-Gaussian)", recovery_criterion},
        {"calibration metric", calibration_criterion},
        {"SCI oracle", sci_criterion},
        {"MI bound", mi_criterion},
        {"SNR sweep of HR uncertainty (7-segment)", fig2_criterion},
        {"multimodal sub-population (quadratic toy)", fig1_criterion},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i)
        selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!selected.empty() && !selected.count(id))
            continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "error: " << e.what();
        }
        failed += o.pass ? 0 : 1;
        std::printf("%s criterion %d (%s): %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(),
                    o.detail.str().c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
