#include <doctest.h>

#include "hemosbi/uncertainty.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace hemosbi;
using Eigen::MatrixXd;

namespace {

/// Linear-Gaussian toy draws: phi ~ N(0, 1), x = phi + N(0, 0.5^2).
struct ConjugateSet {
    std::vector<Vec> truth;
    Vec x;
};

ConjugateSet conjugate_set(std::size_t n, std::uint64_t seed)
{
    ConjugateSet s;
    auto rng = make_rng(seed);
    std::normal_distribution<double> normal;
    for (std::size_t i = 0; i < n; ++i) {
        const double phi = normal(rng);
        s.truth.push_back({phi});
        s.x.push_back(phi + 0.5 * normal(rng));
    }
    return s;
}

FunctionPosterior gaussian_posterior(const ConjugateSet& set, double std_scale = 1.0)
{
    return FunctionPosterior(
        set.x.size(), 1,
        [&set, std_scale](std::size_t i, std::size_t n, Rng& rng) {
            const auto [m, s] = linear_gaussian_posterior(set.x[i]);
            std::normal_distribution<double> d(m, s * std_scale);
            MatrixXd out(n, 1);
            for (std::size_t r = 0; r < n; ++r)
                out(r, 0) = d(rng);
            return out;
        },
        [&set, std_scale](std::size_t i, std::span<const double> phi) {
            const auto [m, s] = linear_gaussian_posterior(set.x[i]);
            const double sd = s * std_scale;
            return -0.5 * std::pow((phi[0] - m) / sd, 2) - std::log(sd * std::sqrt(2 * M_PI));
        });
}

FunctionPosterior fixed_sampler(std::size_t size, int dim, std::function<MatrixXd(std::size_t, std::size_t, Rng&)> f)
{
    return FunctionPosterior(size, dim, std::move(f));
}

MatrixXd normal_draws(std::size_t n, Rng& rng, double mean = 0.0, double sd = 1.0)
{
    std::normal_distribution<double> d(mean, sd);
    MatrixXd out(n, 1);
    for (std::size_t r = 0; r < n; ++r)
        out(r, 0) = d(rng);
    return out;
}

MatrixXd mixture_draws(std::size_t n, Rng& rng, double mode, double sd)
{
    std::normal_distribution<double> d(0.0, sd);
    std::bernoulli_distribution coin(0.5);
    MatrixXd out(n, 1);
    for (std::size_t r = 0; r < n; ++r)
        out(r, 0) = (coin(rng) ? mode : -mode) + d(rng);
    return out;
}

/// Exact posterior of the quadratic toy on [-1, 1] by inverse CDF on a grid.
MatrixXd quadratic_posterior_draws(double x, double noise_sd, std::size_t n, Rng& rng)
{
    const int m = 4001;
    Vec grid(m), cdf(m);
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
        grid[j] = -1.0 + 2.0 * j / (m - 1);
        total += std::exp(-0.5 * std::pow((x - grid[j] * grid[j]) / noise_sd, 2));
        cdf[j] = total;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    MatrixXd out(n, 1);
    for (std::size_t r = 0; r < n; ++r) {
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), u(rng));
        out(r, 0) = grid[std::min<std::size_t>(m - 1, it - cdf.begin())];
    }
    return out;
}

} // namespace

TEST_CASE("credibility levels")
{
    const std::vector<Vec> truth = {{-10.0}, {10.0}, {0.0}};
    const auto post = fixed_sampler(3, 1, [](std::size_t, std::size_t n, Rng& rng) { return normal_draws(n, rng); });
    const auto lv = credibility_levels(post, truth, 200, 1);
    CHECK(lv[0][0] == 0.0);
    CHECK(lv[0][1] == 1.0);
    CHECK(lv[0][2] > 0.3);
    CHECK(lv[0][2] < 0.7);
    CHECK_THROWS_AS(credibility_levels(post, truth, 99, 1), DomainError);
    CHECK(credibility_levels(post, truth, 200, 1, Execution::serial) == lv);
}

TEST_CASE("calibration score")
{
    Vec grid;
    for (int i = 1; i <= 1000; ++i)
        grid.push_back(i / 1000.0);
    CHECK(calibration_score(grid) < 0.01);
    CHECK(uniformity_ks(grid).second > 0.99);

    const Vec zeros(1000, 0.0);
    CHECK(calibration_score(zeros) == doctest::Approx(0.495));
    CHECK(calibration_score(zeros, 1000) == doctest::Approx(0.4995));
    CHECK(calibration_score(Vec(50, 1.0)) == doctest::Approx(0.505 - 0.01));
    CHECK_THROWS_AS(calibration_score(Vec{}), DomainError);
    CHECK_THROWS_AS(calibration_score(grid, 5), DomainError);

    const auto set = conjugate_set(1000, 2);
    const auto exact = gaussian_posterior(set);
    const auto levels = credibility_levels(exact, set.truth, 1000, 3);
    const double c = calibration_score(levels[0]);
    MESSAGE("exact sampler C = " << c);
    CHECK(c < 0.02);
    CHECK(uniformity_ks(levels[0]).second > 0.01);

    const auto narrow = gaussian_posterior(set, 0.5);
    const double cn = calibration_score(credibility_levels(narrow, set.truth, 1000, 3)[0]);
    MESSAGE("half-std sampler C = " << cn);
    // Expected value for k = 100: mean of |t - Phi(Phi^-1(t) / 2)| over the grid.
    CHECK(cn == doctest::Approx(0.10171).epsilon(0.1));
    CHECK(cn > 0.1);
}

TEST_CASE("credible cells and SCI")
{
    auto rng = make_rng(4);
    const MatrixXd draws = normal_draws(100000, rng);
    const Vec s(draws.data(), draws.data() + draws.size());
    const double width = credible_cells(s, -4.0, 4.0, 100, 0.68) * 0.08;
    CHECK(width == doctest::Approx(2.0).epsilon(0.075));

    Vec even;
    for (int j = 0; j < 1000; ++j)
        even.push_back(-4.0 + 8.0 * (j + 0.5) / 1000.0);
    CHECK(credible_cells(even, -4.0, 4.0, 100, 0.95) == 95);
    CHECK(credible_cells(Vec(500, 0.3), -4.0, 4.0, 100, 0.95) == 1);
    CHECK(credible_cells(even, -4.0, 4.0, 100, 1.0) == 100);

    std::size_t clipped = 0;
    CHECK(credible_cells(Vec{-9.0, 9.0, 0.0, 4.0}, -4.0, 4.0, 100, 1.0, &clipped) == 3);
    CHECK(clipped == 2);
    CHECK_THROWS_AS(credible_cells(even, -4.0, 4.0, 100, 0.0), DomainError);
    CHECK_THROWS_AS(credible_cells(Vec{std::nan("")}, -4.0, 4.0, 100, 0.5), NumericError);

    const auto uniform = fixed_sampler(5, 1, [&](std::size_t, std::size_t n, Rng&) {
        MatrixXd m(n, 1);
        for (std::size_t j = 0; j < n; ++j)
            m(j, 0) = -4.0 + 8.0 * (j + 0.5) / n;
        return m;
    });
    const auto r = sci(uniform, 0.95, {{-4.0, 4.0}}, 100, 1000);
    CHECK(r.mean_size[0] == doctest::Approx(0.95 * 8.0));
    CHECK(r.cells[0][3] == 95);
    CHECK_THROWS_AS(sci(uniform, 0.95, {{-4.0, 4.0}}, 5), DomainError);
    CHECK_THROWS_AS(sci(uniform, 0.95, {}, 100), ShapeError);

    // SCI grows with the level for every observation.
    const auto set = conjugate_set(50, 5);
    const auto post = gaussian_posterior(set);
    std::vector<std::size_t> previous(50, 0);
    for (double a : {0.1, 0.3, 0.5, 0.68, 0.8, 0.95, 0.99}) {
        const auto res = sci(post, a, {{-5.0, 5.0}}, 100, 1000, 7);
        for (std::size_t i = 0; i < 50; ++i) {
            CHECK(res.cells[0][i] >= previous[i]);
            CHECK(res.cells[0][i] <= 100);
            previous[i] = res.cells[0][i];
        }
    }
    CHECK(sci(post, 0.68, {{-5.0, 5.0}}, 100, 1000, 7, Execution::serial).cells ==
          sci(post, 0.68, {{-5.0, 5.0}}, 100, 1000, 7).cells);
}

TEST_CASE("MI bound")
{
    CHECK(mi_bound(10, 1.0, 100) == doctest::Approx(std::log2(10.0)).epsilon(1e-12));
    CHECK(std::abs(mi_bound(10, 0.9, 100) - 4.107916188620875) < 1e-9);
    CHECK(mi_bound(100, 0.9, 100) == doctest::Approx(-0.9 * std::log2(0.9 / 100)));
    CHECK(mi_bound(5, 0.0, 10) == doctest::Approx(std::log2(5.0)));
    CHECK_THROWS_AS(mi_bound(11, 0.9, 10), DomainError);
    CHECK_THROWS_AS(mi_bound(0, 0.9, 10), DomainError);
    CHECK_THROWS_AS(mi_bound(3, 1.5, 10), DomainError);
    for (double a : {0.5, 0.68, 0.9, 0.95})
        for (std::size_t s = 1; s < static_cast<std::size_t>(a * 100); ++s)
            CHECK(mi_bound(s + 1, a, 100) > mi_bound(s, a, 100));
}

TEST_CASE("Laplace baseline")
{
    SUBCASE("Gaussian posterior")
    {
        const auto set = conjugate_set(3, 6);
        const auto post = gaussian_posterior(set);
        auto rng = make_rng(8);
        const auto r = laplace_baseline(post, 1, 20000, rng);
        const auto [m, s] = linear_gaussian_posterior(set.x[1]);
        CHECK_FALSE(r.fallback);
        CHECK(r.mean[0] == doctest::Approx(m).epsilon(0.05));
        CHECK(r.covariance(0, 0) == doctest::Approx(s * s).epsilon(0.05));
        CHECK(r.sample_covariance(0, 0) == doctest::Approx(s * s).epsilon(0.05));
    }
    SUBCASE("correlated two-dimensional Gaussian")
    {
        Eigen::Matrix2d cov;
        cov << 1.0, 0.6, 0.6, 2.0;
        const Eigen::Matrix2d prec = cov.inverse();
        const Eigen::LLT<Eigen::Matrix2d> llt(cov);
        const Eigen::Matrix2d L = llt.matrixL();
        const FunctionPosterior post(
            1, 2,
            [&](std::size_t, std::size_t n, Rng& rng) {
                std::normal_distribution<double> d;
                MatrixXd out(n, 2);
                for (std::size_t r = 0; r < n; ++r) {
                    const Eigen::Vector2d z(d(rng), d(rng));
                    out.row(r) = (L * z).transpose();
                }
                return out;
            },
            [&](std::size_t, std::span<const double> phi) {
                const Eigen::Vector2d v(phi[0], phi[1]);
                return -0.5 * v.dot(prec * v);
            });
        auto rng = make_rng(9);
        const auto r = laplace_baseline(post, 0, 20000, rng);
        CHECK_FALSE(r.fallback);
        CHECK(std::abs(r.covariance(0, 1) - r.covariance(1, 0)) < 1e-8);
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                CHECK(r.covariance(a, b) == doctest::Approx(cov(a, b)).epsilon(0.05));
    }
    SUBCASE("bimodal posterior")
    {
        const double mode = 2.0, sd = 0.5;
        const FunctionPosterior post(
            1, 1, [&](std::size_t, std::size_t n, Rng& rng) { return mixture_draws(n, rng, mode, sd); },
            [&](std::size_t, std::span<const double> phi) {
                const double a = std::exp(-0.5 * std::pow((phi[0] - mode) / sd, 2));
                const double b = std::exp(-0.5 * std::pow((phi[0] + mode) / sd, 2));
                return std::log(0.5 * (a + b) / (sd * std::sqrt(2 * M_PI)));
            });
        auto rng = make_rng(10);
        const auto r = laplace_baseline(post, 0, 20000, rng);
        CHECK(std::abs(r.mean[0]) < 0.1);
        CHECK(post.log_prob(0, r.mean) < post.log_prob(0, Vec{mode}) - 5.0);
        // The midpoint is a density minimum, so the Hessian is not usable.
        CHECK(r.fallback);
        CHECK(r.covariance(0, 0) == doctest::Approx(mode * mode + sd * sd).epsilon(0.05));
    }
    const auto nodensity = fixed_sampler(1, 1, [](std::size_t, std::size_t n, Rng& rng) { return normal_draws(n, rng); });
    auto rng = make_rng(1);
    CHECK_THROWS_AS(laplace_baseline(nodensity, 0, 100, rng), DomainError);
}

TEST_CASE("point estimate metrics")
{
    const auto set = conjugate_set(400, 11);
    const auto perfect = fixed_sampler(400, 1, [&](std::size_t i, std::size_t n, Rng&) {
        return MatrixXd::Constant(n, 1, set.truth[i][0]);
    });
    const auto pm = point_estimate_metrics(perfect, set.truth, 10);
    CHECK(pm.mae[0] < 1e-12);
    CHECK(*pm.correlation[0] == doctest::Approx(1.0));

    const auto constant = fixed_sampler(400, 1, [](std::size_t, std::size_t n, Rng&) { return MatrixXd::Zero(n, 1); });
    CHECK_FALSE(point_estimate_metrics(constant, set.truth, 10).correlation[0].has_value());

    const auto noise = fixed_sampler(400, 1, [](std::size_t, std::size_t n, Rng& rng) { return normal_draws(n, rng); });
    const auto nm = point_estimate_metrics(noise, set.truth, 1, 12);
    CHECK(std::abs(*nm.correlation[0]) < 3.0 / std::sqrt(400.0));

    const auto exact = gaussian_posterior(set);
    const auto em = point_estimate_metrics(exact, set.truth, 1000, 13);
    double analytic = 0.0;
    for (std::size_t i = 0; i < set.x.size(); ++i)
        analytic += std::abs(linear_gaussian_posterior(set.x[i]).first - set.truth[i][0]) / set.x.size();
    CHECK(em.mae[0] == doctest::Approx(analytic).epsilon(0.1));

    CHECK_THROWS_AS(point_estimate_metrics(exact, std::vector<Vec>(5, Vec{0.0})), DomainError);
    CHECK_FALSE(pearson(Vec{1.0}, Vec{2.0}).has_value());
}

TEST_CASE("dip statistic matches the reference implementation")
{
    auto ramp = [](int n, double offset) {
        Vec v;
        for (int i = 0; i < n; ++i)
            v.push_back(offset + i / static_cast<double>(n - 1));
        return v;
    };
    CHECK(dip_statistic(ramp(100, 0.0)) == doctest::Approx(0.005).epsilon(1e-9));
    Vec two = ramp(50, 0.0);
    for (double v : ramp(50, 3.0))
        two.push_back(v);
    CHECK(dip_statistic(two) == doctest::Approx(0.16666666666666669).epsilon(1e-9));

    Vec trig, skewed;
    for (int i = 0; i < 300; ++i) {
        trig.push_back(std::sin(i * 1.7) + 0.3 * std::cos(i * i * 0.01));
        skewed.push_back(std::exp(std::sin(i * 0.37) * 1.5));
    }
    CHECK(dip_statistic(trig) == doctest::Approx(0.0331310080975707).epsilon(1e-9));
    CHECK(dip_statistic(skewed) == doctest::Approx(0.04742833463611482).epsilon(1e-9));
    CHECK(dip_statistic(Vec(10, 1.0)) == doctest::Approx(0.05));

    // Affine maps preserve unimodality and therefore the dip; a nonlinear
    // monotone map can create or remove modes.
    Vec affine, warped;
    for (double v : trig) {
        affine.push_back(-3.0 * v + 2.0);
        warped.push_back(std::exp(3.0 * v));
    }
    CHECK(dip_statistic(affine) == doctest::Approx(dip_statistic(trig)).epsilon(1e-9));
    CHECK(dip_statistic(warped) != doctest::Approx(dip_statistic(trig)).epsilon(1e-3));
}

TEST_CASE("dip test error rates")
{
    const double t = dip_threshold(1000);
    CHECK(t == dip_threshold(1000));
    CHECK(t > 0.0);
    CHECK(dip_threshold(1000, 0.1) <= t);
    int normal_flags = 0, mixture_flags = 0;
    const int trials = 200;
    for (int k = 0; k < trials; ++k) {
        auto rng = make_rng(77, {static_cast<std::uint64_t>(k)});
        const MatrixXd a = normal_draws(1000, rng);
        const MatrixXd b = mixture_draws(1000, rng, 3.0, 1.0);
        normal_flags += dip_multimodality(Vec(a.data(), a.data() + 1000)).multimodal;
        mixture_flags += dip_multimodality(Vec(b.data(), b.data() + 1000)).multimodal;
    }
    MESSAGE("normal flagged " << normal_flags << ", mixture flagged " << mixture_flags << " of " << trials);
    CHECK(normal_flags <= trials / 10);
    CHECK(mixture_flags >= 0.95 * trials);
    CHECK_THROWS_AS(dip_multimodality(Vec(199, 0.0)), DomainError);
}

TEST_CASE("population stratification")
{
    const auto set = conjugate_set(60, 14);
    const auto uni = gaussian_posterior(set);
    const auto one = population_stratify(uni, {0}, {{-5.0, 5.0}}, 1000, 0.95, 3);
    CHECK(one.unimodal.count + one.multimodal_group.count == 60);
    CHECK(one.multimodal_group.count <= 6);

    // Quadratic toy with its exact posterior.
    const double sd = 0.05;
    std::vector<double> phis, xs;
    auto rng = make_rng(15);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> noise(0.0, sd);
    for (int i = 0; i < 120; ++i) {
        phis.push_back(u(rng));
        xs.push_back(phis.back() * phis.back() + noise(rng));
    }
    const auto quad = fixed_sampler(120, 1, [&](std::size_t i, std::size_t n, Rng& r) {
        return quadratic_posterior_draws(xs[i], sd, n, r);
    });
    const auto strat = population_stratify(quad, {0}, {{-1.0, 1.0}}, 1000, 0.95, 4);
    int far = 0, far_flagged = 0;
    for (int i = 0; i < 120; ++i)
        if (std::abs(phis[i]) > 0.3) {
            ++far;
            far_flagged += strat.multimodal[i];
        }
    MESSAGE(far_flagged << " of " << far << " observations with |phi| > 0.3 flagged");
    CHECK(far_flagged >= 0.9 * far);
    CHECK(strat.unimodal.count + strat.multimodal_group.count == 120);
    CHECK(strat.unimodal.count > 0);
    // Two narrow peaks need fewer cells than the merged peak near zero.
    CHECK(strat.multimodal_group.mean_sci[0] < strat.unimodal.mean_sci[0]);

    // Two parameters: correlation of the posterior draws is reported.
    const auto pair = fixed_sampler(10, 2, [](std::size_t, std::size_t n, Rng& r) {
        MatrixXd m = normal_draws(n, r);
        MatrixXd out(n, 2);
        out.col(0) = m.col(0);
        out.col(1) = 2.0 * m.col(0);
        return out;
    });
    const auto ps = population_stratify(pair, {0, 1}, {{-5.0, 5.0}, {-10.0, 10.0}}, 500, 0.95, 5);
    CHECK(*ps.unimodal.mean_correlation == doctest::Approx(1.0));
    CHECK_THROWS_AS(population_stratify(pair, {0, 1, 1}, {{-5.0, 5.0}, {-10.0, 10.0}}), DomainError);
    CHECK_THROWS_AS(population_stratify(pair, {2}, {{-5.0, 5.0}, {-10.0, 10.0}}), DomainError);
}

TEST_CASE("analyze")
{
    const auto set = conjugate_set(200, 16);
    const auto post = gaussian_posterior(set);
    EvaluationSet es;
    es.truth = set.truth;
    es.observations.assign(200, Vec{0.0});
    es.ages.assign(200, 0.0);
    es.parameter_names = {"phi"};
    es.bounds = {{-5.0, 5.0}};
    AnalysisOptions opt;
    opt.seed = 3;
    const auto a = analyze(post, es, opt, Execution::serial);
    const auto b = analyze(post, es, opt, Execution::parallel);
    CHECK(a.to_json() == b.to_json());
    REQUIRE(a.parameters.size() == 1);
    const auto& p = a.parameters[0];
    CHECK(p.calibration >= 0.0);
    CHECK(p.calibration <= 0.5);
    CHECK(p.sci_mean[0] <= p.sci_mean[1]);
    CHECK(p.sci_mean[1] <= 10.0);
    // 95% interval of N(., 0.2) is about 2 * 1.96 * 0.447 wide.
    CHECK(p.sci_mean[1] == doctest::Approx(2 * 1.96 * std::sqrt(0.2)).epsilon(0.08));
    CHECK(p.bits[0] > 0.0);
    CHECK(p.multimodal_fraction < 0.1);
    CHECK(*p.correlation > 0.8);
    for (const auto& o : a.observations)
        CHECK(o.cells[0][0] <= o.cells[1][0]);

    const auto dir = std::filesystem::temp_directory_path() / "hemosbi_report_test";
    std::filesystem::create_directories(dir);
    a.write_csv(dir / "report.csv");
    std::ifstream in(dir / "report.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "id,parameter,truth,posterior_mean,posterior_std,credibility_level,sci_0.68,cells_0.68,sci_0.95,"
                    "cells_0.95,dip,multimodal");
    int rows = 0;
    for (std::string line; std::getline(in, line);)
        ++rows;
    CHECK(rows == 200);
    std::filesystem::remove_all(dir);

    opt.n_samples = 50;
    CHECK_THROWS_AS(analyze(post, es, opt), DomainError);
}

TEST_CASE("flow posterior adapter")
{
    const auto problem = linear_gaussian_toy(200, 1);
    TrainConfig cfg;
    cfg.epochs = 2;
    const auto r = train(problem, cfg);
    const auto es = make_evaluation_set(problem, cfg.seed);
    CHECK(es.size() == problem.split(Split::test).size());
    const FlowPosterior post(r.model, es.observations, es.ages);
    CHECK(post.size() == es.size());
    CHECK(post.has_density());
    auto rng = make_rng(2);
    const auto draws = post.sample(0, 5, rng);
    CHECK(draws.rows() == 5);
    CHECK(post.log_prob(0, Vec{0.1}) == doctest::Approx(r.model.log_prob(Vec{0.1}, es.observations[0], es.ages[0])));
    const auto rep = analyze(post, es);
    CHECK(rep.observations.size() == es.size());
}
