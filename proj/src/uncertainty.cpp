#include "hemosbi/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>

namespace hemosbi {

using nlohmann::json;
using Eigen::MatrixXd;

double Posterior::log_prob(std::size_t, std::span<const double>) const
{
    throw DomainError("this posterior has no density");
}

FlowPosterior::FlowPosterior(const ConditionalFlow& model, const std::vector<Vec>& observations, const Vec& ages,
                             Execution exec)
    : model_(&model), h_(observations.size())
{
    if (ages.size() != observations.size())
        throw ShapeError("one age per observation expected");
    for_each_index(observations.size(), exec, [&](std::size_t i) { h_[i] = model.encode(observations[i], ages[i]); });
}

MatrixXd FlowPosterior::sample(std::size_t i, std::size_t n, Rng& rng) const
{
    return model_->sample_given(h_.at(i), n, rng);
}

double FlowPosterior::log_prob(std::size_t i, std::span<const double> phi) const
{
    return model_->log_prob_given(phi, h_.at(i));
}

double FunctionPosterior::log_prob(std::size_t i, std::span<const double> phi) const
{
    if (!density_)
        throw DomainError("this posterior has no density");
    return density_(i, phi);
}

EvaluationSet make_evaluation_set(const NpeProblem& problem, std::uint64_t seed, Split split)
{
    EvaluationSet set;
    set.parameter_names = problem.parameter_names;
    set.bounds = problem.bounds;
    const auto examples = evaluation_examples(problem, seed, split);
    const auto& items = problem.split(split);
    for (std::size_t i = 0; i < items.size(); ++i) {
        set.ids.push_back(items[i].id);
        set.truth.push_back(examples[i].phi);
        set.observations.push_back(examples[i].x);
        set.ages.push_back(examples[i].age);
    }
    return set;
}

namespace {

Rng observation_rng(std::uint64_t seed, std::size_t i)
{
    return make_rng(seed, {stream::posterior, i});
}

void check_sample_count(std::size_t n, std::size_t minimum, const char* what)
{
    if (n < minimum)
        throw DomainError(std::string(what) + " needs at least " + std::to_string(minimum) + " posterior samples");
}

double rank_level(const Eigen::Ref<const Eigen::VectorXd>& draws, double truth)
{
    std::size_t below = 0;
    for (Eigen::Index s = 0; s < draws.size(); ++s)
        if (draws[s] < truth)
            ++below;
    return static_cast<double>(below) / static_cast<double>(draws.size());
}

std::vector<double> column(const MatrixXd& m, int d)
{
    return std::vector<double>(m.col(d).data(), m.col(d).data() + m.rows());
}

double cell_width(const std::pair<double, double>& b, int n_cells)
{
    return (b.second - b.first) / n_cells;
}

void check_bounds(const std::vector<std::pair<double, double>>& bounds, int dim, int n_cells)
{
    if (static_cast<int>(bounds.size()) != dim)
        throw ShapeError("one bound per parameter expected");
    for (const auto& [lo, hi] : bounds)
        if (!(hi > lo))
            throw DomainError("empty parameter bounds");
    if (n_cells < 10)
        throw DomainError("at least 10 cells per dimension are required");
}

} // namespace

std::vector<Vec> credibility_levels(const Posterior& posterior, const std::vector<Vec>& truth, std::size_t n_samples,
                                    std::uint64_t seed, Execution exec)
{
    check_sample_count(n_samples, 100, "credibility_levels");
    if (truth.size() != posterior.size())
        throw ShapeError("one true value per observation expected");
    const int k = posterior.dim();
    std::vector<Vec> levels(k, Vec(truth.size()));
    for_each_index(truth.size(), exec, [&](std::size_t i) {
        if (static_cast<int>(truth[i].size()) != k)
            throw ShapeError("true value has the wrong dimension");
        auto rng = observation_rng(seed, i);
        const MatrixXd draws = posterior.sample(i, n_samples, rng);
        for (int d = 0; d < k; ++d)
            levels[d][i] = rank_level(draws.col(d), truth[i][d]);
    });
    return levels;
}

double calibration_score(std::span<const double> levels, int k)
{
    if (levels.empty())
        throw DomainError("calibration_score needs at least one level");
    if (k < 10)
        throw DomainError("calibration grid needs at least 10 points");
    Vec sorted(levels.begin(), levels.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    double total = 0.0;
    for (int i = 1; i <= k; ++i) {
        const double t = static_cast<double>(i) / k;
        const auto below = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
        total += std::abs(t - static_cast<double>(below) / n);
    }
    return total / k;
}

std::pair<double, double> uniformity_ks(std::span<const double> levels)
{
    if (levels.empty())
        throw DomainError("uniformity_ks needs at least one level");
    Vec x(levels.begin(), levels.end());
    std::sort(x.begin(), x.end());
    const double n = static_cast<double>(x.size());
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double u = std::clamp(x[j], 0.0, 1.0);
        d = std::max({d, (j + 1) / n - u, u - j / n});
    }
    const double rn = std::sqrt(n);
    const double lambda = (rn + 0.12 + 0.11 / rn) * d;
    if (lambda < 0.2)
        return {d, 1.0};
    double p = 0.0;
    for (int j = 1; j <= 100; ++j)
        p += 2.0 * ((j % 2) ? 1.0 : -1.0) * std::exp(-2.0 * j * j * lambda * lambda);
    return {d, std::clamp(p, 0.0, 1.0)};
}

std::size_t credible_cells(std::span<const double> samples, double lo, double hi, int n_cells, double alpha,
                           std::size_t* clipped)
{
    if (samples.empty())
        throw DomainError("credible_cells needs samples");
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw DomainError("credible level must lie in (0, 1]");
    if (n_cells < 1 || !(hi > lo))
        throw DomainError("invalid discretization");
    std::vector<std::size_t> counts(n_cells, 0);
    for (double s : samples) {
        if (!std::isfinite(s))
            throw NumericError("non-finite posterior sample");
        long c = static_cast<long>(std::floor((s - lo) / (hi - lo) * n_cells));
        if (s < lo || s > hi) {
            if (clipped)
                ++*clipped;
        }
        c = std::clamp(c, 0L, static_cast<long>(n_cells) - 1);
        ++counts[c];
    }
    std::vector<int> order(n_cells);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[a] > counts[b]; });
    const double target = alpha * static_cast<double>(samples.size()) * (1.0 - 1e-12);
    std::size_t cum = 0, used = 0;
    for (int c : order) {
        cum += counts[c];
        ++used;
        if (static_cast<double>(cum) >= target)
            break;
    }
    return used;
}

SciResult sci(const Posterior& posterior, double alpha, const std::vector<std::pair<double, double>>& bounds,
              int n_cells, std::size_t n_samples, std::uint64_t seed, Execution exec)
{
    const int k = posterior.dim();
    check_bounds(bounds, k, n_cells);
    check_sample_count(n_samples, 1, "sci");
    SciResult r;
    r.alpha = alpha;
    r.n_cells = n_cells;
    r.cells.assign(k, std::vector<std::size_t>(posterior.size()));
    std::vector<std::size_t> clipped(posterior.size(), 0);
    for_each_index(posterior.size(), exec, [&](std::size_t i) {
        auto rng = observation_rng(seed, i);
        const MatrixXd draws = posterior.sample(i, n_samples, rng);
        for (int d = 0; d < k; ++d)
            r.cells[d][i] = credible_cells(column(draws, d), bounds[d].first, bounds[d].second, n_cells, alpha,
                                           &clipped[i]);
    });
    for (int d = 0; d < k; ++d) {
        r.cell_width.push_back(cell_width(bounds[d], n_cells));
        double mean_cells = 0.0;
        for (auto c : r.cells[d])
            mean_cells += static_cast<double>(c);
        r.mean_size.push_back(posterior.size() ? mean_cells / posterior.size() * r.cell_width.back() : 0.0);
    }
    r.clipped = std::accumulate(clipped.begin(), clipped.end(), std::size_t{0});
    return r;
}

double mi_bound(std::size_t cells, double alpha, std::size_t total_cells)
{
    if (cells < 1 || cells > total_cells)
        throw DomainError("credible region must hold between 1 and N cells");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw DomainError("alpha must lie in [0, 1]");
    auto term = [](double mass, double n_cells) { return mass > 0.0 ? -mass * std::log2(mass / n_cells) : 0.0; };
    double bits = term(alpha, static_cast<double>(cells));
    if (cells < total_cells)
        bits += term(1.0 - alpha, static_cast<double>(total_cells - cells));
    return bits;
}

LaplaceResult laplace_baseline(const Posterior& posterior, std::size_t index, std::size_t n_samples, Rng& rng)
{
    if (!posterior.has_density())
        throw DomainError("the Laplace baseline needs a posterior density");
    check_sample_count(n_samples, 2, "laplace_baseline");
    const int k = posterior.dim();
    const MatrixXd draws = posterior.sample(index, n_samples, rng);
    const Eigen::VectorXd mu = draws.colwise().mean();
    const MatrixXd centered = draws.rowwise() - mu.transpose();
    MatrixXd cov = centered.transpose() * centered / static_cast<double>(n_samples - 1);

    LaplaceResult r;
    r.sample_mean.assign(mu.data(), mu.data() + k);
    r.sample_covariance = cov;
    r.mean = r.sample_mean;

    Vec h(k);
    for (int d = 0; d < k; ++d) {
        const double sd = std::sqrt(cov(d, d));
        h[d] = sd > 0.0 ? 1e-2 * sd : 1e-6 * std::max(1.0, std::abs(mu[d]));
    }
    auto f = [&](int a, double da, int b, double db) {
        Vec x = r.mean;
        if (a >= 0)
            x[a] += da;
        if (b >= 0)
            x[b] += db;
        return posterior.log_prob(index, x);
    };
    const double f0 = f(-1, 0, -1, 0);
    MatrixXd hess(k, k);
    for (int a = 0; a < k; ++a) {
        hess(a, a) = (f(a, h[a], -1, 0) - 2.0 * f0 + f(a, -h[a], -1, 0)) / (h[a] * h[a]);
        for (int b = a + 1; b < k; ++b) {
            const double v = (f(a, h[a], b, h[b]) - f(a, h[a], b, -h[b]) - f(a, -h[a], b, h[b]) +
                              f(a, -h[a], b, -h[b])) /
                             (4.0 * h[a] * h[b]);
            hess(a, b) = hess(b, a) = v;
        }
    }
    const MatrixXd neg = -hess;
    Eigen::LLT<MatrixXd> llt(neg);
    if (!neg.allFinite() || llt.info() != Eigen::Success) {
        r.covariance = cov;
        r.fallback = true;
        return r;
    }
    MatrixXd inv = llt.solve(MatrixXd::Identity(k, k));
    r.covariance = 0.5 * (inv + inv.transpose());
    if (!r.covariance.allFinite()) {
        r.covariance = cov;
        r.fallback = true;
    }
    return r;
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw ShapeError("pearson needs equal-length inputs");
    if (a.size() < 2)
        return std::nullopt;
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0.0 || sbb <= 0.0)
        return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

PointEstimateMetrics point_estimate_metrics(const Posterior& posterior, const std::vector<Vec>& truth,
                                            std::size_t n_samples, std::uint64_t seed, Execution exec)
{
    if (truth.size() < 10)
        throw DomainError("point estimate metrics need at least 10 test points");
    if (truth.size() != posterior.size())
        throw ShapeError("one true value per observation expected");
    check_sample_count(n_samples, 1, "point_estimate_metrics");
    const int k = posterior.dim();
    PointEstimateMetrics m;
    m.estimates.assign(truth.size(), Vec(k));
    for_each_index(truth.size(), exec, [&](std::size_t i) {
        auto rng = observation_rng(seed, i);
        const Eigen::VectorXd mean = posterior.sample(i, n_samples, rng).colwise().mean();
        for (int d = 0; d < k; ++d)
            m.estimates[i][d] = mean[d];
    });
    for (int d = 0; d < k; ++d) {
        Vec est, tru;
        double mae = 0.0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            est.push_back(m.estimates[i][d]);
            tru.push_back(truth[i][d]);
            mae += std::abs(est.back() - tru.back());
        }
        m.mae.push_back(mae / static_cast<double>(truth.size()));
        m.correlation.push_back(pearson(est, tru));
    }
    return m;
}

namespace {

// Hartigan and Hartigan (1985), following the greatest convex minorant /
// least concave majorant iteration of their AS 217 algorithm. Indices are
// one-based to mirror the published algorithm. Returns the dip scaled by 2n.
double dip_sorted(const Vec& sorted)
{
    const int n = static_cast<int>(sorted.size());
    auto x = [&](int i) { return sorted[i - 1]; };
    double dip = 1.0;
    if (n < 2 || x(n) == x(1))
        return dip;

    std::vector<int> mn(n + 1), mj(n + 1), gcm(n + 1), lcm(n + 1);
    mn[1] = 1;
    for (int j = 2; j <= n; ++j) {
        mn[j] = j - 1;
        while (true) {
            const int mnj = mn[j], mnmnj = mn[mnj];
            if (mnj == 1 || (x(j) - x(mnj)) * (mnj - mnmnj) < (x(mnj) - x(mnmnj)) * (j - mnj))
                break;
            mn[j] = mnmnj;
        }
    }
    mj[n] = n;
    for (int k = n - 1; k >= 1; --k) {
        mj[k] = k + 1;
        while (true) {
            const int mjk = mj[k], mjmjk = mj[mjk];
            if (mjk == n || (x(k) - x(mjk)) * (mjk - mjmjk) < (x(mjk) - x(mjmjk)) * (k - mjk))
                break;
            mj[k] = mjmjk;
        }
    }

    int low = 1, high = n;
    while (true) {
        gcm[1] = high;
        int i = 1;
        while (gcm[i] > low) {
            gcm[i + 1] = mn[gcm[i]];
            ++i;
        }
        const int l_gcm = i;
        int ig = l_gcm, ix = ig - 1;

        lcm[1] = low;
        i = 1;
        while (lcm[i] < high) {
            lcm[i + 1] = mj[lcm[i]];
            ++i;
        }
        const int l_lcm = i;
        int ih = l_lcm, iv = 2;

        double d = 0.0;
        if (l_gcm != 2 || l_lcm != 2) {
            do {
                const int gcmix = gcm[ix], lcmiv = lcm[iv];
                if (gcmix > lcmiv) {
                    const int gcmi1 = gcm[ix + 1];
                    const double dx = (lcmiv - gcmi1 + 1) -
                                      (x(lcmiv) - x(gcmi1)) * (gcmix - gcmi1) / (x(gcmix) - x(gcmi1));
                    ++iv;
                    if (dx >= d) {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    const int lcmiv1 = lcm[iv - 1];
                    const double dx = (x(gcmix) - x(lcmiv1)) * (lcmiv - lcmiv1) / (x(lcmiv) - x(lcmiv1)) -
                                      (gcmix - lcmiv1 - 1);
                    --ix;
                    if (dx >= d) {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                if (ix < 1)
                    ix = 1;
                if (iv > l_lcm)
                    iv = l_lcm;
            } while (gcm[ix] != lcm[iv]);
        }
        if (d < dip)
            break;

        double dip_l = 0.0;
        for (int j = ig; j < l_gcm; ++j) {
            double max_t = 1.0;
            const int jb = gcm[j + 1], je = gcm[j];
            if (je - jb > 1 && x(je) != x(jb)) {
                const double c = (je - jb) / (x(je) - x(jb));
                for (int jj = jb; jj <= je; ++jj)
                    max_t = std::max(max_t, (jj - jb + 1) - (x(jj) - x(jb)) * c);
            }
            dip_l = std::max(dip_l, max_t);
        }
        double dip_u = 0.0;
        for (int j = ih; j < l_lcm; ++j) {
            double max_t = 1.0;
            const int jb = lcm[j], je = lcm[j + 1];
            if (je - jb > 1 && x(je) != x(jb)) {
                const double c = (je - jb) / (x(je) - x(jb));
                for (int jj = jb; jj <= je; ++jj)
                    max_t = std::max(max_t, (x(jj) - x(jb)) * c - (jj - jb - 1));
            }
            dip_u = std::max(dip_u, max_t);
        }
        dip = std::max(dip, std::max(dip_l, dip_u));

        if (low == gcm[ig] && high == lcm[ih])
            break;
        low = gcm[ig];
        high = lcm[ih];
    }
    return dip;
}

} // namespace

double dip_statistic(std::span<const double> samples)
{
    if (samples.empty())
        throw DomainError("dip statistic needs samples");
    Vec sorted(samples.begin(), samples.end());
    for (double v : sorted)
        if (!std::isfinite(v))
            throw NumericError("non-finite sample in dip statistic");
    std::sort(sorted.begin(), sorted.end());
    return dip_sorted(sorted) / (2.0 * static_cast<double>(sorted.size()));
}

double dip_threshold(std::size_t n, double false_positive_rate)
{
    if (n < 2)
        throw DomainError("dip threshold needs n >= 2");
    if (!(false_positive_rate > 0.0 && false_positive_rate < 1.0))
        throw DomainError("false-positive rate must lie in (0, 1)");
    static std::mutex mutex;
    static std::map<std::pair<std::size_t, double>, double> cache;
    {
        std::lock_guard lock(mutex);
        const auto it = cache.find({n, false_positive_rate});
        if (it != cache.end())
            return it->second;
    }
    const std::size_t trials = 2000;
    Vec dips(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        auto rng = make_rng(0xd1b, {n, t});
        std::normal_distribution<double> normal;
        Vec x(n);
        for (auto& v : x)
            v = normal(rng);
        dips[t] = dip_statistic(x);
    }
    std::sort(dips.begin(), dips.end());
    const auto q = static_cast<std::size_t>(std::ceil((1.0 - false_positive_rate) * trials));
    const double value = dips[std::min(trials - 1, q == 0 ? 0 : q - 1)];
    std::lock_guard lock(mutex);
    cache[{n, false_positive_rate}] = value;
    return value;
}

DipResult dip_multimodality(std::span<const double> samples, std::optional<double> threshold)
{
    if (samples.size() < 200)
        throw DomainError("the dip test needs at least 200 samples");
    DipResult r;
    r.dip = dip_statistic(samples);
    r.threshold = threshold ? *threshold : dip_threshold(samples.size());
    r.multimodal = r.dip > r.threshold;
    return r;
}

StratifyResult population_stratify(const Posterior& posterior, const std::vector<int>& parameters,
                                   const std::vector<std::pair<double, double>>& bounds, std::size_t n_samples,
                                   double alpha, std::uint64_t seed, Execution exec)
{
    const int k = posterior.dim();
    if (parameters.empty() || parameters.size() > 2)
        throw DomainError("population_stratify takes one or two parameters");
    for (int p : parameters)
        if (p < 0 || p >= k)
            throw DomainError("parameter index out of range");
    check_bounds(bounds, k, 10);
    check_sample_count(n_samples, 200, "population_stratify");
    const double threshold = dip_threshold(n_samples);

    const std::size_t n = posterior.size();
    const std::size_t m = parameters.size();
    StratifyResult r;
    r.parameters = parameters;
    r.alpha = alpha;
    r.multimodal.assign(n, 0);
    r.dips.assign(n, Vec(m));
    std::vector<Vec> sizes(n, Vec(m));
    std::vector<std::optional<double>> corr(n);
    for_each_index(n, exec, [&](std::size_t i) {
        auto rng = observation_rng(seed, i);
        const MatrixXd draws = posterior.sample(i, n_samples, rng);
        for (std::size_t j = 0; j < m; ++j) {
            const int d = parameters[j];
            const auto col = column(draws, d);
            const auto dip = dip_multimodality(col, threshold);
            r.dips[i][j] = dip.dip;
            if (dip.multimodal)
                r.multimodal[i] = 1;
            sizes[i][j] = static_cast<double>(credible_cells(col, bounds[d].first, bounds[d].second, 100, alpha)) *
                          cell_width(bounds[d], 100);
        }
        if (m == 2 && parameters[0] != parameters[1])
            corr[i] = pearson(column(draws, parameters[0]), column(draws, parameters[1]));
    });

    auto summarize = [&](char flag) {
        StratumSummary s;
        s.mean_sci.assign(m, 0.0);
        double corr_sum = 0.0;
        std::size_t corr_n = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (r.multimodal[i] != flag)
                continue;
            ++s.count;
            for (std::size_t j = 0; j < m; ++j)
                s.mean_sci[j] += sizes[i][j];
            if (corr[i]) {
                corr_sum += *corr[i];
                ++corr_n;
            }
        }
        if (s.count)
            for (auto& v : s.mean_sci)
                v /= static_cast<double>(s.count);
        if (corr_n)
            s.mean_correlation = corr_sum / static_cast<double>(corr_n);
        return s;
    };
    r.unimodal = summarize(0);
    r.multimodal_group = summarize(1);
    return r;
}

UncertaintyReport analyze(const Posterior& posterior, const EvaluationSet& set, const AnalysisOptions& options,
                          Execution exec)
{
    const int k = posterior.dim();
    const std::size_t n = posterior.size();
    if (set.size() != n)
        throw ShapeError("evaluation set and posterior disagree on the number of observations");
    if (n == 0)
        throw DomainError("nothing to analyze");
    check_bounds(set.bounds, k, options.n_cells);
    check_sample_count(options.n_samples, 100, "analyze");
    if (options.levels.empty())
        throw DomainError("at least one credible level is required");
    const std::size_t nl = options.levels.size();
    const bool dips = options.n_samples >= 200;
    const double threshold = dips ? dip_threshold(options.n_samples, options.dip_false_positive_rate) : 0.0;

    UncertaintyReport rep;
    rep.options = options;
    rep.bounds = set.bounds;
    rep.observations.resize(n);
    std::vector<std::size_t> clipped(n, 0);
    for_each_index(n, exec, [&](std::size_t i) {
        auto rng = observation_rng(options.seed, i);
        const MatrixXd draws = posterior.sample(i, options.n_samples, rng);
        auto& o = rep.observations[i];
        o.id = i < set.ids.size() ? set.ids[i] : std::to_string(i);
        o.truth = set.truth[i];
        o.sci.assign(nl, Vec(k));
        o.cells.assign(nl, std::vector<std::size_t>(k));
        o.dip.assign(k, std::numeric_limits<double>::quiet_NaN());
        o.multimodal.assign(k, 0);
        for (int d = 0; d < k; ++d) {
            const auto col = column(draws, d);
            const double mean = std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size());
            double ss = 0.0;
            for (double v : col)
                ss += (v - mean) * (v - mean);
            o.posterior_mean.push_back(mean);
            o.posterior_std.push_back(std::sqrt(ss / static_cast<double>(col.size() - 1)));
            o.credibility.push_back(rank_level(draws.col(d), set.truth[i][d]));
            for (std::size_t l = 0; l < nl; ++l) {
                const auto cells = credible_cells(col, set.bounds[d].first, set.bounds[d].second, options.n_cells,
                                                  options.levels[l], l == 0 ? &clipped[i] : nullptr);
                o.cells[l][d] = cells;
                o.sci[l][d] = static_cast<double>(cells) * cell_width(set.bounds[d], options.n_cells);
            }
            if (dips) {
                const auto dip = dip_multimodality(col, threshold);
                o.dip[d] = dip.dip;
                o.multimodal[d] = dip.multimodal;
            }
        }
    });
    rep.clipped = std::accumulate(clipped.begin(), clipped.end(), std::size_t{0});

    for (int d = 0; d < k; ++d) {
        ParameterReport p;
        p.name = d < static_cast<int>(set.parameter_names.size()) ? set.parameter_names[d] : "p" + std::to_string(d);
        Vec levels, est, tru;
        double mae = 0.0, multi = 0.0;
        for (const auto& o : rep.observations) {
            levels.push_back(o.credibility[d]);
            est.push_back(o.posterior_mean[d]);
            tru.push_back(o.truth[d]);
            mae += std::abs(o.posterior_mean[d] - o.truth[d]);
            multi += o.multimodal[d] ? 1.0 : 0.0;
        }
        p.calibration = calibration_score(levels, options.calibration_grid);
        p.ks_p_value = uniformity_ks(levels).second;
        for (std::size_t l = 0; l < nl; ++l) {
            Vec sizes;
            double bits = 0.0;
            for (const auto& o : rep.observations) {
                sizes.push_back(o.sci[l][d]);
                bits += mi_bound(o.cells[l][d], options.levels[l], static_cast<std::size_t>(options.n_cells));
            }
            const auto [m, s] = mean_and_std(sizes);
            p.sci_mean.push_back(m);
            p.sci_std.push_back(s);
            p.bits.push_back(bits / static_cast<double>(n));
        }
        p.mae = mae / static_cast<double>(n);
        p.correlation = pearson(est, tru);
        p.multimodal_fraction = multi / static_cast<double>(n);
        rep.parameters.push_back(std::move(p));
    }
    return rep;
}

json UncertaintyReport::to_json() const
{
    json params = json::array();
    for (std::size_t d = 0; d < parameters.size(); ++d) {
        const auto& p = parameters[d];
        json levels = json::array();
        for (std::size_t l = 0; l < options.levels.size(); ++l)
            levels.push_back({{"level", options.levels[l]},
                              {"sci_mean", p.sci_mean[l]},
                              {"sci_std", p.sci_std[l]},
                              {"mi_bound_bits", p.bits[l]}});
        params.push_back({{"name", p.name},
                          {"bounds", {bounds[d].first, bounds[d].second}},
                          {"calibration", p.calibration},
                          {"ks_p_value", p.ks_p_value},
                          {"sci", levels},
                          {"mae", p.mae},
                          {"correlation", p.correlation ? json(*p.correlation) : json(nullptr)},
                          {"multimodal_fraction", p.multimodal_fraction}});
    }
    return {{"n_observations", observations.size()},
            {"n_samples", options.n_samples},
            {"n_cells", options.n_cells},
            {"calibration_grid", options.calibration_grid},
            {"dip_false_positive_rate", options.dip_false_positive_rate},
            {"seed", options.seed},
            {"clipped_samples", clipped},
            {"parameters", params}};
}

void UncertaintyReport::write_csv(std::ostream& out, const std::string& key, bool header) const
{
    out.precision(10);
    const std::string prefix = key.empty() ? "" : key + ",";
    if (header) {
        out << (key.empty() ? "" : "checkpoint,") << "id,parameter,truth,posterior_mean,posterior_std,credibility_level";
        for (double l : options.levels)
            out << ",sci_" << l << ",cells_" << l;
        out << ",dip,multimodal\n";
    }
    for (const auto& o : observations)
        for (std::size_t d = 0; d < parameters.size(); ++d) {
            out << prefix << o.id << ',' << parameters[d].name << ',' << o.truth[d] << ',' << o.posterior_mean[d]
                << ',' << o.posterior_std[d] << ',' << o.credibility[d];
            for (std::size_t l = 0; l < options.levels.size(); ++l)
                out << ',' << o.sci[l][d] << ',' << o.cells[l][d];
            out << ',';
            if (std::isfinite(o.dip[d]))
                out << o.dip[d];
            out << ',' << (o.multimodal[d] ? 1 : 0) << '\n';
        }
}

void UncertaintyReport::write_csv(const std::filesystem::path& path) const
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    write_csv(out);
    if (!out)
        throw IoError("failed writing " + path.string());
}

} // namespace hemosbi
