#include "hemosbi/signal.hpp"

#include <algorithm>
#include <cmath>

namespace hemosbi {

double mean(std::span<const double> x)
{
    if (x.empty())
        throw DomainError("mean of an empty signal");
    double s = 0.0;
    for (double v : x)
        s += v;
    return s / static_cast<double>(x.size());
}

double rms_about_mean(std::span<const double> x)
{
    const double m = mean(x);
    double s = 0.0;
    for (double v : x)
        s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(x.size()));
}

double foot_time(std::span<const double> x, double rate, bool periodic)
{
    const long n = static_cast<long>(x.size());
    if (n < 5)
        throw SignalError("signal too short for foot detection");
    if (!(rate > 0.0))
        throw DomainError("sampling rate must be positive");
    auto at = [&](long i) {
        if (periodic)
            return x[static_cast<std::size_t>(((i % n) + n) % n)];
        return x[static_cast<std::size_t>(std::clamp(i, 0L, n - 1))];
    };
    auto slope = [&](long i) { return 0.5 * (at(i + 1) - at(i - 1)); };

    const long first = periodic ? 0 : 1;
    const long last = periodic ? n : n - 1;
    long best = -1;
    double best_slope = 0.0;
    for (long i = first; i < last; ++i) {
        const double d = slope(i);
        if (d > best_slope) {
            best_slope = d;
            best = i;
        }
    }
    if (best < 0 || !(best_slope > 0.0) || !std::isfinite(best_slope))
        throw SignalError("no rising edge: foot undetectable");

    double delta = 0.0;
    double peak_slope = best_slope;
    if (periodic || (best > 1 && best < n - 2)) {
        const double dm = slope(best - 1), d0 = best_slope, dp = slope(best + 1);
        const double curv = dm - 2.0 * d0 + dp;
        if (curv < 0.0) {
            delta = std::clamp(0.5 * (dm - dp) / curv, -0.5, 0.5);
            peak_slope = d0 - 0.25 * (dm - dp) * delta;
        }
    }
    const double x0 = at(best);
    const double value = x0 + delta * best_slope
                         + 0.5 * delta * delta * (at(best + 1) - 2.0 * x0 + at(best - 1));

    // Minimum preceding the upstroke: half a period back for periodic input,
    // the whole prefix otherwise.
    const long window = periodic ? n / 2 : best;
    double base = at(best);
    for (long k = 0; k <= window; ++k)
        base = std::min(base, at(best - k));

    double t = (static_cast<double>(best) + delta - (value - base) / peak_slope) / rate;
    if (periodic) {
        const double period = static_cast<double>(n) / rate;
        t = std::fmod(t, period);
        if (t < 0.0)
            t += period;
    }
    return t;
}

} // namespace hemosbi
