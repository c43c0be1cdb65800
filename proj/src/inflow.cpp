#include "hemosbi/inflow.hpp"

#include <cmath>
#include <numbers>

namespace hemosbi {

InflowProfile::InflowProfile(const HeartFunction& heart)
    : heart_(heart), period_(0.0)
{
    heart_.validate();
    period_ = heart_.period();
    const double lvet = heart_.ejection_time;
    const double f = heart_.peak_flow_time / lvet;
    // argmax of x^a (1-x)^b is a/(a+b); the smaller exponent is pinned to 3
    // so the lobe joins the diastolic zero flow with two vanishing derivatives.
    const double m = 3.0;
    if (f <= 0.5) {
        rise_ = m;
        decay_ = m * (1.0 - f) / f;
    } else {
        decay_ = m;
        rise_ = m * f / (1.0 - f);
    }
    if (heart_.stroke_volume == 0.0)
        return;

    const double main_integral = lvet * std::beta(rise_ + 1.0, decay_ + 1.0);
    const double reflected_integral = lvet / std::numbers::pi;
    main_amplitude_ = (1.0 - heart_.reflected_fraction) * heart_.stroke_volume / main_integral;
    reflected_amplitude_ = heart_.reflected_fraction * heart_.stroke_volume / reflected_integral;

    if (reflected_amplitude_ > 0.0) {
        // The main lobe decreases after PFT; the sum must stay below its peak.
        const double peak = main_amplitude_ * main_shape(heart_.peak_flow_time);
        const int n = 2000;
        for (int i = 0; i <= n; ++i) {
            const double t = 0.5 * lvet + 0.5 * lvet * i / n;
            if (t <= heart_.peak_flow_time)
                continue;
            if ((*this)(t) > peak)
                throw DomainError("reflected fraction too large: flow peak would move away from PFT");
        }
    }
}

double InflowProfile::main_shape(double t) const
{
    const double lvet = heart_.ejection_time;
    if (t <= 0.0 || t >= lvet)
        return 0.0;
    const double x = t / lvet;
    return std::pow(x, rise_) * std::pow(1.0 - x, decay_);
}

double InflowProfile::reflected_shape(double t) const
{
    const double half = 0.5 * heart_.ejection_time;
    if (t <= half || t >= heart_.ejection_time)
        return 0.0;
    return std::sin(std::numbers::pi * (t - half) / half);
}

double InflowProfile::operator()(double t) const
{
    if (t < 0.0)
        throw DomainError("inflow time must be non-negative");
    const double tau = std::fmod(t, period_);
    return main_amplitude_ * main_shape(tau) + reflected_amplitude_ * reflected_shape(tau);
}

double inflow_waveform(const HeartFunction& heart, double t)
{
    return InflowProfile(heart)(t);
}

} // namespace hemosbi
