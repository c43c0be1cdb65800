#pragma once

#include "hemosbi/vessel.hpp"

namespace hemosbi {

/// Aortic-root inflow Q(t) built from the five heart parameters.
///
/// Main ejection lobe: a_m * x^a * (1 - x)^b with x = t/LVET, where
/// a/(a+b) = PFT/LVET puts the peak exactly at PFT and the smaller exponent
/// is 3, so the lobe starts and ends with zero slope and curvature.
/// Reflected lobe: a_r * sin(pi * (t - LVET/2) / (LVET/2)) on [LVET/2, LVET].
/// Amplitudes are set so the main lobe carries (1 - RFV) SV and the
/// reflected lobe RFV SV. Q is zero on [LVET, T) and periodic in T = 60/HR.
///
/// Throws DomainError when the heart parameters are invalid or the reflected
/// lobe would move the global peak away from PFT.
class InflowProfile {
public:
    explicit InflowProfile(const HeartFunction& heart);

    double operator()(double t) const;
    double period() const { return period_; }
    double rise_exponent() const { return rise_; }
    double decay_exponent() const { return decay_; }
    const HeartFunction& heart() const { return heart_; }

private:
    double main_shape(double tau) const;
    double reflected_shape(double tau) const;

    HeartFunction heart_;
    double period_;
    double rise_ = 3.0;
    double decay_ = 3.0;
    double main_amplitude_ = 0.0;
    double reflected_amplitude_ = 0.0;
};

double inflow_waveform(const HeartFunction& heart, double t);

} // namespace hemosbi
