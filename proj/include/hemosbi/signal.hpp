#pragma once

#include "hemosbi/common.hpp"

#include <span>

namespace hemosbi {

/// Onset time (s, relative to the first sample) of the steepest upstroke,
/// by the intersecting-tangent method: the tangent at the point of maximum
/// slope is intersected with the horizontal through the preceding minimum.
/// The maximum-slope location is refined to sub-sample accuracy with a
/// parabola. A periodic signal wraps around; the returned time is then in
/// [0, n/rate).
/// Throws SignalError when no rising edge exists.
double foot_time(std::span<const double> x, double rate, bool periodic);

double mean(std::span<const double> x);
double rms_about_mean(std::span<const double> x);

} // namespace hemosbi
