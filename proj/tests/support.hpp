#pragma once

#include "hemosbi/network_io.hpp"
#include "hemosbi/signal.hpp"
#include "hemosbi/solver.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hemosbi::testing {

inline std::string source_path(const std::string& rel)
{
    return std::string(HEMOSBI_SOURCE_DIR) + "/" + rel;
}

inline ArterialNetwork bundled(const std::string& name)
{
    return load_network(source_path("networks/" + name + ".json"));
}

/// Uniform frictionless tube (r = 1 cm, E = 0.4 MPa, h = 1 mm) terminated
/// by a Windkessel whose R1 matches the characteristic impedance.
inline ArterialNetwork uniform_tube(double length = 1.0)
{
    ArterialNetwork net;
    net.name = "uniform_tube";
    VesselSegment s;
    s.name = "tube";
    s.length = length;
    s.radius_proximal = s.radius_distal = 0.01;
    s.wall_thickness = 1e-3;
    s.elastic_modulus = 4e5;
    net.segments = {s};
    net.children = {{}};
    net.blood.viscosity = 0.0;
    const double A0 = s.reference_area(0.0);
    const double c0 = wave_speed(A0, s, net.blood);
    net.beds[0] = {net.blood.density * c0 / A0, 1e8, 1e-8, 0.0};
    return net;
}

struct PulseSpeeds {
    double right = 0.0;
    double left = 0.0;
    double c0 = 0.0;
};

/// Releases a small Gaussian area bump at the middle of a 1 m uniform
/// frictionless tube and times the feet of the two pulses it splits into.
inline PulseSpeeds measure_pulse_speeds(double amplitude = 1e-3, double cell_size = 0.0025)
{
    const auto net = uniform_tube(1.0);
    SolverConfig cfg;
    cfg.cell_size = cell_size;
    cfg.heart_inflow = false;
    cfg.viscoelastic = false;
    cfg.lumped_start = false;
    Solver solver(net, cfg);
    auto state = solver.rest_state();
    const auto& g = solver.grid().segments[0];
    for (int i = 0; i < g.cells; ++i)
        state.segments[0].A[i] *= 1.0 + amplitude * std::exp(-std::pow((g.x[i] - 0.5) / 0.03, 2));

    const double positions[4] = {0.2, 0.4, 0.6, 0.8};
    const double rate = 20000.0;
    const double t_end = 0.09;
    const auto n = static_cast<std::size_t>(t_end * rate);
    std::vector<Vec> series(4, Vec(n));
    for (std::size_t i = 0; i < n; ++i) {
        const double target = static_cast<double>(i) / rate;
        while (target - state.time > 1e-12)
            state = solver.advance(state, std::min(solver.stable_timestep(state), target - state.time));
        for (int k = 0; k < 4; ++k)
            series[k][i] = solver.sample(state, 0, positions[k], SignalKind::area);
    }
    Vec foot(4);
    for (int k = 0; k < 4; ++k)
        foot[k] = foot_time(series[k], rate, false);
    PulseSpeeds out;
    out.right = 0.2 / (foot[3] - foot[2]);
    out.left = 0.2 / (foot[0] - foot[1]);
    out.c0 = wave_speed(net.segments[0].reference_area(0.0), net.segments[0], net.blood);
    return out;
}

struct GridConvergence {
    double coarse_error = 0.0;  // relative L2 at dx
    double fine_error = 0.0;    // relative L2 at dx / 2
    double factor() const { return coarse_error / fine_error; }
};

inline double relative_l2(const Vec& a, const Vec& ref)
{
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        num += (a[i] - ref[i]) * (a[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    return std::sqrt(num / den);
}

/// Relative L2 error over all pressure sites of a network at `coarse_dx`
/// and `coarse_dx / 2`, against a run with `ref_factor` times finer cells,
/// sampled at 1 kHz. Pick `coarse_dx` so every segment length is a whole
/// number of cells at or above the minimum count, otherwise the cell count
/// of short segments does not double.
inline GridConvergence grid_convergence(const ArterialNetwork& net, double coarse_dx, int ref_factor = 8,
                                        SolverConfig base = {})
{
    base.tolerance = 1e-9;
    base.max_cycles = 40;
    base.sample_rate = 1000.0;
    auto run = [&](double dx) {
        auto cfg = base;
        cfg.cell_size = dx;
        return simulate(net, cfg).waveforms;
    };
    const auto ref = run(coarse_dx / ref_factor);
    const auto coarse = run(coarse_dx);
    const auto fine = run(coarse_dx / 2);
    double ec = 0.0, ef = 0.0, norm = 0.0;
    for (const auto& [site, w] : ref) {
        if (w.kind != SignalKind::pressure)
            continue;
        for (std::size_t i = 0; i < w.samples.size(); ++i) {
            ec += std::pow(coarse.at(site).samples[i] - w.samples[i], 2);
            ef += std::pow(fine.at(site).samples[i] - w.samples[i], 2);
            norm += w.samples[i] * w.samples[i];
        }
    }
    return {std::sqrt(ec / norm), std::sqrt(ef / norm)};
}

} // namespace hemosbi::testing
