#pragma once

#include "hemosbi/inflow.hpp"
#include "hemosbi/vessel.hpp"
#include "hemosbi/waveform.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace hemosbi {

enum class Limiter { minmod, van_leer, monotonized_central, unlimited, first_order };
enum class JunctionPressure { total, static_pressure };

struct SolverConfig {
    double cell_size = 0.02;  // target dx (m)
    int min_cells = 4;
    double cfl = 0.9;
    double sample_rate = 125.0;
    double tolerance = 1e-3;
    int max_cycles = 15;
    Limiter limiter = Limiter::monotonized_central;
    JunctionPressure junction_pressure = JunctionPressure::total;
    bool viscoelastic = true;
    /// Start from the beat-start pressure of a lumped two-element model
    /// (uniform pressure, flow split over the tree) instead of rest.
    bool lumped_start = true;
    /// Use the inflow waveform at the root; when false the inlet is closed (Q = 0).
    bool heart_inflow = true;
};

struct SegmentGrid {
    int cells = 0;
    double dx = 0.0;
    // Cell-centre geometry.
    Vec x, A0, sqrtA0, beta, gamma, dbeta_dx, dsqrtA0_dx;
    // Face geometry (cells + 1 faces).
    Vec A0_face, beta_face, gamma_face;
    double external_pressure = 0.0;
};

struct SolverGrid {
    std::vector<SegmentGrid> segments;
    double cfl = 0.9;

    int total_cells() const;
};

SolverGrid make_grid(const ArterialNetwork& net, const SolverConfig& cfg);

struct SegmentState {
    Vec A, Q;
};

struct SolverState {
    std::vector<SegmentState> segments;
    std::map<int, double> bed_pressure;  // leaf segment -> compliance pressure p_c
    double time = 0.0;
};

/// Primitive state at a segment end together with the local wall.
struct EndState {
    double area;
    double flow;
    WallSection wall;
};

struct BoundaryState {
    double area;
    double flow;
};

struct JunctionSolution {
    std::vector<BoundaryState> ends;  // [0] = parent outlet, then children inlets
    int iterations = 0;
    double residual = 0.0;
};

/// Couples a parent outlet to its children inlets: mass conservation plus
/// continuity of total (or static) pressure, with the outgoing characteristic
/// invariant of every end held fixed. Damped Newton, at most 50 iterations.
/// Throws SolverError when the scaled residual does not reach 1e-10.
JunctionSolution junction_coupling(const EndState& parent, std::span<const EndState> children,
                                   const BloodProperties& blood,
                                   JunctionPressure mode = JunctionPressure::total);

/// Inlet boundary with prescribed flow, using the backward characteristic
/// from the first interior cell.
BoundaryState inlet_boundary(const EndState& interior, double flow, const BloodProperties& blood);

struct WindkesselOutflow {
    BoundaryState boundary;
    double terminal_pressure;  // pressure at the bed inlet
    double bed_pressure;       // updated compliance pressure
};

/// Outlet boundary coupled to a three-element Windkessel: solves
/// P(A) - R1 Q(A) = p_c along the forward characteristic of the terminal
/// cell, then advances p_c over dt by implicit Euler.
WindkesselOutflow windkessel_outflow(const EndState& interior, const WindkesselBed& bed, double bed_pressure,
                                     double dt, const BloodProperties& blood);

/// Implicit Euler step of C dp_c/dt = Q - (p_c - P_out)/R2.
double windkessel_bed_update(const WindkesselBed& bed, double bed_pressure, double inflow, double dt);

struct StepFluxes {
    double inflow = 0.0;   // volume entering through the root over the step (m^3)
    double outflow = 0.0;  // volume leaving through all outlets (m^3)
};

class Solver {
public:
    Solver(ArterialNetwork net, SolverConfig cfg = {});

    const ArterialNetwork& network() const { return net_; }
    const SolverConfig& config() const { return cfg_; }
    const SolverGrid& grid() const { return grid_; }
    const InflowProfile& inflow() const { return inflow_; }

    /// A = A0, Q = 0, bed pressures at P_out.
    SolverState rest_state() const;
    /// Uniform pressure from lumped_start_pressure(), with the matching bed
    /// outflow split over the tree.
    SolverState lumped_state() const;
    SolverState initial_state() const { return cfg_.lumped_start ? lumped_state() : rest_state(); }
    /// Periodic beat-start pressure of the network lumped into one resistance
    /// and one compliance (beds plus vessel walls).
    double lumped_start_pressure() const;

    double stable_timestep(const SolverState& s) const;
    SolverState advance(const SolverState& s, double dt, StepFluxes* fluxes = nullptr);

    double volume(const SolverState& s) const;
    double inlet_flow(double t) const;

    /// Value at an axial position, linear between cell centres.
    double sample(const SolverState& s, int segment, double position, SignalKind kind) const;

private:
    void stage(const std::vector<SegmentState>& u, const std::map<int, double>& beds, double t, double dt,
               std::vector<SegmentState>& rhs, Vec& in_flux, Vec& out_flux);
    void viscous_correction(std::vector<SegmentState>& u, double dt) const;

    ArterialNetwork net_;
    SolverConfig cfg_;
    SolverGrid grid_;
    InflowProfile inflow_;
    std::vector<int> parents_;

    // Workspace reused across steps.
    std::vector<SegmentState> k1_, k2_, u1_;
    std::vector<Vec> slopeA_, slopeQ_, fluxA_, fluxQ_;
    std::vector<EndState> head_, tail_;
};

double stable_timestep(const Solver& solver, const SolverState& s);
SolverState advance_step(Solver& solver, const SolverState& s, double dt, StepFluxes* fluxes = nullptr);

struct SimulationDiagnostics {
    int cycles = 0;
    bool converged = false;
    double residual = 0.0;
    Vec residual_history;
    long steps = 0;
    double cycle_volume_drift = 0.0;  // m^3 over the final cycle
    double cycle_inflow = 0.0;        // m^3 entering over the final cycle
    std::vector<std::string> warnings;
};

struct SimulationResult {
    std::map<std::string, WaveformRecord> waveforms;
    SimulationDiagnostics diagnostics;
};

/// Runs whole cycles until consecutive cycles agree at every site, then
/// returns the final cycle per site at cfg.sample_rate.
SimulationResult simulate(const ArterialNetwork& net, const SolverConfig& cfg = {});

/// Min-max normalized area. Throws SignalError for a constant waveform.
WaveformRecord extract_ppg(const WaveformRecord& area);

} // namespace hemosbi
