#include "hemosbi/solver.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace hemosbi {

namespace {

constexpr double sqrt_pi = 1.7724538509055160273;
constexpr double nan = std::numeric_limits<double>::quiet_NaN();

double speed(double area, double beta, double rho)
{
    return std::sqrt(beta / (2.0 * rho)) * std::sqrt(std::sqrt(area));
}

double elastic_pressure(double area, const WallSection& w)
{
    return w.external_pressure + w.beta * (std::sqrt(area) - std::sqrt(w.reference_area));
}

struct Flux {
    double a, q;
};

Flux physical_flux(double A, double Q, double beta, const BloodProperties& b)
{
    return {Q, b.coriolis * Q * Q / A + beta * A * std::sqrt(A) / (3.0 * b.density)};
}

// Eigenvalues of the flux Jacobian: alpha u -/+ sqrt(alpha^2 u^2 - alpha u^2 + c^2).
void eigenvalues(double A, double Q, double beta, const BloodProperties& b, double& lo, double& hi)
{
    const double u = Q / A;
    const double c = speed(A, beta, b.density);
    const double a = b.coriolis;
    const double root = std::sqrt(a * a * u * u - a * u * u + c * c);
    lo = a * u - root;
    hi = a * u + root;
}

Flux hll(double AL, double QL, double AR, double QR, double beta, const BloodProperties& b)
{
    double lL, hL, lR, hR;
    eigenvalues(AL, QL, beta, b, lL, hL);
    eigenvalues(AR, QR, beta, b, lR, hR);
    const double sl = std::min(lL, lR);
    const double sr = std::max(hL, hR);
    const Flux fl = physical_flux(AL, QL, beta, b);
    if (sl >= 0.0)
        return fl;
    const Flux fr = physical_flux(AR, QR, beta, b);
    if (sr <= 0.0)
        return fr;
    const double inv = 1.0 / (sr - sl);
    return {(sr * fl.a - sl * fr.a + sl * sr * (AR - AL)) * inv,
            (sr * fl.q - sl * fr.q + sl * sr * (QR - QL)) * inv};
}

double limit(Limiter lim, double a, double b)
{
    switch (lim) {
    case Limiter::minmod:
        if (a * b <= 0.0)
            return 0.0;
        return a > 0.0 ? std::min(a, b) : std::max(a, b);
    case Limiter::van_leer:
        if (a * b <= 0.0)
            return 0.0;
        return 2.0 * a * b / (a + b);
    case Limiter::monotonized_central: {
        if (a * b <= 0.0)
            return 0.0;
        const double m = std::min({2.0 * std::abs(a), 2.0 * std::abs(b), 0.5 * std::abs(a + b)});
        return a > 0.0 ? m : -m;
    }
    case Limiter::unlimited:
        return 0.5 * (a + b);
    case Limiter::first_order:
        return 0.0;
    }
    return 0.0;
}

// Riemann invariant offset 4(c - c0) for the local wall.
double invariant_offset(double area, const WallSection& w, double rho)
{
    return 4.0 * (speed(area, w.beta, rho) - speed(w.reference_area, w.beta, rho));
}

// Solves P(A) - R1 Q(A) = p_c on the forward characteristic of the outlet.
BoundaryState windkessel_boundary(const EndState& e, const WindkesselBed& bed, double pc, const BloodProperties& b)
{
    const double rho = b.density;
    const double W1 = e.flow / e.area + invariant_offset(e.area, e.wall, rho);
    double A = e.area;
    for (int it = 0; it < 60; ++it) {
        const double c = speed(A, e.wall.beta, rho);
        const double u = W1 - invariant_offset(A, e.wall, rho);
        const double g = elastic_pressure(A, e.wall) - bed.proximal_resistance * A * u - pc;
        const double dg = e.wall.beta / (2.0 * std::sqrt(A)) - bed.proximal_resistance * (u - c);
        double step = g / dg;
        double next = A - step;
        while (!(next > 0.0)) {
            step *= 0.5;
            next = A - step;
        }
        const bool done = std::abs(next - A) <= 1e-14 * A;
        A = next;
        if (done)
            break;
    }
    if (!std::isfinite(A) || A <= 0.0)
        throw SolverError("windkessel boundary did not converge", -1, -1, nan);
    return {A, A * (W1 - invariant_offset(A, e.wall, rho))};
}

// One explicit Euler stage of C dp/dt = Q - (p - P_out)/R2. Falls back to implicit Euler when the
// bed time constant is not resolved by dt.
double bed_stage(const WindkesselBed& bed, double p, double q, double dt)
{
    const double R2 = bed.distal_resistance;
    if (R2 <= 0.0)
        return bed.outflow_pressure;
    const double tau = R2 * bed.compliance;
    if (dt > 0.5 * tau)
        return windkessel_bed_update(bed, p, q, dt);
    return p + dt * (q - (p - bed.outflow_pressure) / R2) / bed.compliance;
}

void check_finite(const SegmentState& s, int seg, double t)
{
    for (std::size_t i = 0; i < s.A.size(); ++i)
        if (!(s.A[i] > 0.0) || !std::isfinite(s.A[i]) || !std::isfinite(s.Q[i]))
            throw SolverError("solver blow-up: non-positive or non-finite state", seg, static_cast<int>(i), t);
}

} // namespace

int SolverGrid::total_cells() const
{
    int n = 0;
    for (const auto& s : segments)
        n += s.cells;
    return n;
}

SolverGrid make_grid(const ArterialNetwork& net, const SolverConfig& cfg)
{
    if (!(cfg.cell_size > 0.0))
        throw ConfigError("cell size must be positive");
    if (!(cfg.cfl > 0.0 && cfg.cfl <= 1.0))
        throw ConfigError("CFL number must lie in (0, 1]");
    if (cfg.min_cells < 4)
        throw ConfigError("at least 4 cells per segment are required");
    SolverGrid grid;
    grid.cfl = cfg.cfl;
    for (const auto& seg : net.segments) {
        if (!(seg.length > 0.0))
            throw ConfigError("segment '" + seg.name + "' has non-positive length");
        SegmentGrid g;
        g.cells = std::max(cfg.min_cells, static_cast<int>(std::lround(seg.length / cfg.cell_size)));
        g.dx = seg.length / g.cells;
        g.external_pressure = seg.external_pressure;
        const double r_slope = seg.radius_slope();
        for (int i = 0; i < g.cells; ++i) {
            const double x = (i + 0.5) * g.dx;
            const double r = seg.reference_radius(x);
            const double beta = seg.beta(x);
            g.x.push_back(x);
            g.A0.push_back(seg.reference_area(x));
            g.sqrtA0.push_back(sqrt_pi * r);
            g.beta.push_back(beta);
            g.gamma.push_back(seg.gamma(x));
            g.dbeta_dx.push_back(-2.0 * beta * r_slope / r);
            g.dsqrtA0_dx.push_back(sqrt_pi * r_slope);
        }
        for (int j = 0; j <= g.cells; ++j) {
            const double x = j * g.dx;
            g.A0_face.push_back(seg.reference_area(x));
            g.beta_face.push_back(seg.beta(x));
            g.gamma_face.push_back(seg.gamma(x));
        }
        grid.segments.push_back(std::move(g));
    }
    return grid;
}

BoundaryState inlet_boundary(const EndState& e, double flow, const BloodProperties& b)
{
    const double rho = b.density;
    const double W2 = e.flow / e.area - invariant_offset(e.area, e.wall, rho);
    double A = e.area;
    for (int it = 0; it < 60; ++it) {
        const double c = speed(A, e.wall.beta, rho);
        const double f = flow / A - invariant_offset(A, e.wall, rho) - W2;
        const double df = -flow / (A * A) - c / A;
        double step = f / df;
        double next = A - step;
        while (!(next > 0.0)) {
            step *= 0.5;
            next = A - step;
        }
        const bool done = std::abs(next - A) <= 1e-14 * A;
        A = next;
        if (done)
            break;
    }
    if (!std::isfinite(A) || A <= 0.0)
        throw SolverError("inlet boundary did not converge", -1, -1, nan);
    return {A, flow};
}

double windkessel_bed_update(const WindkesselBed& bed, double pc, double inflow, double dt)
{
    const double C = bed.compliance;
    const double R2 = bed.distal_resistance;
    if (R2 <= 0.0)
        return bed.outflow_pressure;
    return (pc + dt * (inflow + bed.outflow_pressure / R2) / C) / (1.0 + dt / (R2 * C));
}

WindkesselOutflow windkessel_outflow(const EndState& interior, const WindkesselBed& bed, double pc, double dt,
                                     const BloodProperties& blood)
{
    if (!(bed.compliance > 0.0))
        throw DomainError("windkessel compliance must be positive");
    WindkesselOutflow out;
    out.boundary = windkessel_boundary(interior, bed, pc, blood);
    out.bed_pressure = windkessel_bed_update(bed, pc, out.boundary.flow, dt);
    out.terminal_pressure = out.bed_pressure + bed.proximal_resistance * out.boundary.flow;
    return out;
}

JunctionSolution junction_coupling(const EndState& parent, std::span<const EndState> children,
                                   const BloodProperties& b, JunctionPressure mode)
{
    if (children.empty())
        throw DomainError("junction needs at least one child");
    const int n = static_cast<int>(children.size()) + 1;
    const double rho = b.density;
    std::vector<const EndState*> ends{&parent};
    for (const auto& c : children)
        ends.push_back(&c);
    // s = +1 for the parent outlet (forward characteristic leaves the parent),
    // s = -1 for child inlets.
    Vec W(n), sign(n), A(n);
    for (int k = 0; k < n; ++k) {
        sign[k] = k == 0 ? 1.0 : -1.0;
        const auto& e = *ends[k];
        W[k] = e.flow / e.area + sign[k] * invariant_offset(e.area, e.wall, rho);
        A[k] = e.area;
    }
    const double c_ref = speed(parent.wall.reference_area, parent.wall.beta, rho);
    const double q_scale = parent.wall.reference_area * c_ref;
    const double p_scale = rho * c_ref * c_ref;
    const bool total = mode == JunctionPressure::total;

    Vec u(n), Q(n), H(n), dQ(n), dH(n);
    auto evaluate = [&](const Vec& a, Eigen::VectorXd& r) {
        for (int k = 0; k < n; ++k) {
            const auto& w = ends[k]->wall;
            const double c = speed(a[k], w.beta, rho);
            u[k] = W[k] - sign[k] * invariant_offset(a[k], w, rho);
            Q[k] = a[k] * u[k];
            const double du = -sign[k] * c / a[k];
            dQ[k] = u[k] + a[k] * du;
            H[k] = elastic_pressure(a[k], w) + (total ? 0.5 * rho * u[k] * u[k] : 0.0);
            dH[k] = w.beta / (2.0 * std::sqrt(a[k])) + (total ? rho * u[k] * du : 0.0);
        }
        r.resize(n);
        double qsum = 0.0;
        for (int k = 1; k < n; ++k)
            qsum += Q[k];
        r[0] = (Q[0] - qsum) / q_scale;
        for (int k = 1; k < n; ++k)
            r[k] = (H[0] - H[k]) / p_scale;
        return r.cwiseAbs().maxCoeff();
    };

    JunctionSolution sol;
    Eigen::VectorXd r;
    double res = evaluate(A, r);
    int it = 0;
    for (; it < 50 && res >= 1e-12; ++it) {
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
        J(0, 0) = dQ[0] / q_scale;
        for (int k = 1; k < n; ++k) {
            J(0, k) = -dQ[k] / q_scale;
            J(k, 0) = dH[0] / p_scale;
            J(k, k) = -dH[k] / p_scale;
        }
        const Eigen::VectorXd delta = J.partialPivLu().solve(r);
        double lambda = 1.0;
        Vec trial(n);
        Eigen::VectorXd rt;
        double res_trial = std::numeric_limits<double>::infinity();
        for (int h = 0; h < 30; ++h) {
            bool positive = true;
            for (int k = 0; k < n; ++k) {
                trial[k] = A[k] - lambda * delta[k];
                positive = positive && trial[k] > 0.0;
            }
            if (positive) {
                res_trial = evaluate(trial, rt);
                if (res_trial < res || res_trial < 1e-12)
                    break;
            }
            lambda *= 0.5;
        }
        if (!(res_trial < std::numeric_limits<double>::infinity()))
            break;
        A = trial;
        res = evaluate(A, r);
    }
    sol.iterations = it;
    sol.residual = res;
    if (!(res < 1e-10))
        throw SolverError("junction Newton did not converge (residual " + std::to_string(res) + ")", -1, -1, nan);
    evaluate(A, r);
    double qsum = 0.0;
    for (int k = 1; k < n; ++k)
        qsum += Q[k];
    sol.ends.push_back({A[0], qsum});
    for (int k = 1; k < n; ++k)
        sol.ends.push_back({A[k], Q[k]});
    return sol;
}

Solver::Solver(ArterialNetwork net, SolverConfig cfg)
    : net_(std::move(net)), cfg_(cfg), grid_(make_grid(net_, cfg_)), inflow_(net_.heart), parents_(net_.parents())
{
    const auto report = validate_network(net_);
    if (!report.empty())
        throw ConfigError("invalid network:\n" + format_report(report));
    const std::size_t ns = net_.segments.size();
    k1_.resize(ns);
    k2_.resize(ns);
    u1_.resize(ns);
    slopeA_.resize(ns);
    slopeQ_.resize(ns);
    fluxA_.resize(ns);
    fluxQ_.resize(ns);
    head_.resize(ns);
    tail_.resize(ns);
    for (std::size_t s = 0; s < ns; ++s) {
        const int n = grid_.segments[s].cells;
        for (auto* v : {&k1_, &k2_, &u1_}) {
            (*v)[s].A.resize(n);
            (*v)[s].Q.resize(n);
        }
        slopeA_[s].resize(n);
        slopeQ_[s].resize(n);
        fluxA_[s].resize(n + 1);
        fluxQ_[s].resize(n + 1);
    }
}

double Solver::inlet_flow(double t) const
{
    return cfg_.heart_inflow ? inflow_(t) : 0.0;
}

SolverState Solver::rest_state() const
{
    SolverState s;
    for (const auto& g : grid_.segments)
        s.segments.push_back({g.A0, Vec(g.cells, 0.0)});
    for (const auto& [leaf, bed] : net_.beds)
        s.bed_pressure[leaf] = bed.outflow_pressure;
    return s;
}

double Solver::lumped_start_pressure() const
{
    double conductance = 0.0, weighted_pout = 0.0, compliance = 0.0;
    for (const auto& [leaf, bed] : net_.beds) {
        const double g = 1.0 / bed.total_resistance();
        conductance += g;
        weighted_pout += g * bed.outflow_pressure;
        compliance += bed.compliance;
    }
    const double p_out = weighted_pout / conductance;
    if (!cfg_.heart_inflow || net_.heart.stroke_volume == 0.0)
        return p_out;
    for (const auto& g : grid_.segments)
        for (int i = 0; i < g.cells; ++i)
            compliance += 2.0 * g.sqrtA0[i] / g.beta[i] * g.dx;

    // Two-element model C dp/dt = Q_in - (p - p_out) G. One beat from p = p_out
    // gives the forced response b; the periodic start value solves p0 = decay p0 + b.
    const double T = inflow_.period();
    const int n = 4000;
    const double h = T / n;
    const double tau = compliance / conductance;
    const double decay = std::exp(-h / tau);
    double p = 0.0;
    for (int i = 0; i < n; ++i) {
        const double q = 0.5 * (inflow_(i * h) + inflow_((i + 1) * h));
        p = decay * p + (1.0 - decay) * q / conductance;
    }
    return p_out + p / (1.0 - std::exp(-T / tau));
}

SolverState Solver::lumped_state() const
{
    const double p_start = lumped_start_pressure();
    std::vector<double> seg_flow(net_.segments.size(), 0.0);
    SolverState s;
    for (const auto& [leaf, bed] : net_.beds) {
        const double q = (p_start - bed.outflow_pressure) / bed.total_resistance();
        s.bed_pressure[leaf] = bed.outflow_pressure + q * bed.distal_resistance;
        for (int seg = leaf; seg >= 0; seg = parents_[seg])
            seg_flow[seg] += q;
    }
    for (std::size_t k = 0; k < grid_.segments.size(); ++k) {
        const auto& g = grid_.segments[k];
        SegmentState st;
        for (int i = 0; i < g.cells; ++i)
            st.A.push_back(tube_law_area(p_start, {g.A0[i], g.beta[i], g.gamma[i], g.external_pressure}));
        st.Q.assign(g.cells, seg_flow[k]);
        s.segments.push_back(std::move(st));
    }
    return s;
}

double Solver::stable_timestep(const SolverState& s) const
{
    double dt = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < grid_.segments.size(); ++k) {
        const auto& g = grid_.segments[k];
        if (!(g.dx > 0.0))
            throw ConfigError("degenerate grid: non-positive cell width");
        for (int i = 0; i < g.cells; ++i) {
            double lo, hi;
            eigenvalues(s.segments[k].A[i], s.segments[k].Q[i], g.beta[i], net_.blood, lo, hi);
            dt = std::min(dt, g.dx / std::max(std::abs(lo), std::abs(hi)));
        }
    }
    return grid_.cfl * dt;
}

double stable_timestep(const Solver& solver, const SolverState& s)
{
    return solver.stable_timestep(s);
}

void Solver::stage(const std::vector<SegmentState>& u, const std::map<int, double>& beds, double t, double dt,
                   std::vector<SegmentState>& rhs, Vec& in_flux, Vec& out_flux)
{
    (void)dt;
    const auto& b = net_.blood;
    const std::size_t ns = grid_.segments.size();

    for (std::size_t k = 0; k < ns; ++k) {
        const auto& g = grid_.segments[k];
        const auto& A = u[k].A;
        const auto& Q = u[k].Q;
        const int n = g.cells;
        auto& sa = slopeA_[k];
        auto& sq = slopeQ_[k];
        auto dA = [&](int i) { return A[i] - g.A0[i]; };
        for (int i = 0; i < n; ++i) {
            const int lo = std::clamp(i - 1, 0, n - 3);
            const int mid = lo + 1;
            // Central stencil inside, one-sided at the first and last cell.
            const double a1 = dA(mid) - dA(lo), a2 = dA(mid + 1) - dA(mid);
            const double q1 = Q[mid] - Q[lo], q2 = Q[mid + 1] - Q[mid];
            sa[i] = limit(cfg_.limiter, a1, a2);
            sq[i] = limit(cfg_.limiter, q1, q2);
            if (g.A0_face[i] + dA(i) - 0.5 * sa[i] <= 0.0 || g.A0_face[i + 1] + dA(i) + 0.5 * sa[i] <= 0.0)
                sa[i] = sq[i] = 0.0;
        }
        auto& fa = fluxA_[k];
        auto& fq = fluxQ_[k];
        for (int j = 1; j < n; ++j) {
            const double AL = g.A0_face[j] + dA(j - 1) + 0.5 * sa[j - 1];
            const double QL = Q[j - 1] + 0.5 * sq[j - 1];
            const double AR = g.A0_face[j] + dA(j) - 0.5 * sa[j];
            const double QR = Q[j] - 0.5 * sq[j];
            const Flux f = hll(AL, QL, AR, QR, g.beta_face[j], b);
            fa[j] = f.a;
            fq[j] = f.q;
        }
        const auto& seg = net_.segments[k];
        head_[k] = {g.A0_face[0] + dA(0) - 0.5 * sa[0], Q[0] - 0.5 * sq[0], seg.section(0.0)};
        tail_[k] = {g.A0_face[n] + dA(n - 1) + 0.5 * sa[n - 1], Q[n - 1] + 0.5 * sq[n - 1],
                    seg.section(seg.length)};
    }

    auto set_head = [&](int k, const BoundaryState& st) {
        const Flux f = physical_flux(st.area, st.flow, grid_.segments[k].beta_face[0], b);
        fluxA_[k][0] = f.a;
        fluxQ_[k][0] = f.q;
    };
    auto set_tail = [&](int k, const BoundaryState& st) {
        const int n = grid_.segments[k].cells;
        const Flux f = physical_flux(st.area, st.flow, grid_.segments[k].beta_face[n], b);
        fluxA_[k][n] = f.a;
        fluxQ_[k][n] = f.q;
    };

    const int root = net_.root;
    try {
        set_head(root, inlet_boundary(head_[root], inlet_flow(t), b));
    } catch (const SolverError& e) {
        throw SolverError(e.what(), root, 0, t);
    }
    std::vector<EndState> kids;
    for (std::size_t k = 0; k < ns; ++k) {
        const int seg = static_cast<int>(k);
        if (net_.is_leaf(seg)) {
            try {
                set_tail(seg, windkessel_boundary(tail_[k], net_.beds.at(seg), beds.at(seg), b));
            } catch (const SolverError& e) {
                throw SolverError(e.what(), seg, grid_.segments[k].cells - 1, t);
            }
            continue;
        }
        kids.clear();
        for (int c : net_.children[k])
            kids.push_back(head_[c]);
        try {
            const auto sol = junction_coupling(tail_[k], kids, b, cfg_.junction_pressure);
            set_tail(seg, sol.ends[0]);
            for (std::size_t c = 0; c < net_.children[k].size(); ++c)
                set_head(net_.children[k][c], sol.ends[c + 1]);
        } catch (const SolverError& e) {
            throw SolverError(e.what(), seg, grid_.segments[k].cells - 1, t);
        }
    }

    const double kr = b.friction_coefficient();
    const double rho = b.density;
    for (std::size_t k = 0; k < ns; ++k) {
        const auto& g = grid_.segments[k];
        const auto& A = u[k].A;
        const auto& Q = u[k].Q;
        const auto& fa = fluxA_[k];
        const auto& fq = fluxQ_[k];
        const bool tapered = net_.segments[k].tapered();
        for (int i = 0; i < g.cells; ++i) {
            rhs[k].A[i] = -(fa[i + 1] - fa[i]) / g.dx;
            double src = -kr * Q[i] / A[i];
            if (tapered)
                src -= (A[i] / rho)
                       * (g.dbeta_dx[i] * ((2.0 / 3.0) * std::sqrt(A[i]) - g.sqrtA0[i]) - g.beta[i] * g.dsqrtA0_dx[i]);
            rhs[k].Q[i] = -(fq[i + 1] - fq[i]) / g.dx + src;
        }
        in_flux[k] = fa[0];
        out_flux[k] = fa[g.cells];
    }
}

void Solver::viscous_correction(std::vector<SegmentState>& u, double dt) const
{
    const double rho = net_.blood.density;
    Vec lower, diag, upper, rhs, kface;
    for (std::size_t k = 0; k < grid_.segments.size(); ++k) {
        const auto& g = grid_.segments[k];
        if (net_.segments[k].wall_viscosity <= 0.0)
            continue;
        const int n = g.cells;
        auto& A = u[k].A;
        auto& Q = u[k].Q;
        kface.assign(n + 1, 0.0);
        for (int j = 1; j < n; ++j)
            kface[j] = g.gamma_face[j] / std::sqrt(0.5 * (A[j - 1] + A[j]));
        lower.assign(n, 0.0);
        diag.assign(n, 0.0);
        upper.assign(n, 0.0);
        rhs = Q;
        for (int i = 0; i < n; ++i) {
            const double a = dt * A[i] / (rho * g.dx * g.dx);
            lower[i] = -a * kface[i];
            upper[i] = -a * kface[i + 1];
            diag[i] = 1.0 + a * (kface[i] + kface[i + 1]);
        }
        // Thomas algorithm.
        for (int i = 1; i < n; ++i) {
            const double m = lower[i] / diag[i - 1];
            diag[i] -= m * upper[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        Q[n - 1] = rhs[n - 1] / diag[n - 1];
        for (int i = n - 2; i >= 0; --i)
            Q[i] = (rhs[i] - upper[i] * Q[i + 1]) / diag[i];
    }
}

SolverState Solver::advance(const SolverState& s, double dt, StepFluxes* fluxes)
{
    if (!(dt > 0.0) || !std::isfinite(dt))
        throw ConfigError("time step must be positive and finite");
    const std::size_t ns = grid_.segments.size();
    Vec in1(ns), out1(ns), in2(ns), out2(ns);
    for (std::size_t k = 0; k < ns; ++k)
        check_finite(s.segments[k], static_cast<int>(k), s.time);

    stage(s.segments, s.bed_pressure, s.time, dt, k1_, in1, out1);
    for (std::size_t k = 0; k < ns; ++k) {
        const int n = grid_.segments[k].cells;
        for (int i = 0; i < n; ++i) {
            u1_[k].A[i] = s.segments[k].A[i] + dt * k1_[k].A[i];
            u1_[k].Q[i] = s.segments[k].Q[i] + dt * k1_[k].Q[i];
        }
        check_finite(u1_[k], static_cast<int>(k), s.time + dt);
    }
    // Bed pressures follow the same two stages as the vessel state so the
    // outlet coupling stays second order in time.
    std::map<int, double> beds1;
    for (const auto& [leaf, bed] : net_.beds)
        beds1[leaf] = bed_stage(bed, s.bed_pressure.at(leaf), out1[leaf], dt);
    stage(u1_, beds1, s.time + dt, dt, k2_, in2, out2);

    SolverState next;
    next.segments.resize(ns);
    next.time = s.time + dt;
    for (std::size_t k = 0; k < ns; ++k) {
        const int n = grid_.segments[k].cells;
        auto& st = next.segments[k];
        st.A.resize(n);
        st.Q.resize(n);
        for (int i = 0; i < n; ++i) {
            st.A[i] = s.segments[k].A[i] + 0.5 * dt * (k1_[k].A[i] + k2_[k].A[i]);
            st.Q[i] = s.segments[k].Q[i] + 0.5 * dt * (k1_[k].Q[i] + k2_[k].Q[i]);
        }
        check_finite(st, static_cast<int>(k), next.time);
    }

    double outflow = 0.0;
    for (const auto& [leaf, bed] : net_.beds) {
        outflow += 0.5 * (out1[leaf] + out2[leaf]);
        const double p0 = s.bed_pressure.at(leaf);
        const double p2 = bed_stage(bed, beds1.at(leaf), out2[leaf], dt);
        next.bed_pressure[leaf] = 0.5 * (p0 + p2);
    }
    if (cfg_.viscoelastic)
        viscous_correction(next.segments, dt);
    if (fluxes) {
        fluxes->inflow = 0.5 * dt * (in1[net_.root] + in2[net_.root]);
        fluxes->outflow = dt * outflow;
    }
    return next;
}

SolverState advance_step(Solver& solver, const SolverState& s, double dt, StepFluxes* fluxes)
{
    return solver.advance(s, dt, fluxes);
}

double Solver::volume(const SolverState& s) const
{
    double v = 0.0;
    for (std::size_t k = 0; k < grid_.segments.size(); ++k) {
        double seg = 0.0;
        for (double a : s.segments[k].A)
            seg += a;
        v += seg * grid_.segments[k].dx;
    }
    return v;
}

double Solver::sample(const SolverState& s, int segment, double position, SignalKind kind) const
{
    const auto& g = grid_.segments.at(segment);
    const auto& seg = net_.segments.at(segment);
    const auto& st = s.segments.at(segment);
    const double x = std::clamp(position, 0.0, 1.0) * seg.length;
    const double f = x / g.dx - 0.5;
    const int i0 = std::clamp(static_cast<int>(std::floor(f)), 0, g.cells - 2);
    const double w = f - i0;
    const double A = (1.0 - w) * st.A[i0] + w * st.A[i0 + 1];
    const double Q = (1.0 - w) * st.Q[i0] + w * st.Q[i0 + 1];
    switch (kind) {
    case SignalKind::area:
    case SignalKind::ppg_proxy: return A;
    case SignalKind::flow: return Q;
    case SignalKind::pressure: {
        const auto wall = seg.section(x);
        double p = elastic_pressure(A, wall);
        if (cfg_.viscoelastic && wall.gamma > 0.0) {
            const double dQdx = (st.Q[i0 + 1] - st.Q[i0]) / g.dx;
            p -= wall.gamma / std::sqrt(A) * dQdx;
        }
        return p;
    }
    }
    return nan;
}

WaveformRecord extract_ppg(const WaveformRecord& area)
{
    if (area.samples.empty())
        throw SignalError("empty area waveform");
    const auto [lo, hi] = std::minmax_element(area.samples.begin(), area.samples.end());
    const double mn = *lo, mx = *hi;
    if (!(mx > mn))
        throw SignalError("constant area waveform: PPG proxy undefined");
    WaveformRecord out = area;
    out.kind = SignalKind::ppg_proxy;
    for (auto& v : out.samples)
        v = (v - mn) / (mx - mn);
    // Pin the extremes exactly.
    out.samples[lo - area.samples.begin()] = 0.0;
    out.samples[hi - area.samples.begin()] = 1.0;
    return out;
}

SimulationResult simulate(const ArterialNetwork& net, const SolverConfig& cfg)
{
    if (!(cfg.sample_rate > 0.0))
        throw ConfigError("sample rate must be positive");
    if (cfg.max_cycles < 1)
        throw ConfigError("max_cycles must be at least 1");
    Solver solver(net, cfg);
    const auto& sites = solver.network().sites;
    const double period = solver.inflow().period();
    const std::size_t n_samples = sample_count(period, cfg.sample_rate);

    SolverState state = solver.initial_state();
    std::vector<Vec> current(sites.size(), Vec(n_samples)), previous;
    SimulationResult result;
    auto& diag = result.diagnostics;

    auto sample_all = [&](const SolverState& s, Vec& out) {
        for (std::size_t k = 0; k < sites.size(); ++k) {
            const auto kind = sites[k].kind == SignalKind::ppg_proxy ? SignalKind::area : sites[k].kind;
            out[k] = solver.sample(s, sites[k].segment, sites[k].position, kind);
        }
    };

    Vec before(sites.size()), after(sites.size());
    for (int cycle = 0; cycle < cfg.max_cycles; ++cycle) {
        const double t0 = cycle * period;
        const double t1 = (cycle + 1) * period;
        state.time = t0;
        const double v0 = solver.volume(state);
        double inflow = 0.0;
        sample_all(state, before);
        std::size_t next_sample = 0;
        auto record_until = [&](double t_lo, double t_hi, bool last) {
            while (next_sample < n_samples) {
                const double ts = t0 + static_cast<double>(next_sample) / cfg.sample_rate;
                if (ts > t_hi && !(last && next_sample + 1 == n_samples))
                    break;
                const double w = t_hi > t_lo ? std::clamp((ts - t_lo) / (t_hi - t_lo), 0.0, 1.0) : 1.0;
                for (std::size_t k = 0; k < sites.size(); ++k)
                    current[k][next_sample] = (1.0 - w) * before[k] + w * after[k];
                ++next_sample;
            }
        };
        while (state.time < t1) {
            double dt = solver.stable_timestep(state);
            bool last = false;
            if (state.time + dt >= t1 - 1e-12 * period) {
                dt = t1 - state.time;
                last = true;
            }
            StepFluxes fl;
            SolverState next = solver.advance(state, dt, &fl);
            if (last)
                next.time = t1;
            inflow += fl.inflow;
            ++diag.steps;
            sample_all(next, after);
            record_until(state.time, next.time, false);
            state = std::move(next);
            before = after;
            if (last)
                break;
        }
        diag.cycles = cycle + 1;
        diag.cycle_volume_drift = solver.volume(state) - v0;
        diag.cycle_inflow = inflow;

        if (!previous.empty()) {
            double num = 0.0, den = 0.0;
            for (std::size_t k = 0; k < sites.size(); ++k)
                for (std::size_t i = 0; i < n_samples; ++i) {
                    const double d = current[k][i] - previous[k][i];
                    num += d * d;
                    den += current[k][i] * current[k][i];
                }
            diag.residual = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
            diag.residual_history.push_back(diag.residual);
            if (diag.residual < cfg.tolerance) {
                diag.converged = true;
                break;
            }
        }
        previous = current;
    }
    if (!diag.converged)
        diag.warnings.push_back("periodic convergence not reached after " + std::to_string(diag.cycles)
                                + " cycles (residual " + std::to_string(diag.residual) + ")");

    for (std::size_t k = 0; k < sites.size(); ++k) {
        const auto& site = sites[k];
        WaveformRecord rec;
        rec.site = site.name;
        rec.kind = site.kind == SignalKind::ppg_proxy ? SignalKind::area : site.kind;
        rec.segment = site.segment;
        rec.position = site.position;
        rec.samples = current[k];
        rec.sampling_rate = cfg.sample_rate;
        rec.beat_period = period;
        if (site.kind == SignalKind::ppg_proxy) {
            try {
                rec = extract_ppg(rec);
            } catch (const SignalError&) {
                diag.warnings.push_back("site '" + site.name + "': constant area, PPG proxy set to zero");
                rec.kind = SignalKind::ppg_proxy;
                std::fill(rec.samples.begin(), rec.samples.end(), 0.0);
            }
        }
        result.waveforms[site.name] = std::move(rec);
    }
    return result;
}

} // namespace hemosbi
