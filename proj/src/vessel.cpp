#include "hemosbi/vessel.hpp"

#include <cmath>
#include <numbers>
#include <queue>
#include <sstream>

namespace hemosbi {

namespace {

constexpr double sqrt_pi = 1.7724538509055160273;

} // namespace

double VesselSegment::reference_radius(double x) const
{
    return radius_proximal + (radius_distal - radius_proximal) * (x / length);
}

double VesselSegment::reference_area(double x) const
{
    const double r = reference_radius(x);
    return std::numbers::pi * r * r;
}

double VesselSegment::beta(double x) const
{
    return (4.0 / 3.0) * sqrt_pi * elastic_modulus * wall_thickness / reference_area(x);
}

double VesselSegment::gamma(double x) const
{
    return (2.0 / 3.0) * sqrt_pi * wall_viscosity * wall_thickness / reference_area(x);
}

WallSection VesselSegment::section(double x) const
{
    return {reference_area(x), beta(x), gamma(x), external_pressure};
}

void HeartFunction::validate() const
{
    if (!(heart_rate > 0.0))
        throw DomainError("heart rate must be positive");
    // Zero stroke volume is accepted and means no excitation.
    if (!(stroke_volume >= 0.0))
        throw DomainError("stroke volume must be non-negative");
    if (!(peak_flow_time > 0.0 && peak_flow_time < ejection_time))
        throw DomainError("peak flow time must lie in (0, LVET)");
    if (!(ejection_time < period()))
        throw DomainError("ejection time must be shorter than the beat period");
    if (!(reflected_fraction >= 0.0 && reflected_fraction < 1.0))
        throw DomainError("reflected fraction must lie in [0, 1)");
}

std::string to_string(SignalKind kind)
{
    switch (kind) {
    case SignalKind::pressure: return "pressure";
    case SignalKind::ppg_proxy: return "ppg_proxy";
    case SignalKind::area: return "area";
    case SignalKind::flow: return "flow";
    }
    return "unknown";
}

SignalKind signal_kind_from_string(const std::string& s)
{
    if (s == "pressure") return SignalKind::pressure;
    if (s == "ppg_proxy" || s == "ppg") return SignalKind::ppg_proxy;
    if (s == "area") return SignalKind::area;
    if (s == "flow") return SignalKind::flow;
    throw ConfigError("unknown signal kind '" + s + "'");
}

std::vector<int> ArterialNetwork::parents() const
{
    std::vector<int> parent(segments.size(), -1);
    for (std::size_t p = 0; p < children.size(); ++p)
        for (int c : children[p])
            if (c >= 0 && c < static_cast<int>(segments.size()))
                parent[c] = static_cast<int>(p);
    return parent;
}

std::vector<int> ArterialNetwork::leaves() const
{
    std::vector<int> out;
    for (std::size_t i = 0; i < segments.size(); ++i)
        if (children[i].empty())
            out.push_back(static_cast<int>(i));
    return out;
}

const MeasurementSite& ArterialNetwork::site(const std::string& site_name) const
{
    for (const auto& s : sites)
        if (s.name == site_name)
            return s;
    throw ConfigError("unknown measurement site '" + site_name + "'");
}

int ArterialNetwork::find_segment(const std::string& seg_name) const
{
    for (std::size_t i = 0; i < segments.size(); ++i)
        if (segments[i].name == seg_name)
            return static_cast<int>(i);
    return -1;
}

double ArterialNetwork::distance_from_root(const MeasurementSite& s) const
{
    const auto parent = parents();
    double d = s.position * segments.at(s.segment).length;
    int p = parent[s.segment];
    int guard = 0;
    while (p >= 0 && guard++ < static_cast<int>(segments.size())) {
        d += segments[p].length;
        p = parent[p];
    }
    return d;
}

double tube_law_pressure(double area, double dA_dt, const WallSection& wall)
{
    if (!(area > 0.0))
        throw DomainError("tube law requires a positive area");
    const double sa = std::sqrt(area);
    return wall.external_pressure + wall.beta * (sa - std::sqrt(wall.reference_area))
           + wall.gamma / sa * dA_dt;
}

double tube_law_pressure(double area, double dA_dt, const VesselSegment& seg, double x)
{
    return tube_law_pressure(area, dA_dt, seg.section(x));
}

double tube_law_area(double pressure, const WallSection& wall)
{
    const double s = std::sqrt(wall.reference_area) + (pressure - wall.external_pressure) / wall.beta;
    if (!(s > 0.0))
        throw DomainError("pressure below collapse limit of the tube law");
    return s * s;
}

double wave_speed(double area, const WallSection& wall, const BloodProperties& blood)
{
    if (!(area > 0.0))
        throw DomainError("wave speed requires a positive area");
    return std::sqrt(wall.beta / (2.0 * blood.density)) * std::pow(area, 0.25);
}

double wave_speed(double area, const VesselSegment& seg, const BloodProperties& blood, double x)
{
    return wave_speed(area, seg.section(x), blood);
}

ValidationReport validate_network(const ArterialNetwork& net)
{
    ValidationReport report;
    const int n = static_cast<int>(net.segments.size());
    auto add = [&](int seg, std::string msg) { report.push_back({seg, std::move(msg)}); };

    if (n == 0) {
        add(-1, "network has no segments");
        return report;
    }
    const auto& b = net.blood;
    if (!(b.density > 0.0)) add(-1, "blood density must be positive");
    if (!(b.viscosity >= 0.0)) add(-1, "blood viscosity must be non-negative");
    if (!(b.coriolis >= 1.0)) add(-1, "Coriolis coefficient must be >= 1");
    if (!(b.profile_shape > 0.0)) add(-1, "velocity profile shape must be positive");

    try {
        net.heart.validate();
    } catch (const DomainError& e) {
        add(-1, std::string("heart function: ") + e.what());
    }

    for (int i = 0; i < n; ++i) {
        const auto& s = net.segments[i];
        if (!(s.length > 0.0)) add(i, "length must be positive");
        if (!(s.radius_proximal > 0.0 && s.radius_distal > 0.0)) add(i, "reference radius must be positive");
        if (!(s.wall_thickness > 0.0)) add(i, "wall thickness must be positive");
        if (!(s.elastic_modulus > 0.0)) add(i, "elastic modulus must be positive");
        if (!(s.wall_viscosity >= 0.0)) add(i, "wall viscosity must be non-negative");
    }

    // Topology: a tree rooted at net.root where every other node has exactly one parent.
    bool tree_ok = static_cast<int>(net.children.size()) == n && net.root >= 0 && net.root < n;
    std::vector<int> parent_count(n, 0);
    if (tree_ok) {
        for (int p = 0; p < n; ++p)
            for (int c : net.children[p]) {
                if (c < 0 || c >= n) {
                    add(p, "child index out of range");
                    tree_ok = false;
                } else {
                    ++parent_count[c];
                }
            }
    }
    if (tree_ok) {
        if (parent_count[net.root] != 0)
            tree_ok = false;
        for (int i = 0; i < n && tree_ok; ++i)
            if (i != net.root && parent_count[i] != 1)
                tree_ok = false;
    }
    if (tree_ok) {
        std::vector<char> seen(n, 0);
        std::queue<int> q;
        q.push(net.root);
        seen[net.root] = 1;
        int visited = 0;
        while (!q.empty()) {
            const int p = q.front();
            q.pop();
            ++visited;
            for (int c : net.children[p]) {
                if (seen[c]) {
                    tree_ok = false;
                    break;
                }
                seen[c] = 1;
                q.push(c);
            }
        }
        if (visited != n)
            tree_ok = false;
    }
    if (!tree_ok)
        add(-1, "not a tree: topology must be a connected tree rooted at the heart");

    if (static_cast<int>(net.children.size()) == n) {
        for (int i = 0; i < n; ++i) {
            const bool leaf = net.children[i].empty();
            const bool has_bed = net.beds.count(i) > 0;
            if (leaf && !has_bed) add(i, "missing outlet bed on leaf segment");
            if (!leaf && has_bed) add(i, "outlet bed attached to an internal segment");
        }
    }
    for (const auto& [seg, bed] : net.beds) {
        if (seg < 0 || seg >= n) {
            add(seg, "outlet bed references unknown segment");
            continue;
        }
        if (!(bed.proximal_resistance >= 0.0 && bed.distal_resistance >= 0.0))
            add(seg, "bed resistances must be non-negative");
        if (!(bed.compliance > 0.0)) add(seg, "bed compliance must be positive");
    }
    for (const auto& site : net.sites) {
        if (site.segment < 0 || site.segment >= n)
            add(site.segment, "measurement site '" + site.name + "' references unknown segment");
        if (!(site.position >= 0.0 && site.position <= 1.0))
            add(site.segment, "measurement site '" + site.name + "' position outside [0, 1]");
    }
    return report;
}

std::string format_report(const ValidationReport& report)
{
    std::ostringstream os;
    for (const auto& v : report) {
        if (v.segment >= 0)
            os << "segment " << v.segment << ": ";
        os << v.message << '\n';
    }
    return os.str();
}

} // namespace hemosbi
