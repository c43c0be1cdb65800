#pragma once

#include "hemosbi/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace hemosbi {

struct BloodProperties {
    double density = 1060.0;      // kg/m^3
    double viscosity = 4.0e-3;    // Pa s
    double coriolis = 1.0;        // alpha
    double profile_shape = 9.0;   // gamma_nu

    /// Friction coefficient K_R in the momentum source -K_R Q/A.
    double friction_coefficient() const { return 2.0 * (viscosity / density) * (profile_shape + 2.0); }
};

/// Local wall properties at one axial position.
struct WallSection {
    double reference_area;     // A0 (m^2)
    double beta;               // elastic coefficient (Pa/m)
    double gamma;              // viscous coefficient (Pa s/m)
    double external_pressure;  // Pa
};

/// Visco-elastic tapered tube. The reference radius varies linearly from
/// the proximal to the distal end; wall thickness and moduli are uniform.
struct VesselSegment {
    std::string name;
    double length = 0.0;           // m
    double radius_proximal = 0.0;  // m
    double radius_distal = 0.0;    // m
    double wall_thickness = 0.0;   // h0 (m)
    double elastic_modulus = 0.0;  // E (Pa)
    double wall_viscosity = 0.0;   // phi_w (Pa s)
    double external_pressure = 0.0;
    bool proximal_aorta = false;   // length scaled by the population model

    double reference_radius(double x) const;
    double reference_area(double x) const;
    double beta(double x) const;
    double gamma(double x) const;
    double radius_slope() const { return (radius_distal - radius_proximal) / length; }
    WallSection section(double x) const;
    bool tapered() const { return radius_proximal != radius_distal; }
};

struct WindkesselBed {
    double proximal_resistance = 0.0;  // R1 (Pa s/m^3)
    double distal_resistance = 0.0;    // R2 (Pa s/m^3)
    double compliance = 0.0;           // C (m^3/Pa)
    double outflow_pressure = 0.0;     // P_out (Pa)

    double total_resistance() const { return proximal_resistance + distal_resistance; }
};

struct HeartFunction {
    double heart_rate = 75.0;          // beats/min
    double stroke_volume = 70e-6;      // m^3
    double ejection_time = 0.3;        // LVET (s)
    double peak_flow_time = 0.08;      // PFT (s)
    double reflected_fraction = 0.0;   // RFV

    double period() const { return 60.0 / heart_rate; }
    /// Throws DomainError on invariant violation.
    void validate() const;
};

enum class SignalKind { pressure, ppg_proxy, area, flow };

std::string to_string(SignalKind kind);
SignalKind signal_kind_from_string(const std::string& s);

struct MeasurementSite {
    std::string name;
    int segment = 0;
    double position = 0.0;  // z/L in [0, 1]
    SignalKind kind = SignalKind::pressure;
};

/// Sites used for biomarker derivation (names refer to measurement sites).
struct BiomarkerSites {
    std::string root_pressure;
    std::string pwv_proximal;
    std::string pwv_distal;
};

struct ArterialNetwork {
    std::string name;
    std::vector<VesselSegment> segments;
    std::vector<std::vector<int>> children;
    int root = 0;
    HeartFunction heart;
    std::map<int, WindkesselBed> beds;
    BloodProperties blood;
    std::vector<MeasurementSite> sites;
    BiomarkerSites biomarkers;

    bool is_leaf(int segment) const { return children.at(segment).empty(); }
    std::vector<int> parents() const;  // -1 for the root
    std::vector<int> leaves() const;
    const MeasurementSite& site(const std::string& name) const;
    int find_segment(const std::string& name) const;
    /// Axial distance (m) from the root inlet to a site, following the tree.
    double distance_from_root(const MeasurementSite& site) const;
};

struct Violation {
    int segment;  // -1 when not tied to a single segment
    std::string message;
};

using ValidationReport = std::vector<Violation>;

double tube_law_pressure(double area, double dA_dt, const WallSection& wall);
double tube_law_pressure(double area, double dA_dt, const VesselSegment& seg, double x = 0.0);

/// Inverse of the elastic tube law.
double tube_law_area(double pressure, const WallSection& wall);

double wave_speed(double area, const WallSection& wall, const BloodProperties& blood);
double wave_speed(double area, const VesselSegment& seg, const BloodProperties& blood, double x = 0.0);

ValidationReport validate_network(const ArterialNetwork& net);
std::string format_report(const ValidationReport& report);

} // namespace hemosbi
