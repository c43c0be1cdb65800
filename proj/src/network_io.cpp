#include "hemosbi/network_io.hpp"

#include <fstream>
#include <set>

namespace hemosbi {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object())
        throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

double req(const json& j, const char* key, const std::string& where)
{
    if (!j.contains(key))
        throw ConfigError(where + ": missing '" + key + "'");
    if (!j.at(key).is_number())
        throw ConfigError(where + ": '" + key + "' must be a number");
    return j.at(key).get<double>();
}

double opt(const json& j, const char* key, double fallback)
{
    return j.contains(key) ? j.at(key).get<double>() : fallback;
}

} // namespace

json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open " + path.string());
    try {
        return json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

HeartFunction parse_heart(const json& j)
{
    check_keys(j, {"heart_rate_bpm", "stroke_volume_mL", "lvet_s", "pft_s", "rfv"}, "heart");
    HeartFunction h;
    h.heart_rate = req(j, "heart_rate_bpm", "heart");
    h.stroke_volume = req(j, "stroke_volume_mL", "heart") * units::mL;
    h.ejection_time = req(j, "lvet_s", "heart");
    h.peak_flow_time = req(j, "pft_s", "heart");
    h.reflected_fraction = opt(j, "rfv", 0.0);
    return h;
}

json heart_to_json(const HeartFunction& h)
{
    return {{"heart_rate_bpm", h.heart_rate},
            {"stroke_volume_mL", h.stroke_volume / units::mL},
            {"lvet_s", h.ejection_time},
            {"pft_s", h.peak_flow_time},
            {"rfv", h.reflected_fraction}};
}

ArterialNetwork parse_network(const json& j)
{
    check_keys(j, {"name", "blood", "heart", "segments", "beds", "sites", "biomarkers"}, "network");
    ArterialNetwork net;
    net.name = j.value("name", std::string("network"));

    if (j.contains("blood")) {
        const auto& b = j.at("blood");
        check_keys(b, {"density_kg_m3", "viscosity_Pa_s", "coriolis", "profile_shape"}, "blood");
        net.blood.density = opt(b, "density_kg_m3", net.blood.density);
        net.blood.viscosity = opt(b, "viscosity_Pa_s", net.blood.viscosity);
        net.blood.coriolis = opt(b, "coriolis", net.blood.coriolis);
        net.blood.profile_shape = opt(b, "profile_shape", net.blood.profile_shape);
    }
    if (!j.contains("heart"))
        throw ConfigError("network: missing 'heart'");
    net.heart = parse_heart(j.at("heart"));

    if (!j.contains("segments") || !j.at("segments").is_array() || j.at("segments").empty())
        throw ConfigError("network: 'segments' must be a non-empty array");
    const auto& segs = j.at("segments");
    std::vector<std::vector<std::string>> child_names;
    for (const auto& s : segs) {
        check_keys(s,
                   {"id", "length_m", "radius_m", "radius_proximal_m", "radius_distal_m", "wall_thickness_m",
                    "elastic_modulus_Pa", "wall_viscosity_Pa_s", "external_pressure_Pa", "children",
                    "proximal_aorta"},
                   "segment");
        VesselSegment seg;
        if (!s.contains("id") || !s.at("id").is_string())
            throw ConfigError("segment: missing string 'id'");
        seg.name = s.at("id").get<std::string>();
        const std::string where = "segment '" + seg.name + "'";
        seg.length = req(s, "length_m", where);
        if (s.contains("radius_m")) {
            if (s.contains("radius_proximal_m") || s.contains("radius_distal_m"))
                throw ConfigError(where + ": give either radius_m or proximal/distal radii");
            seg.radius_proximal = seg.radius_distal = req(s, "radius_m", where);
        } else {
            seg.radius_proximal = req(s, "radius_proximal_m", where);
            seg.radius_distal = req(s, "radius_distal_m", where);
        }
        seg.wall_thickness = req(s, "wall_thickness_m", where);
        seg.elastic_modulus = req(s, "elastic_modulus_Pa", where);
        seg.wall_viscosity = opt(s, "wall_viscosity_Pa_s", 0.0);
        seg.external_pressure = opt(s, "external_pressure_Pa", 0.0);
        seg.proximal_aorta = s.value("proximal_aorta", false);
        net.segments.push_back(seg);
        child_names.push_back(s.value("children", std::vector<std::string>{}));
    }
    const int n = static_cast<int>(net.segments.size());
    net.children.assign(n, {});
    std::vector<int> parent_count(n, 0);
    for (int i = 0; i < n; ++i)
        for (const auto& cname : child_names[i]) {
            const int c = net.find_segment(cname);
            if (c < 0)
                throw ConfigError("segment '" + net.segments[i].name + "': unknown child '" + cname + "'");
            net.children[i].push_back(c);
            ++parent_count[c];
        }
    // The root is the first segment without a parent; a cyclic file has none
    // and is reported by validate_network.
    net.root = 0;
    for (int i = 0; i < n; ++i)
        if (parent_count[i] == 0) {
            net.root = i;
            break;
        }

    if (j.contains("beds")) {
        for (auto it = j.at("beds").begin(); it != j.at("beds").end(); ++it) {
            const int seg = net.find_segment(it.key());
            if (seg < 0)
                throw ConfigError("beds: unknown segment '" + it.key() + "'");
            const auto& b = it.value();
            const std::string where = "bed '" + it.key() + "'";
            check_keys(b, {"R1_Pa_s_m3", "R2_Pa_s_m3", "C_m3_Pa", "P_out_Pa"}, where);
            WindkesselBed bed;
            bed.proximal_resistance = req(b, "R1_Pa_s_m3", where);
            bed.distal_resistance = req(b, "R2_Pa_s_m3", where);
            bed.compliance = req(b, "C_m3_Pa", where);
            bed.outflow_pressure = opt(b, "P_out_Pa", 0.0);
            net.beds[seg] = bed;
        }
    }
    if (j.contains("sites")) {
        for (const auto& s : j.at("sites")) {
            check_keys(s, {"name", "segment", "position", "kind"}, "site");
            MeasurementSite site;
            site.name = s.at("name").get<std::string>();
            const auto seg_name = s.at("segment").get<std::string>();
            site.segment = net.find_segment(seg_name);
            if (site.segment < 0)
                throw ConfigError("site '" + site.name + "': unknown segment '" + seg_name + "'");
            site.position = req(s, "position", "site '" + site.name + "'");
            site.kind = signal_kind_from_string(s.value("kind", std::string("pressure")));
            net.sites.push_back(site);
        }
    }
    if (j.contains("biomarkers")) {
        const auto& b = j.at("biomarkers");
        check_keys(b, {"root_pressure", "pwv_proximal", "pwv_distal"}, "biomarkers");
        net.biomarkers.root_pressure = b.value("root_pressure", std::string());
        net.biomarkers.pwv_proximal = b.value("pwv_proximal", std::string());
        net.biomarkers.pwv_distal = b.value("pwv_distal", std::string());
        for (const auto* name : {&net.biomarkers.root_pressure, &net.biomarkers.pwv_proximal,
                                 &net.biomarkers.pwv_distal})
            if (!name->empty())
                (void)net.site(*name);
    }
    return net;
}

ArterialNetwork load_network(const std::filesystem::path& path)
{
    return parse_network(read_json_file(path));
}

json network_to_json(const ArterialNetwork& net)
{
    json j;
    j["name"] = net.name;
    j["blood"] = {{"density_kg_m3", net.blood.density},
                  {"viscosity_Pa_s", net.blood.viscosity},
                  {"coriolis", net.blood.coriolis},
                  {"profile_shape", net.blood.profile_shape}};
    j["heart"] = heart_to_json(net.heart);
    j["segments"] = json::array();
    for (std::size_t i = 0; i < net.segments.size(); ++i) {
        const auto& s = net.segments[i];
        json js = {{"id", s.name},
                   {"length_m", s.length},
                   {"radius_proximal_m", s.radius_proximal},
                   {"radius_distal_m", s.radius_distal},
                   {"wall_thickness_m", s.wall_thickness},
                   {"elastic_modulus_Pa", s.elastic_modulus},
                   {"wall_viscosity_Pa_s", s.wall_viscosity},
                   {"external_pressure_Pa", s.external_pressure},
                   {"proximal_aorta", s.proximal_aorta}};
        std::vector<std::string> kids;
        for (int c : net.children.at(i))
            kids.push_back(net.segments.at(c).name);
        js["children"] = kids;
        j["segments"].push_back(js);
    }
    j["beds"] = json::object();
    for (const auto& [seg, b] : net.beds)
        j["beds"][net.segments.at(seg).name] = {{"R1_Pa_s_m3", b.proximal_resistance},
                                                {"R2_Pa_s_m3", b.distal_resistance},
                                                {"C_m3_Pa", b.compliance},
                                                {"P_out_Pa", b.outflow_pressure}};
    j["sites"] = json::array();
    for (const auto& s : net.sites)
        j["sites"].push_back({{"name", s.name},
                              {"segment", net.segments.at(s.segment).name},
                              {"position", s.position},
                              {"kind", to_string(s.kind)}});
    j["biomarkers"] = {{"root_pressure", net.biomarkers.root_pressure},
                       {"pwv_proximal", net.biomarkers.pwv_proximal},
                       {"pwv_distal", net.biomarkers.pwv_distal}};
    return j;
}

} // namespace hemosbi
