#pragma once

// Text formats: key=value configuration files, gain JSON, trajectory and
// dataset CSV.

#include "maglim/certify.hpp"
#include "maglim/error.hpp"
#include "maglim/fit.hpp"
#include "maglim/gain.hpp"
#include "maglim/plant.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace maglim {

// ---------------------------------------------------------------------------
// Formatting and scalar parsing
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal representation.
inline std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(std::string_view text, const std::string& what) {
    const std::string s = trim(text);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ParseError(what + ": expected a number, got '" + s + "'");
    return v;
}

inline std::uint64_t parse_u64(std::string_view text, const std::string& what) {
    const std::string s = trim(text);
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ParseError(what + ": expected a non-negative integer, got '" + s + "'");
    return v;
}

inline bool parse_bool(std::string_view text, const std::string& what) {
    const std::string s = trim(text);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ParseError(what + ": expected true/false, got '" + s + "'");
}

/// Comma-separated numbers.
inline std::vector<double> parse_list(std::string_view text, const std::string& what) {
    std::vector<double> out;
    std::string s(text);
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        out.push_back(parse_double(std::string_view(s).substr(start, comma - start), what));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline Vec2 parse_pair(std::string_view text, const std::string& what) {
    const auto v = parse_list(text, what);
    if (v.size() != 2) throw ParseError(what + ": expected two comma-separated numbers");
    return {v[0], v[1]};
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path + "'");
    out << content;
    if (!out) throw ParseError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// key=value files
// ---------------------------------------------------------------------------

/// `key = value` lines grouped under optional `[section]` headers. `#` starts
/// a comment. Keys before the first header belong to section "".
class KeyValueFile {
public:
    struct Entry {
        std::string value;
        std::size_t line = 0;
        mutable bool used = false;
    };

    static KeyValueFile parse(std::string_view text, const std::string& origin = "<input>") {
        KeyValueFile f;
        f.origin_ = origin;
        std::string section;
        std::size_t line_no = 0;
        std::istringstream in{std::string(text)};
        std::string raw;
        while (std::getline(in, raw)) {
            ++line_no;
            const auto hash = raw.find('#');
            const std::string line = trim(std::string_view(raw).substr(0, hash));
            if (line.empty()) continue;
            auto where = [&] { return origin + ":" + std::to_string(line_no); };
            if (line.front() == '[') {
                if (line.back() != ']') throw ParseError(where() + ": unterminated section header");
                section = trim(std::string_view(line).substr(1, line.size() - 2));
                f.sections_[section];
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ParseError(where() + ": expected key = value");
            const std::string key = trim(std::string_view(line).substr(0, eq));
            if (key.empty()) throw ParseError(where() + ": empty key");
            auto& sec = f.sections_[section];
            if (sec.count(key)) throw ParseError(where() + ": duplicate key '" + key + "'");
            sec[key] = Entry{trim(std::string_view(line).substr(eq + 1)), line_no};
        }
        return f;
    }

    static KeyValueFile load(const std::string& path) { return parse(read_file(path), path); }

    bool has_section(const std::string& s) const { return sections_.count(s) != 0; }

    const Entry* find(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        if (s == sections_.end()) return nullptr;
        const auto k = s->second.find(key);
        if (k == s->second.end()) return nullptr;
        k->second.used = true;
        return &k->second;
    }

    std::string context(const std::string& section, const std::string& key) const {
        const auto* e = find(section, key);
        std::string where = origin_;
        if (e) where += ":" + std::to_string(e->line);
        return where + ": " + (section.empty() ? key : section + "." + key);
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        const auto* e = find(section, key);
        return e ? parse_double(e->value, context(section, key)) : fallback;
    }
    double require_double(const std::string& section, const std::string& key) const {
        const auto* e = find(section, key);
        if (!e) throw ParseError(origin_ + ": missing key '" + key + "'");
        return parse_double(e->value, context(section, key));
    }
    std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const {
        const auto* e = find(section, key);
        return e ? parse_u64(e->value, context(section, key)) : fallback;
    }
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        const auto* e = find(section, key);
        return e ? parse_bool(e->value, context(section, key)) : fallback;
    }
    std::optional<std::vector<double>> get_list(const std::string& section, const std::string& key) const {
        const auto* e = find(section, key);
        if (!e) return std::nullopt;
        return parse_list(e->value, context(section, key));
    }
    std::optional<std::string> get_string(const std::string& section, const std::string& key) const {
        const auto* e = find(section, key);
        if (!e) return std::nullopt;
        return e->value;
    }

    /// Throws on any key of `section` that was never looked up.
    void reject_unused(const std::string& section) const {
        const auto s = sections_.find(section);
        if (s == sections_.end()) return;
        for (const auto& [key, e] : s->second)
            if (!e.used)
                throw ParseError(origin_ + ":" + std::to_string(e.line) + ": unknown key '" + key + "'" +
                                 (section.empty() ? "" : " in [" + section + "]"));
    }

    /// Throws on any section not in `known`.
    void reject_unknown_sections(const std::vector<std::string>& known) const {
        for (const auto& [name, _] : sections_) {
            bool ok = false;
            for (const auto& k : known) ok = ok || k == name;
            if (!ok) throw ParseError(origin_ + ": unknown section [" + name + "]");
        }
    }

private:
    std::string origin_;
    std::map<std::string, std::map<std::string, Entry>> sections_;
};

// ---------------------------------------------------------------------------
// Plant parameters
// ---------------------------------------------------------------------------

/// Reads the nine plant keys from `section` (all required), rejecting
/// unknown keys, then validates.
inline PlantParams plant_params_from(const KeyValueFile& f, const std::string& section = "") {
    PlantParams p;
    p.R_ohm = f.require_double(section, "R_ohm");
    p.L_H = f.require_double(section, "L_H");
    p.E_V = f.require_double(section, "E_V");
    p.omega_nom = f.require_double(section, "omega_nom_rad_s");
    p.V_nom = f.require_double(section, "V_nom_V");
    p.dt = f.require_double(section, "dt_s");
    p.I_max = f.require_double(section, "I_max_A");
    p.S_nom = f.require_double(section, "S_nom_VA");
    p.I_nom = f.require_double(section, "I_nom_A");
    f.reject_unused(section);
    p.validate();
    return p;
}

inline PlantParams parse_plant_params(std::string_view text, const std::string& origin = "<input>") {
    const auto f = KeyValueFile::parse(text, origin);
    f.reject_unknown_sections({""});
    return plant_params_from(f);
}

inline PlantParams load_plant_params(const std::string& path) { return parse_plant_params(read_file(path), path); }

inline std::string format_plant_params(const PlantParams& p) {
    std::ostringstream os;
    os << "R_ohm = " << fmt_double(p.R_ohm) << "\n"
       << "L_H = " << fmt_double(p.L_H) << "\n"
       << "E_V = " << fmt_double(p.E_V) << "\n"
       << "omega_nom_rad_s = " << fmt_double(p.omega_nom) << "\n"
       << "V_nom_V = " << fmt_double(p.V_nom) << "\n"
       << "dt_s = " << fmt_double(p.dt) << "\n"
       << "I_max_A = " << fmt_double(p.I_max) << "\n"
       << "S_nom_VA = " << fmt_double(p.S_nom) << "\n"
       << "I_nom_A = " << fmt_double(p.I_nom) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Gain JSON
// ---------------------------------------------------------------------------

using Json = nlohmann::ordered_json;

inline Json mat_to_json(const Mat2& m) {
    return Json::array({Json::array({m(0, 0), m(0, 1)}), Json::array({m(1, 0), m(1, 1)})});
}

inline Json certificate_json(const CertificateReport& rep) {
    Json j;
    j["feasible"] = rep.feasible;
    j["sigma_closed"] = rep.sigma_closed;
    j["margin"] = 1.0 - rep.sigma_closed;
    j["eig_lo"] = rep.eig_lo;
    j["eig_hi"] = rep.eig_hi;
    return j;
}

/// {"K": [[k11, k12], [k21, k22]], "certificate": {...}}. The certificate
/// block is the certify_gain report against `plant`, so uncertified gains are
/// written with "feasible": false.
inline Json gain_to_json(const Gain& g, const LinearPlant& plant) {
    Json j;
    j["K"] = mat_to_json(g.K);
    j["certificate"] = certificate_json(certify_gain(plant, g.K));
    return j;
}

/// Gain without a plant at hand: the certificate block reflects `g.certificate`.
inline Json gain_to_json(const Gain& g) {
    Json j;
    j["K"] = mat_to_json(g.K);
    if (g.certificate) {
        j["certificate"] = {{"feasible", true},
                            {"sigma_closed", g.certificate->sigma_closed},
                            {"margin", g.certificate->margin}};
    } else {
        j["certificate"] = nullptr;
    }
    return j;
}

inline Gain gain_from_json(const Json& j) {
    if (!j.is_object() || !j.contains("K")) throw ParseError("gain JSON: missing key 'K'");
    const auto& k = j["K"];
    if (!k.is_array() || k.size() != 2 || !k[0].is_array() || !k[1].is_array() || k[0].size() != 2 ||
        k[1].size() != 2)
        throw ParseError("gain JSON: 'K' must be a 2x2 array");
    Mat2 m;
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            if (!k[r][c].is_number()) throw ParseError("gain JSON: 'K' entries must be numbers");
            m(r, c) = k[r][c].get<double>();
        }
    if (!all_finite(m)) throw ParseError("gain JSON: non-finite entry");
    Gain g(m);
    if (j.contains("certificate") && j["certificate"].is_object()) {
        const auto& c = j["certificate"];
        const bool feasible = !c.contains("feasible") || c["feasible"].get<bool>();
        if (feasible && c.contains("sigma_closed")) {
            const double s = c["sigma_closed"].get<double>();
            g.certificate = Certificate{s, 1.0 - s};
        }
    }
    return g;
}

inline Gain parse_gain_json(std::string_view text) {
    try {
        return gain_from_json(Json::parse(text));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("gain JSON: ") + e.what());
    }
}

inline Gain load_gain(const std::string& path) {
    try {
        return parse_gain_json(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(trim(std::string_view(line).substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Rows of a CSV whose first line must equal `header`.
inline std::vector<std::vector<std::string>> read_csv_rows(std::string_view text, const std::string& header,
                                                           const std::string& what) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || trim(line) != header)
        throw ParseError(what + ": expected header '" + header + "'");
    const std::size_t n_cols = split_csv_line(header).size();
    std::vector<std::vector<std::string>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != n_cols)
            throw ParseError(what + ":" + std::to_string(line_no) + ": expected " + std::to_string(n_cols) +
                             " columns, got " + std::to_string(cells.size()));
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline constexpr const char* kTrajectoryHeader = "t,i_d,i_q,v,delta,saturated,lyapunov";
inline constexpr const char* kDatasetHeader = "traj_id,t,dx_d,dx_q,u_v,u_delta";

inline std::string trajectory_to_csv(const Trajectory& traj) {
    std::string out = std::string(kTrajectoryHeader) + "\n";
    for (const auto& r : traj.records) {
        out += std::to_string(r.t) + "," + fmt_double(r.state.i_d) + "," + fmt_double(r.state.i_q) + "," +
               fmt_double(r.input.v) + "," + fmt_double(r.input.delta) + "," + (r.saturated ? "1" : "0") + "," +
               fmt_double(r.lyapunov) + "\n";
    }
    return out;
}

/// Parses records only; reference and convergence metadata are not part of
/// the format.
inline Trajectory trajectory_from_csv(std::string_view text) {
    Trajectory traj;
    std::size_t expect = 0;
    for (const auto& c : read_csv_rows(text, kTrajectoryHeader, "trajectory CSV")) {
        TrajectoryRecord r;
        r.t = parse_u64(c[0], "trajectory CSV t");
        if (r.t != expect) throw ParseError("trajectory CSV: step indices must be contiguous from 0");
        ++expect;
        r.state = {parse_double(c[1], "i_d"), parse_double(c[2], "i_q")};
        r.input = {parse_double(c[3], "v"), parse_double(c[4], "delta")};
        r.saturated = parse_bool(c[5], "saturated");
        r.lyapunov = parse_double(c[6], "lyapunov");
        traj.records.push_back(r);
    }
    return traj;
}

inline std::string dataset_to_csv(const Dataset& d) {
    std::string out = std::string(kDatasetHeader) + "\n";
    for (const auto& s : d.samples) {
        out += std::to_string(s.traj_id) + "," + std::to_string(s.t) + "," + fmt_double(s.delta_x[0]) + "," +
               fmt_double(s.delta_x[1]) + "," + fmt_double(s.u[0]) + "," + fmt_double(s.u[1]) + "\n";
    }
    return out;
}

inline Dataset dataset_from_csv(std::string_view text) {
    Dataset d;
    for (const auto& c : read_csv_rows(text, kDatasetHeader, "dataset CSV")) {
        Sample s;
        s.traj_id = parse_u64(c[0], "traj_id");
        s.t = parse_u64(c[1], "t");
        s.delta_x = {parse_double(c[2], "dx_d"), parse_double(c[3], "dx_q")};
        s.u = {parse_double(c[4], "u_v"), parse_double(c[5], "u_delta")};
        d.samples.push_back(s);
    }
    d.validate();
    return d;
}

inline Dataset load_dataset(const std::string& path) { return dataset_from_csv(read_file(path)); }

} // namespace maglim
