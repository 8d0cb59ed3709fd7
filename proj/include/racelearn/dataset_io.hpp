#ifndef RACELEARN_DATASET_IO_HPP
#define RACELEARN_DATASET_IO_HPP

#include "racelearn/core.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace racelearn {

inline constexpr std::string_view raw_log_header = "t,x,y,psi,vx,vy,yaw_rate,accel,steer";
inline constexpr std::string_view dataset_header =
    "t,x,y,psi,vx,vy,yaw_rate,accel,steer,dx,dy,dpsi,dvx,dvy,dyaw_rate";

namespace detail {

/// Shortest round-trip representation is not needed; 17 digits always round-trips.
inline std::string fmt_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) {
            cell.pop_back();
        }
        out.push_back(cell);
    }
    return out;
}

inline std::string trim(std::string s)
{
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) {
        return {};
    }
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace detail

inline void write_raw_log_csv(std::ostream& out, std::span<const LogEntry> log)
{
    out << raw_log_header << '\n';
    using detail::fmt_double;
    for (const auto& e : log) {
        out << fmt_double(e.t) << ',' << fmt_double(e.state.x) << ',' << fmt_double(e.state.y) << ','
            << fmt_double(e.state.psi) << ',' << fmt_double(e.state.vx) << ',' << fmt_double(e.state.vy) << ','
            << fmt_double(e.state.yaw_rate) << ',' << fmt_double(e.control.accel) << ','
            << fmt_double(e.control.steer) << '\n';
    }
}

inline void write_dataset_csv(std::ostream& out, const Dataset& ds)
{
    out << dataset_header << '\n';
    using detail::fmt_double;
    for (const auto& s : ds) {
        out << fmt_double(s.t) << ',' << fmt_double(s.state.x) << ',' << fmt_double(s.state.y) << ','
            << fmt_double(s.state.psi) << ',' << fmt_double(s.state.vx) << ',' << fmt_double(s.state.vy) << ','
            << fmt_double(s.state.yaw_rate) << ',' << fmt_double(s.control.accel) << ','
            << fmt_double(s.control.steer) << ',' << fmt_double(s.target.dx) << ',' << fmt_double(s.target.dy)
            << ',' << fmt_double(s.target.dpsi) << ',' << fmt_double(s.target.dvx) << ','
            << fmt_double(s.target.dvy) << ',' << fmt_double(s.target.dyaw_rate) << '\n';
    }
}

namespace detail {

inline std::vector<std::vector<double>> read_numeric_csv(std::istream& in, std::string_view expected_header)
{
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("csv: missing header");
    }
    if (trim(line) != expected_header) {
        throw std::runtime_error("csv: unexpected header '" + trim(line) + "', expected '" +
                                 std::string(expected_header) + "'");
    }
    const auto width = split_csv_line(std::string(expected_header)).size();
    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) {
            continue;
        }
        const auto cells = split_csv_line(line);
        if (cells.size() != width) {
            throw std::runtime_error("csv: line " + std::to_string(lineno) + " has " +
                                     std::to_string(cells.size()) + " fields, expected " + std::to_string(width));
        }
        std::vector<double> row(width);
        for (std::size_t i = 0; i < width; ++i) {
            try {
                row[i] = std::stod(cells[i]);
            } catch (const std::exception&) {
                throw std::runtime_error("csv: line " + std::to_string(lineno) + ": bad number '" + cells[i] + "'");
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace detail

inline std::vector<LogEntry> read_raw_log_csv(std::istream& in)
{
    std::vector<LogEntry> log;
    for (const auto& r : detail::read_numeric_csv(in, raw_log_header)) {
        log.push_back({r[0], {r[1], r[2], r[3], r[4], r[5], r[6]}, {r[7], r[8]}});
    }
    return log;
}

inline Dataset read_dataset_csv(std::istream& in)
{
    Dataset ds;
    for (const auto& r : detail::read_numeric_csv(in, dataset_header)) {
        ds.samples.push_back(
            {{r[1], r[2], r[3], r[4], r[5], r[6]}, {r[7], r[8]}, {r[9], r[10], r[11], r[12], r[13], r[14]}, r[0]});
    }
    return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds)
{
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    write_dataset_csv(out, ds);
}

inline Dataset load_dataset(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    return read_dataset_csv(in);
}

/// Flat `key = value` file; `#` starts a comment, `[section]` lines are ignored.
using KeyValues = std::map<std::string, double>;

inline KeyValues parse_key_values(std::istream& in)
{
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = detail::trim(line);
        if (line.empty() || line.front() == '[') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config: line " + std::to_string(lineno) + ": expected key = value");
        }
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        try {
            kv[key] = std::stod(value);
        } catch (const std::exception&) {
            throw std::runtime_error("config: line " + std::to_string(lineno) + ": bad value for '" + key + "'");
        }
    }
    return kv;
}

inline void write_key_values(std::ostream& out, const std::vector<std::pair<std::string, double>>& entries)
{
    for (const auto& [k, v] : entries) {
        out << k << " = " << detail::fmt_double(v) << '\n';
    }
}

} // namespace racelearn

#endif // RACELEARN_DATASET_IO_HPP
