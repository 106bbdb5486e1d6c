///
/// \file io.hpp
///
/// CSV ingestion of measurement series.
///
/// Accepted layout:
///
///     # delta_t=0.5
///     t,x1,x2            (optional header; "t"/"time" columns are dropped,
///     0,1.0,2.0           an "episode" column splits episodes)
///     0.5,1.1,2.1
///
///     1.0,...            (a blank line also starts a new episode)
///
#ifndef LKIS_IO_HPP
#define LKIS_IO_HPP

#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "series.hpp"

namespace lkis::io {

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_cells(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::optional<double> parse_number(const std::string& s)
{
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const char* first = s.data();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::string lower(std::string s)
{
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

} // namespace detail

struct LoadOptions
{
    /// Overrides any "# delta_t=" header line.
    std::optional<double> delta_t;
};

///
/// Parse a CSV stream into one or more episodes. Throws ParseError (with the
/// 1-based line number) on ragged rows, non-numeric cells or a missing
/// sample interval.
///
inline EpisodeList load_series(std::istream& in, const LoadOptions& opt = {})
{
    std::optional<double> header_dt;
    std::vector<std::string> header;
    bool seen_data = false;
    std::size_t width = 0;
    int time_col = -1, episode_col = -1;

    std::vector<std::vector<std::vector<double>>> blocks(1);  // blank-line groups
    std::vector<std::vector<double>> ids(1);

    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = detail::trim(raw);
        if (line.empty()) {
            if (!blocks.back().empty()) {
                blocks.emplace_back();
                ids.emplace_back();
            }
            continue;
        }
        if (line.front() == '#') {
            const auto pos = line.find("delta_t");
            if (pos != std::string::npos) {
                const auto eq = line.find_first_of("=:", pos);
                if (eq == std::string::npos) throw ParseError("malformed delta_t line", lineno);
                const auto v = detail::parse_number(detail::trim(line.substr(eq + 1)));
                if (!v || !(*v > 0.0)) throw ParseError("delta_t must be a positive number", lineno);
                header_dt = *v;
            }
            continue;
        }
        const auto cells = detail::split_cells(line);
        if (!seen_data && header.empty()) {
            bool numeric = true;
            for (const auto& c : cells) numeric = numeric && detail::parse_number(c).has_value();
            if (!numeric) {
                header = cells;
                width = cells.size();
                for (std::size_t i = 0; i < cells.size(); ++i) {
                    const auto name = detail::lower(cells[i]);
                    if (name == "t" || name == "time") time_col = static_cast<int>(i);
                    if (name == "episode" || name == "episode_id") episode_col = static_cast<int>(i);
                }
                continue;
            }
        }
        if (width == 0) width = cells.size();
        if (cells.size() != width)
            throw ParseError("expected " + std::to_string(width) + " columns, found " + std::to_string(cells.size()),
                             lineno);
        std::vector<double> row;
        double id = 0.0;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const auto v = detail::parse_number(cells[i]);
            if (!v) throw ParseError("non-numeric cell '" + cells[i] + "' in column " + std::to_string(i + 1), lineno);
            if (static_cast<int>(i) == episode_col) id = *v;
            else if (static_cast<int>(i) != time_col) row.push_back(*v);
        }
        if (row.empty()) throw ParseError("no measurement columns", lineno);
        blocks.back().push_back(std::move(row));
        ids.back().push_back(id);
        seen_data = true;
    }
    if (!seen_data) throw ParseError("no data rows");
    const std::optional<double> dt = opt.delta_t ? opt.delta_t : header_dt;
    if (!dt) throw ParseError("sample interval missing: add a '# delta_t=' line or pass it explicitly");
    require(*dt > 0.0, "load_series: delta_t must be > 0");

    std::vector<std::vector<std::vector<double>>> groups;
    if (episode_col >= 0) {
        std::map<double, std::size_t> slot;
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (std::size_t i = 0; i < blocks[b].size(); ++i) {
                auto [it, fresh] = slot.try_emplace(ids[b][i], groups.size());
                if (fresh) groups.emplace_back();
                groups[it->second].push_back(blocks[b][i]);
            }
    } else {
        for (auto& b : blocks)
            if (!b.empty()) groups.push_back(std::move(b));
    }

    EpisodeList out;
    for (const auto& g : groups) {
        TimeSeries s;
        s.delta_t = *dt;
        s.values.resize(static_cast<Eigen::Index>(g.size()), static_cast<Eigen::Index>(g.front().size()));
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t c = 0; c < g[i].size(); ++c)
                s.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = g[i][c];
        out.push_back(std::move(s));
    }
    return out;
}

inline EpisodeList load_series_file(const std::string& path, const LoadOptions& opt = {})
{
    std::ifstream f(path);
    if (!f) throw Error("cannot open '" + path + "'");
    return load_series(f, opt);
}

/// Writes episodes with an "episode" column when there is more than one.
inline void write_series(std::ostream& os, const EpisodeList& eps)
{
    require(!eps.empty(), "write_series: no data");
    os << std::setprecision(17) << "# delta_t=" << eps.front().delta_t << "\n";
    const bool multi = eps.size() > 1;
    if (multi) os << "episode,";
    os << "t";
    for (Eigen::Index c = 0; c < eps.front().dim(); ++c) os << ",x" << (c + 1);
    os << "\n";
    for (std::size_t e = 0; e < eps.size(); ++e) {
        for (Eigen::Index i = 0; i < eps[e].length(); ++i) {
            if (multi) os << e << ",";
            os << static_cast<double>(i) * eps[e].delta_t;
            for (Eigen::Index c = 0; c < eps[e].dim(); ++c) os << "," << eps[e].values(i, c);
            os << "\n";
        }
    }
}

} // namespace lkis::io

#endif // LKIS_IO_HPP
