#pragma once

#include "mortshock/common.hpp"
#include "mortshock/csv.hpp"

#include <charconv>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mortshock {

// Deaths/exposures for one country on a common age x year grid. Cells not
// covered by the source file are marked absent in `present`.
struct country_series {
    std::string country_code;
    age_range ages;
    year_range years;
    Eigen::MatrixXd deaths;     // rows = ages, cols = years
    Eigen::MatrixXd exposures;
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> present;
    int first_year_available = 0;

    bool cell_present(int age, int year) const {
        return ages.contains(age) && years.contains(year) &&
               present(ages.index(age), years.index(year)) != 0;
    }
};

// Aggregated multi-population panel with a time-varying country composition:
// countries enter at their configured entry year and never leave.
struct mortality_panel {
    std::vector<country_series> countries;
    age_range ages;
    year_range years;
    Eigen::MatrixXd common_deaths;
    Eigen::MatrixXd common_exposures;
    std::vector<std::set<std::string>> composition;  // per year index

    const country_series& country(const std::string& code) const {
        for (const auto& c : countries)
            if (c.country_code == code) return c;
        throw validation_error("country not present in panel: " + code);
    }
};

namespace detail {

inline long parse_int(const std::string& s, const std::string& what, std::size_t lineno) {
    long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw validation_error("parse error at line " + std::to_string(lineno) + ": bad " +
                               what + " value '" + s + "'");
    return v;
}

inline double parse_real(const std::string& s, const std::string& what, std::size_t lineno) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw validation_error("parse error at line " + std::to_string(lineno) + ": bad " +
                               what + " value '" + s + "'");
    }
}

}  // namespace detail

// Loads a flat CSV with header columns Year, Age, Deaths, Exposure and
// restricts it to the given age/year window. Age values such as "110+" are
// rejected. Cells repeated in the file are rejected.
inline country_series load_country_table(const std::string& path, const std::string& country_code,
                                         age_range ages, year_range years) {
    require(ages.lo <= ages.hi, "age window is empty");
    require(years.lo <= years.hi, "year window is empty");

    const csv::table t = csv::read_file(path);
    const int c_year = t.column("Year");
    const int c_age = t.column("Age");
    const int c_deaths = t.column("Deaths");
    const int c_exposure = t.column("Exposure");
    require(c_year >= 0 && c_age >= 0 && c_deaths >= 0 && c_exposure >= 0,
            path + ": header must contain Year, Age, Deaths, Exposure");

    country_series s;
    s.country_code = country_code;
    s.ages = ages;
    s.years = years;
    s.deaths = Eigen::MatrixXd::Zero(ages.count(), years.count());
    s.exposures = Eigen::MatrixXd::Zero(ages.count(), years.count());
    s.present.setZero(ages.count(), years.count());

    const std::size_t ncols = t.header.size();
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::size_t lineno = t.line_numbers[r];
        if (row.size() != ncols)
            throw validation_error("parse error at line " + std::to_string(lineno) + ": expected " +
                                   std::to_string(ncols) + " cells, got " +
                                   std::to_string(row.size()));
        const long year = detail::parse_int(row[static_cast<std::size_t>(c_year)], "Year", lineno);
        const long age = detail::parse_int(row[static_cast<std::size_t>(c_age)], "Age", lineno);
        if (!years.contains(static_cast<int>(year)) || !ages.contains(static_cast<int>(age)))
            continue;
        const double d =
            detail::parse_real(row[static_cast<std::size_t>(c_deaths)], "Deaths", lineno);
        const double e =
            detail::parse_real(row[static_cast<std::size_t>(c_exposure)], "Exposure", lineno);
        const std::string cell = "(year " + std::to_string(year) + ", age " + std::to_string(age) +
                                 ") of " + country_code;
        if (d < 0.0) throw validation_error("negative deaths at " + cell);
        if (e <= 0.0) throw validation_error("non-positive exposure at " + cell);
        const int i = ages.index(static_cast<int>(age));
        const int j = years.index(static_cast<int>(year));
        if (s.present(i, j)) throw validation_error("duplicate cell " + cell);
        s.deaths(i, j) = d;
        s.exposures(i, j) = e;
        s.present(i, j) = 1;
    }

    s.first_year_available = years.hi + 1;
    for (int j = 0; j < years.count(); ++j) {
        if (s.present.col(j).any()) {
            s.first_year_available = years.at(j);
            break;
        }
    }
    return s;
}

// Builds the aggregated common panel. Every country must cover
// [entry_year, year_max] x ages without missing cells.
inline mortality_panel build_panel(std::vector<country_series> series,
                                   const std::map<std::string, int>& entry_years, age_range ages,
                                   year_range years) {
    require(!series.empty(), "no country series supplied");
    mortality_panel p;
    p.ages = ages;
    p.years = years;
    p.common_deaths = Eigen::MatrixXd::Zero(ages.count(), years.count());
    p.common_exposures = Eigen::MatrixXd::Zero(ages.count(), years.count());
    p.composition.resize(static_cast<std::size_t>(years.count()));

    for (auto& s : series) {
        require(s.ages == ages && s.years == years,
                "series window mismatch for country " + s.country_code);
        auto it = entry_years.find(s.country_code);
        require(it != entry_years.end(), "no entry year configured for " + s.country_code);
        const int entry = std::max(it->second, years.lo);
        require(entry <= years.hi,
                "entry year past the panel window for " + s.country_code);
        for (int j = years.index(entry); j < years.count(); ++j) {
            for (int i = 0; i < ages.count(); ++i) {
                if (!s.present(i, j))
                    throw validation_error("missing cell (year " + std::to_string(years.at(j)) +
                                           ", age " + std::to_string(ages.at(i)) +
                                           ") inside active window of " + s.country_code);
                p.common_deaths(i, j) += s.deaths(i, j);
                p.common_exposures(i, j) += s.exposures(i, j);
            }
            p.composition[static_cast<std::size_t>(j)].insert(s.country_code);
        }
    }

    for (int j = 0; j < years.count(); ++j) {
        require(!p.composition[static_cast<std::size_t>(j)].empty(),
                "no country active in year " + std::to_string(years.at(j)));
        for (int i = 0; i < ages.count(); ++i)
            require(p.common_exposures(i, j) > 0.0,
                    "zero aggregated exposure at (year " + std::to_string(years.at(j)) + ", age " +
                        std::to_string(ages.at(i)) + ")");
    }

    p.countries = std::move(series);
    return p;
}

// Crude central death rates d/E. Exposure must be positive everywhere.
inline Eigen::MatrixXd crude_death_rates(const Eigen::MatrixXd& deaths,
                                         const Eigen::MatrixXd& exposures) {
    require(deaths.rows() == exposures.rows() && deaths.cols() == exposures.cols(),
            "deaths/exposures shape mismatch");
    Eigen::MatrixXd m(deaths.rows(), deaths.cols());
    for (Eigen::Index i = 0; i < deaths.rows(); ++i)
        for (Eigen::Index j = 0; j < deaths.cols(); ++j) {
            if (!(exposures(i, j) > 0.0))
                throw validation_error("zero exposure at cell (" + std::to_string(i) + "," +
                                       std::to_string(j) + ")");
            m(i, j) = deaths(i, j) / exposures(i, j);
        }
    return m;
}

inline Eigen::MatrixXd crude_death_rates(const mortality_panel& p) {
    return crude_death_rates(p.common_deaths, p.common_exposures);
}

inline Eigen::MatrixXd crude_death_rates(const country_series& s) {
    for (int i = 0; i < s.ages.count(); ++i)
        for (int j = 0; j < s.years.count(); ++j)
            require(s.present(i, j) != 0, "missing cell (year " + std::to_string(s.years.at(j)) +
                                              ", age " + std::to_string(s.ages.at(i)) + ") of " +
                                              s.country_code);
    return crude_death_rates(s.deaths, s.exposures);
}

}  // namespace mortshock
