#pragma once

#include "mortshock/common.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace mortshock::csv {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        // trim surrounding whitespace
        std::size_t b = cell.find_first_not_of(" \t\r");
        std::size_t e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

struct table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;   // raw cells
    std::vector<std::size_t> line_numbers;        // 1-based source line per row

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
};

inline table read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("cannot open file: " + path);
    table t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
        } else {
            t.rows.push_back(std::move(cells));
            t.line_numbers.push_back(lineno);
        }
    }
    if (t.header.empty()) throw validation_error("empty CSV file: " + path);
    return t;
}

}  // namespace mortshock::csv
