#pragma once

// Minimal CSV emission with shortest round-trip number formatting, so identical
// doubles always produce identical bytes, and a reader for the files written here
// (no quoting, comma separated, header row first).

#include <charconv>
#include <cstdint>
#include <fstream>
#include <limits>
#include <initializer_list>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "pesn/core.hpp"

namespace pesn {

inline std::string format_number(double v)
{
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw error("format_number: conversion failed");
    return {buf, end};
}

class CsvWriter {
public:
    explicit CsvWriter(std::ostream& os) : os_(os) {}

    void header(std::initializer_list<std::string_view> names)
    {
        bool first = true;
        for (auto n : names) {
            if (!first) os_ << ',';
            os_ << n;
            first = false;
        }
        os_ << '\n';
    }

    template <typename T>
    CsvWriter& operator<<(const T& v)
    {
        if (!first_) os_ << ',';
        first_ = false;
        if constexpr (std::is_floating_point_v<T>)
            os_ << format_number(v);
        else
            os_ << v;
        return *this;
    }

    void end_row()
    {
        os_ << '\n';
        first_ = true;
    }

private:
    std::ostream& os_;
    bool first_ = true;
};

inline double parse_number(std::string_view text)
{
    if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (text == "inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size()) throw error("parse_number: not a number: " + std::string(text));
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column position; throws when absent.
    std::size_t column(std::string_view name) const
    {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw error("csv: missing column " + std::string(name));
    }
    const std::string& at(std::size_t row, std::string_view name) const { return rows.at(row).at(column(name)); }
    double number(std::size_t row, std::string_view name) const { return parse_number(at(row, name)); }
};

inline CsvTable read_csv(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw error("cannot open for reading: " + path);
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i)
            if (i == line.size() || line[i] == ',') {
                out.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        return out;
    };
    CsvTable t;
    std::string line;
    if (!std::getline(is, line)) throw error("csv: empty file " + path);
    t.header = split(line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        t.rows.push_back(split(line));
        if (t.rows.back().size() != t.header.size()) throw error("csv: ragged row in " + path);
    }
    return t;
}

inline std::ofstream open_output(const std::string& path)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw error("cannot open for writing: " + path);
    return os;
}

}  // namespace pesn
