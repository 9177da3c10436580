#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "qadv/metrics.hpp"

namespace qadv {

inline constexpr const char* kUndefined = "—";
inline constexpr const char* kVersion = "0.1.0";

// Fixed six decimals, or the undefined marker.
std::string format_metric(const Metric& m);
std::string format_number(double v);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row);
    std::string render() const;
};

// Writes `<path>` and the sidecar `<path>.meta`, each atomically.
void write_report(const std::filesystem::path& path, const CsvTable& table, const std::string& metadata);

}  // namespace qadv
