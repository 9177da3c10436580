#include "qadv/report.hpp"

#include <cstdio>

#include "qadv/error.hpp"
#include "qadv/io.hpp"

namespace qadv {

std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    std::string s = buf;
    if (s == "-0.000000") s = "0.000000";
    return s;
}

std::string format_metric(const Metric& m) { return m ? format_number(*m) : std::string(kUndefined); }

void CsvTable::add(std::vector<std::string> row) {
    if (row.size() != header.size())
        throw UsageError("report row has " + std::to_string(row.size()) + " fields, header has " +
                         std::to_string(header.size()));
    rows.push_back(std::move(row));
}

namespace {
std::string quote(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}
}  // namespace

std::string CsvTable::render() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out += ',';
            out += quote(fields[i]);
        }
        out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
}

void write_report(const std::filesystem::path& path, const CsvTable& table, const std::string& metadata) {
    write_file_atomic(path, table.render());
    std::filesystem::path meta = path;
    meta += ".meta";
    write_file_atomic(meta, metadata);
}

}  // namespace qadv
