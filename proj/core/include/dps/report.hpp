#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dps {

struct ReportRow {
    std::string method;
    double      gamma = 0.0;
    size_t      k     = 0;
    std::string routing;
    size_t      seeds = 1;

    double nll       = 0.0;
    double nll_lower = 0.0;
    double nll_upper = 0.0;

    std::optional<double> alignment;
    std::optional<double> alignment_lower;
    std::optional<double> alignment_upper;
    std::optional<double> delta_nll;
    std::optional<double> delta_lower;
    std::optional<double> delta_upper;
    std::optional<double> improved_fraction; // share of users above the vanilla alignment
    std::optional<double> sampled_alignment; // alignment of sampled continuations
    std::optional<double> greedy_alignment;  // alignment of greedy continuations

    bool operator==(const ReportRow &) const = default;
};

// Labeled numeric grid, written as CSV with a header row of column labels
// and the row label in the first column.
struct Heatmap {
    std::string                      name;
    std::vector<std::string>         row_labels;
    std::vector<std::string>         col_labels;
    std::vector<std::vector<double>> values;

    bool operator==(const Heatmap &) const = default;
};

struct BenchReport {
    std::vector<ReportRow>             rows;
    std::map<std::string, double>      summary;     // named scalar results
    std::map<std::string, std::string> environment; // build and run snapshot
    std::vector<Heatmap>               heatmaps;
};

// Shortest round-trip decimal form.
std::string format_number(double value);

void                   write_report_csv(const std::vector<ReportRow> & rows, std::ostream & out);
std::vector<ReportRow> read_report_csv(std::istream & in);
std::vector<ReportRow> read_report_csv(const std::filesystem::path & path);

void    write_heatmap_csv(const Heatmap & heatmap, std::ostream & out);
Heatmap read_heatmap_csv(std::istream & in, std::string name = {});

std::string report_json(const BenchReport & report);
// Summary and environment of a report.json; rows come back through the CSV.
BenchReport load_report_json(const std::filesystem::path & path);

// Writes report.csv, report.json and heatmaps/<name>.csv under `dir`.
void emit_report(const BenchReport & report, const std::filesystem::path & dir);

} // namespace dps
