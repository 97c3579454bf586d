#include "dps/report.hpp"

#include "dps/error.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dps {

using nlohmann::json;

namespace {

const char * const kColumns[] = {"method",          "gamma",     "k",           "routing",     "seeds",
                                 "nll",             "nll_lower", "nll_upper",   "alignment",   "alignment_lower",
                                 "alignment_upper", "delta_nll", "delta_lower", "delta_upper", "improved_fraction",
                                 "sampled_alignment", "greedy_alignment"};
constexpr size_t kNumColumns = sizeof(kColumns) / sizeof(kColumns[0]);

std::string opt(const std::optional<double> & v) {
    return v ? format_number(*v) : std::string();
}

std::vector<std::string> split_csv(const std::string & line) {
    std::vector<std::string> out(1);
    for (char c : line) {
        if (c == ',') {
            out.emplace_back();
        } else {
            out.back().push_back(c);
        }
    }
    return out;
}

double parse_number(const std::string & s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        fail(ErrorKind::schema, "report: '" + s + "' is not a number");
    }
    return v;
}

size_t parse_count(const std::string & s) {
    size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        fail(ErrorKind::schema, "report: '" + s + "' is not a count");
    }
    return v;
}

std::optional<double> parse_opt(const std::string & s) {
    if (s.empty()) {
        return std::nullopt;
    }
    return parse_number(s);
}

void check_label(const std::string & s) {
    if (s.find_first_of(",\n\r") != std::string::npos) {
        fail(ErrorKind::input, "report: label '" + s + "' contains a CSV delimiter");
    }
}

} // namespace

std::string format_number(double value) {
    if (!std::isfinite(value)) {
        return std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf");
    }
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

void write_report_csv(const std::vector<ReportRow> & rows, std::ostream & out) {
    for (size_t i = 0; i < kNumColumns; ++i) {
        out << (i ? "," : "") << kColumns[i];
    }
    out << "\n";
    for (const ReportRow & r : rows) {
        check_label(r.method);
        check_label(r.routing);
        out << r.method << ',' << format_number(r.gamma) << ',' << r.k << ',' << r.routing << ',' << r.seeds << ','
            << format_number(r.nll) << ',' << format_number(r.nll_lower) << ',' << format_number(r.nll_upper) << ','
            << opt(r.alignment) << ',' << opt(r.alignment_lower) << ',' << opt(r.alignment_upper) << ',' << opt(r.delta_nll) << ',' << opt(r.delta_lower) << ','
            << opt(r.delta_upper) << ',' << opt(r.improved_fraction) << ',' << opt(r.sampled_alignment) << ','
            << opt(r.greedy_alignment) << "\n";
    }
}

std::vector<ReportRow> read_report_csv(std::istream & in) {
    std::string line;
    if (!std::getline(in, line)) {
        fail(ErrorKind::schema, "report: missing header");
    }
    const auto header = split_csv(line);
    if (header.size() != kNumColumns) {
        fail(ErrorKind::schema, "report: unexpected header");
    }
    for (size_t i = 0; i < kNumColumns; ++i) {
        if (header[i] != kColumns[i]) {
            fail(ErrorKind::schema, "report: unexpected column '" + header[i] + "'");
        }
    }
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split_csv(line);
        if (f.size() != kNumColumns) {
            fail(ErrorKind::schema, "report: row has " + std::to_string(f.size()) + " fields");
        }
        ReportRow r;
        r.method            = f[0];
        r.gamma             = parse_number(f[1]);
        r.k                 = parse_count(f[2]);
        r.routing           = f[3];
        r.seeds             = parse_count(f[4]);
        r.nll               = parse_number(f[5]);
        r.nll_lower         = parse_number(f[6]);
        r.nll_upper         = parse_number(f[7]);
        r.alignment         = parse_opt(f[8]);
        r.alignment_lower   = parse_opt(f[9]);
        r.alignment_upper   = parse_opt(f[10]);
        r.delta_nll         = parse_opt(f[11]);
        r.delta_lower       = parse_opt(f[12]);
        r.delta_upper       = parse_opt(f[13]);
        r.improved_fraction = parse_opt(f[14]);
        r.sampled_alignment = parse_opt(f[15]);
        r.greedy_alignment  = parse_opt(f[16]);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open report '" + path.string() + "'");
    }
    return read_report_csv(in);
}

void write_heatmap_csv(const Heatmap & h, std::ostream & out) {
    if (h.values.size() != h.row_labels.size()) {
        fail(ErrorKind::input, "heatmap '" + h.name + "': row label count does not match");
    }
    out << "label";
    for (const std::string & c : h.col_labels) {
        check_label(c);
        out << ',' << c;
    }
    out << "\n";
    for (size_t r = 0; r < h.values.size(); ++r) {
        if (h.values[r].size() != h.col_labels.size()) {
            fail(ErrorKind::input, "heatmap '" + h.name + "': ragged row " + std::to_string(r));
        }
        check_label(h.row_labels[r]);
        out << h.row_labels[r];
        for (double v : h.values[r]) {
            out << ',' << format_number(v);
        }
        out << "\n";
    }
}

Heatmap read_heatmap_csv(std::istream & in, std::string name) {
    Heatmap     h;
    std::string line;
    h.name = std::move(name);
    if (!std::getline(in, line)) {
        fail(ErrorKind::schema, "heatmap: missing header");
    }
    auto header = split_csv(line);
    h.col_labels.assign(header.begin() + 1, header.end());
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        auto f = split_csv(line);
        if (f.size() != header.size()) {
            fail(ErrorKind::schema, "heatmap: ragged row");
        }
        h.row_labels.push_back(f[0]);
        std::vector<double> row;
        for (size_t i = 1; i < f.size(); ++i) {
            row.push_back(parse_number(f[i]));
        }
        h.values.push_back(std::move(row));
    }
    return h;
}

std::string report_json(const BenchReport & report) {
    json rows = json::array();
    for (const ReportRow & r : report.rows) {
        json row{{"method", r.method}, {"gamma", r.gamma}, {"k", r.k}, {"routing", r.routing},
                 {"seeds", r.seeds},   {"nll", {r.nll, r.nll_lower, r.nll_upper}}};
        if (r.alignment) {
            row["alignment"] = {*r.alignment, r.alignment_lower.value_or(*r.alignment),
                                r.alignment_upper.value_or(*r.alignment)};
        }
        if (r.delta_nll) {
            row["delta_nll"] = {*r.delta_nll, r.delta_lower.value_or(*r.delta_nll), r.delta_upper.value_or(*r.delta_nll)};
        }
        if (r.improved_fraction) {
            row["improved_fraction"] = *r.improved_fraction;
        }
        if (r.sampled_alignment) {
            row["sampled_alignment"] = *r.sampled_alignment;
        }
        if (r.greedy_alignment) {
            row["greedy_alignment"] = *r.greedy_alignment;
        }
        rows.push_back(std::move(row));
    }
    json summary = json::object();
    for (const auto & [key, value] : report.summary) {
        summary[key] = value;
    }
    json heatmaps = json::array();
    for (const Heatmap & h : report.heatmaps) {
        heatmaps.push_back("heatmaps/" + h.name + ".csv");
    }
    const json doc{{"format", "dps-report"},
                   {"version", 1},
                   {"environment", report.environment},
                   {"summary", summary},
                   {"rows", rows},
                   {"heatmaps", heatmaps}};
    return doc.dump(2) + "\n";
}

BenchReport load_report_json(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open report '" + path.string() + "'");
    }
    BenchReport out;
    try {
        const json doc = json::parse(in);
        if (doc.at("format") != "dps-report") {
            fail(ErrorKind::schema, "'" + path.string() + "' is not a dps report");
        }
        for (const auto & [key, value] : doc.at("summary").items()) {
            out.summary[key] = value.get<double>();
        }
        out.environment = doc.at("environment").get<std::map<std::string, std::string>>();
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, "malformed report '" + path.string() + "': " + e.what());
    }
    return out;
}

void emit_report(const BenchReport & report, const std::filesystem::path & dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "heatmaps", ec);
    if (ec) {
        fail(ErrorKind::io, "cannot create '" + (dir / "heatmaps").string() + "': " + ec.message());
    }
    auto open = [](const std::filesystem::path & p) {
        std::ofstream out(p, std::ios::binary);
        if (!out) {
            fail(ErrorKind::io, "cannot open '" + p.string() + "' for writing");
        }
        return out;
    };
    {
        auto out = open(dir / "report.csv");
        write_report_csv(report.rows, out);
    }
    {
        auto out = open(dir / "report.json");
        out << report_json(report);
    }
    for (const Heatmap & h : report.heatmaps) {
        auto out = open(dir / "heatmaps" / (h.name + ".csv"));
        write_heatmap_csv(h, out);
    }
}

} // namespace dps
