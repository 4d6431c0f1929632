#include "ftlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace ftlab {

namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt(double v, int prec) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

bool numeric_field(const std::string& f) { return f == "size" || f == "seed"; }

bool key_less(const std::vector<std::string>& fields, const std::vector<std::string>& a,
              const std::vector<std::string>& b) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (a[i] == b[i]) continue;
        if (numeric_field(fields[i])) return std::stod(a[i]) < std::stod(b[i]);
        return a[i] < b[i];
    }
    return false;
}

std::string join(const std::vector<std::string>& v, const std::string& sep) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
    return s;
}

std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '&': o += "&amp;"; break;
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

struct Frame {
    double w = 720, h = 440, left = 70, right = 190, top = 40, bottom = 60;
    double x0() const { return left; }
    double x1() const { return w - right; }
    double y0() const { return h - bottom; }
    double y1() const { return top; }
};

struct Range {
    double lo, hi;
    double map(double v, double a, double b) const { return hi == lo ? (a + b) / 2 : a + (v - lo) / (hi - lo) * (b - a); }
};

Range y_range(const Aggregate& agg) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& r : agg.rows) {
        lo = std::min(lo, r.mean - r.std);
        hi = std::max(hi, r.mean + r.std);
    }
    const double pad = hi > lo ? 0.08 * (hi - lo) : std::max(std::abs(hi) * 0.05, 1e-3);
    return {lo - pad, hi + pad};
}

void svg_header(std::ostream& o, const Frame& f, const std::string& title, const std::string& ylabel,
                const Range& y) {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.w << "\" height=\"" << f.h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!title.empty())
        o << "<text x=\"" << f.w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
          << "</text>\n";
    o << "<line x1=\"" << f.x0() << "\" y1=\"" << f.y0() << "\" x2=\"" << f.x1() << "\" y2=\"" << f.y0()
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << f.x0() << "\" y1=\"" << f.y0() << "\" x2=\"" << f.x0() << "\" y2=\"" << f.y1()
      << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = y.lo + (y.hi - y.lo) * i / 5.0;
        const double py = y.map(v, f.y0(), f.y1());
        o << "<g class=\"ytick\"><line x1=\"" << f.x0() - 4 << "\" y1=\"" << py << "\" x2=\"" << f.x0() << "\" y2=\""
          << py << "\" stroke=\"black\"/><text x=\"" << f.x0() - 7 << "\" y=\"" << py + 4
          << "\" text-anchor=\"end\">" << fmt(v, 3) << "</text></g>\n";
    }
    o << "<text transform=\"translate(18," << (f.y0() + f.y1()) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(ylabel) << "</text>\n";
}

void error_bar(std::ostream& o, double px, double ylo, double yhi, const char* color) {
    o << "<path class=\"errorbar\" d=\"M" << px << ',' << ylo << "V" << yhi << "M" << px - 4 << ',' << ylo << "h8M"
      << px - 4 << ',' << yhi << "h8\" stroke=\"" << color << "\" fill=\"none\"/>";
}

void legend(std::ostream& o, const Frame& f, const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = f.y1() + 10 + 18.0 * static_cast<double>(i);
        o << "<g class=\"legend\"><rect x=\"" << f.x1() + 15 << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\""
          << kPalette[i % 8] << "\"/><text x=\"" << f.x1() + 32 << "\" y=\"" << y + 1 << "\">"
          << xml_escape(names[i]) << "</text></g>\n";
    }
}

// Splits rows into (axis value, series name) using the field at `axis`.
struct Split {
    std::vector<std::string> ticks, series;
    std::map<std::pair<std::string, std::string>, const AggregateRow*> cell;
};

Split split_rows(const Aggregate& agg, std::size_t axis) {
    Split s;
    for (const auto& r : agg.rows) {
        std::vector<std::string> rest;
        for (std::size_t i = 0; i < r.key.size(); ++i)
            if (i != axis) rest.push_back(r.key[i]);
        const auto name = rest.empty() ? agg.metric : join(rest, " / ");
        if (std::find(s.ticks.begin(), s.ticks.end(), r.key[axis]) == s.ticks.end()) s.ticks.push_back(r.key[axis]);
        if (std::find(s.series.begin(), s.series.end(), name) == s.series.end()) s.series.push_back(name);
        s.cell[{r.key[axis], name}] = &r;
    }
    if (numeric_field(agg.group_by[axis]))
        std::sort(s.ticks.begin(), s.ticks.end(), [](const auto& a, const auto& b) { return std::stod(a) < std::stod(b); });
    return s;
}

void lines_svg(std::ostream& o, const Aggregate& agg, std::size_t axis, const std::string& title) {
    const Frame f;
    const auto s = split_rows(agg, axis);
    const auto y = y_range(agg);
    std::vector<double> logs;
    for (const auto& t : s.ticks) {
        const double v = std::stod(t);
        if (!(v > 0)) throw InputError("size must be positive for a log axis, got " + t);
        logs.push_back(std::log10(v));
    }
    const Range x{logs.front(), logs.back()};
    const double inset = 25;
    auto px = [&](double lg) { return x.map(lg, f.x0() + inset, f.x1() - inset); };
    svg_header(o, f, title, agg.metric, y);
    for (std::size_t i = 0; i < s.ticks.size(); ++i) {
        const double p = px(logs[i]);
        o << "<g class=\"xtick\"><line x1=\"" << p << "\" y1=\"" << f.y0() << "\" x2=\"" << p << "\" y2=\""
          << f.y0() + 4 << "\" stroke=\"black\"/><text x=\"" << p << "\" y=\"" << f.y0() + 18
          << "\" text-anchor=\"middle\">" << xml_escape(s.ticks[i]) << "</text></g>\n";
    }
    o << "<text x=\"" << (f.x0() + f.x1()) / 2 << "\" y=\"" << f.h - 15 << "\" text-anchor=\"middle\">"
      << xml_escape(agg.group_by[axis]) << " (log scale)</text>\n";
    for (std::size_t k = 0; k < s.series.size(); ++k) {
        const char* color = kPalette[k % 8];
        o << "<g class=\"series\" data-name=\"" << xml_escape(s.series[k]) << "\">";
        std::string path;
        for (std::size_t i = 0; i < s.ticks.size(); ++i) {
            const auto it = s.cell.find({s.ticks[i], s.series[k]});
            if (it == s.cell.end()) continue;
            const auto& r = *it->second;
            const double p = px(logs[i]), py = y.map(r.mean, f.y0(), f.y1());
            path += (path.empty() ? "M" : "L") + fmt(p, 2) + "," + fmt(py, 2);
            error_bar(o, p, y.map(r.mean - r.std, f.y0(), f.y1()), y.map(r.mean + r.std, f.y0(), f.y1()), color);
            o << "<circle cx=\"" << p << "\" cy=\"" << py << "\" r=\"3.5\" fill=\"" << color << "\"/>";
        }
        o << "<path d=\"" << path << "\" stroke=\"" << color << "\" stroke-width=\"2\" fill=\"none\"/></g>\n";
    }
    legend(o, f, s.series);
    o << "</svg>\n";
}

void bars_svg(std::ostream& o, const Aggregate& agg, const std::string& title) {
    const Frame f;
    const auto s = split_rows(agg, 0);
    auto y = y_range(agg);
    y.lo = std::min(y.lo, 0.0);
    svg_header(o, f, title, agg.metric, y);
    const double gw = (f.x1() - f.x0()) / static_cast<double>(s.ticks.size());
    const double bw = gw * 0.8 / static_cast<double>(s.series.size());
    const double base = y.map(std::max(y.lo, 0.0), f.y0(), f.y1());
    for (std::size_t g = 0; g < s.ticks.size(); ++g) {
        const double c = f.x0() + gw * (static_cast<double>(g) + 0.5);
        o << "<g class=\"xtick\"><text x=\"" << c << "\" y=\"" << f.y0() + 18 << "\" text-anchor=\"middle\">"
          << xml_escape(s.ticks[g]) << "</text></g>\n";
    }
    o << "<text x=\"" << (f.x0() + f.x1()) / 2 << "\" y=\"" << f.h - 15 << "\" text-anchor=\"middle\">"
      << xml_escape(agg.group_by[0]) << "</text>\n";
    for (std::size_t k = 0; k < s.series.size(); ++k) {
        const char* color = kPalette[k % 8];
        o << "<g class=\"series\" data-name=\"" << xml_escape(s.series[k]) << "\">";
        for (std::size_t g = 0; g < s.ticks.size(); ++g) {
            const auto it = s.cell.find({s.ticks[g], s.series[k]});
            if (it == s.cell.end()) continue;
            const auto& r = *it->second;
            const double left = f.x0() + gw * (static_cast<double>(g) + 0.1) + bw * static_cast<double>(k);
            const double top = y.map(r.mean, f.y0(), f.y1());
            o << "<rect x=\"" << left << "\" y=\"" << std::min(top, base) << "\" width=\"" << bw * 0.92
              << "\" height=\"" << std::abs(base - top) << "\" fill=\"" << color << "\"/>";
            error_bar(o, left + bw * 0.46, y.map(r.mean - r.std, f.y0(), f.y1()),
                      y.map(r.mean + r.std, f.y0(), f.y1()), "black");
        }
        o << "</g>\n";
    }
    legend(o, f, s.series);
    o << "</svg>\n";
}

}  // namespace

std::string record_field(const RunRecord& r, const std::string& field) {
    if (field == "seed") return std::to_string(r.seed);
    const auto it = r.tags.find(field);
    if (it == r.tags.end()) throw InputError("record " + r.fingerprint.substr(0, 12) + " has no field '" + field + "'");
    return it->second;
}

double record_metric(const RunRecord& r, const std::string& m) {
    if (m == "test_metric") return r.test_metric;
    if (m == "best_metric") return r.best_metric;
    if (m == "best_epoch") return static_cast<double>(r.best_epoch);
    if (m == "convergence_epoch") return static_cast<double>(r.convergence_epoch);
    if (m == "trainable_param_count") return static_cast<double>(r.trainable_param_count);
    throw InputError("unknown metric '" + m + "'");
}

Aggregate aggregate(const std::vector<RunRecord>& records, const std::vector<std::string>& group_by,
                    const std::string& metric) {
    if (records.empty()) throw InputError("no records to aggregate");
    if (group_by.empty()) throw InputError("aggregate needs at least one group-by field");
    std::map<std::vector<std::string>, std::vector<double>> groups;
    for (const auto& r : records) {
        std::vector<std::string> key;
        for (const auto& f : group_by) key.push_back(record_field(r, f));
        groups[key].push_back(record_metric(r, metric));
    }
    Aggregate agg{group_by, metric, {}, {}};
    for (const auto& [key, vals] : groups) {
        AggregateRow row{key, vals.size(), 0.0, 0.0};
        const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
        if (*lo == *hi) {
            row.mean = *lo;
        } else {
            double sum = 0.0;
            for (double v : vals) sum += v;
            row.mean = sum / static_cast<double>(vals.size());
            double ss = 0.0;
            for (double v : vals) ss += (v - row.mean) * (v - row.mean);
            row.std = std::sqrt(ss / static_cast<double>(vals.size() - 1));
        }
        if (vals.size() == 1) agg.warnings.push_back("group " + join(key, "/") + " has a single record; std reported as 0");
        agg.rows.push_back(std::move(row));
    }
    std::sort(agg.rows.begin(), agg.rows.end(),
              [&](const auto& a, const auto& b) { return key_less(group_by, a.key, b.key); });
    return agg;
}

void write_csv(const Aggregate& agg, std::ostream& out) {
    out << join(agg.group_by, ",") << ",n,mean,std\n";
    for (const auto& r : agg.rows) out << join(r.key, ",") << ',' << r.n << ',' << g17(r.mean) << ',' << g17(r.std) << '\n';
}

void write_markdown(const Aggregate& agg, std::ostream& out) {
    out << "| " << join(agg.group_by, " | ") << " | n | " << agg.metric << " |\n|";
    for (std::size_t i = 0; i < agg.group_by.size() + 2; ++i) out << "---|";
    out << '\n';
    for (const auto& r : agg.rows)
        out << "| " << join(r.key, " | ") << " | " << r.n << " | " << fmt(r.mean, 4) << " ± " << fmt(r.std, 4) << " |\n";
}

PlotKind plot_kind_from_string(const std::string& s) {
    if (s == "lines_vs_size" || s == "lines") return PlotKind::lines_vs_size;
    if (s == "grouped_bars" || s == "bars") return PlotKind::grouped_bars;
    throw ConfigError("unknown plot kind '" + s + "' (expected lines_vs_size or grouped_bars)");
}

PlotFiles emit_plot(const Aggregate& agg, PlotKind kind, const std::filesystem::path& stem, const std::string& title) {
    if (agg.rows.empty()) throw InputError("nothing to plot");
    std::ostringstream svg;
    if (kind == PlotKind::lines_vs_size) {
        const auto it = std::find(agg.group_by.begin(), agg.group_by.end(), "size");
        if (it == agg.group_by.end()) throw InputError("lines_vs_size plot needs the 'size' field in group_by");
        lines_svg(svg, agg, static_cast<std::size_t>(it - agg.group_by.begin()), title);
    } else {
        bars_svg(svg, agg, title);
    }
    PlotFiles files{stem, stem};
    files.svg += ".svg";
    files.csv += ".csv";
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    std::ofstream(files.svg) << svg.str();
    std::ofstream csv(files.csv);
    write_csv(agg, csv);
    if (!csv) throw InputError("cannot write " + files.csv.string());
    return files;
}

}  // namespace ftlab
