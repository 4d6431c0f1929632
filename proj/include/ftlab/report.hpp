#pragma once

// Aggregation of sweep results and their tables and plots.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ftlab/finetune.hpp"

namespace ftlab {

/// Grouping keys: method, policy, size (from tags), seed, or any other tag name.
/// Metrics: test_metric, best_metric, best_epoch, convergence_epoch, trainable_param_count.
std::string record_field(const RunRecord& record, const std::string& field);
double record_metric(const RunRecord& record, const std::string& metric);

struct AggregateRow {
    std::vector<std::string> key;  // one value per group_by field
    std::size_t n = 0;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 when n == 1
};

struct Aggregate {
    std::vector<std::string> group_by;
    std::string metric;
    std::vector<AggregateRow> rows;  // sorted by key, sizes numerically
    std::vector<std::string> warnings;
};

/// Throws InputError for an empty record list or a field missing from a record.
Aggregate aggregate(const std::vector<RunRecord>& records, const std::vector<std::string>& group_by,
                    const std::string& metric);

/// Columns: the group_by fields, n, mean, std. Numbers use %.17g, so the CSV round-trips.
void write_csv(const Aggregate& agg, std::ostream& out);
void write_markdown(const Aggregate& agg, std::ostream& out);

enum class PlotKind { lines_vs_size, grouped_bars };
PlotKind plot_kind_from_string(const std::string& s);

struct PlotFiles {
    std::filesystem::path svg, csv;
};

/// lines_vs_size: x is the "size" field on a log axis, one line per combination of the
/// other fields. grouped_bars: one group per value of the first field, one bar per
/// combination of the rest. Error bars show one std. Writes <stem>.svg and <stem>.csv,
/// the sidecar being exactly write_csv(agg). Throws InputError naming a missing axis.
PlotFiles emit_plot(const Aggregate& agg, PlotKind kind, const std::filesystem::path& stem,
                    const std::string& title = "");

}  // namespace ftlab
