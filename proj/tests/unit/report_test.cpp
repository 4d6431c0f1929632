#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "ftlab/report.hpp"
#include "support/tempdir.hpp"

namespace ftlab {
namespace {

RunRecord rec(const std::string& method, const std::string& policy, std::int64_t size, std::uint64_t seed, double m) {
    RunRecord r;
    r.fingerprint = method + policy + std::to_string(size) + std::to_string(seed);
    r.seed = seed;
    r.test_metric = m;
    r.tags = {{"method", method}, {"policy", policy}, {"size", std::to_string(size)}};
    return r;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::size_t count(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
    return n;
}

TEST(Aggregate, MeanAndSampleStd) {
    const auto agg = aggregate({rec("mae", "e2e", 100, 0, 64.22), rec("mae", "e2e", 100, 1, 65.19),
                                rec("mae", "e2e", 100, 2, 66.16)},
                               {"method"}, "test_metric");
    ASSERT_EQ(agg.rows.size(), 1u);
    EXPECT_EQ(agg.rows[0].n, 3u);
    EXPECT_NEAR(agg.rows[0].mean, 65.19, 1e-12);
    EXPECT_NEAR(agg.rows[0].std, 0.97, 1e-12);
    EXPECT_TRUE(agg.warnings.empty());
}

TEST(Aggregate, IdenticalValuesGiveExactMeanAndZeroStd) {
    const double v = 0.1 + 0.2;
    const auto agg = aggregate({rec("a", "e2e", 1, 0, v), rec("a", "e2e", 1, 1, v), rec("a", "e2e", 1, 2, v)},
                               {"method"}, "test_metric");
    EXPECT_EQ(agg.rows[0].mean, v);
    EXPECT_EQ(agg.rows[0].std, 0.0);
}

TEST(Aggregate, SingleRecordWarns) {
    const auto agg = aggregate({rec("a", "e2e", 1, 0, 0.7)}, {"method", "policy"}, "test_metric");
    EXPECT_EQ(agg.rows[0].std, 0.0);
    ASSERT_EQ(agg.warnings.size(), 1u);
    EXPECT_NE(agg.warnings[0].find("a/e2e"), std::string::npos);
}

TEST(Aggregate, SortsSizesNumericallyAndGroups) {
    std::vector<RunRecord> rs;
    for (std::int64_t n : {1000, 20, 100})
        for (std::uint64_t s = 0; s < 2; ++s) rs.push_back(rec("mae", "e2e", n, s, 0.5 + 0.01 * s));
    const auto agg = aggregate(rs, {"method", "size"}, "test_metric");
    ASSERT_EQ(agg.rows.size(), 3u);
    EXPECT_EQ(agg.rows[0].key[1], "20");
    EXPECT_EQ(agg.rows[1].key[1], "100");
    EXPECT_EQ(agg.rows[2].key[1], "1000");
}

TEST(Aggregate, Errors) {
    EXPECT_THROW(aggregate({}, {"method"}, "test_metric"), InputError);
    EXPECT_THROW(aggregate({rec("a", "e2e", 1, 0, 0.1)}, {"dataset"}, "test_metric"), InputError);
    EXPECT_THROW(aggregate({rec("a", "e2e", 1, 0, 0.1)}, {"method"}, "accuracy"), InputError);
}

TEST(Plot, LinesSidecarEqualsTableAndHasEverySeries) {
    std::vector<RunRecord> rs;
    for (const auto* m : {"mae", "moco"})
        for (const auto* p : {"e2e", "shallow:3"})
            for (std::int64_t n : {10, 100, 1000, 10000})
                for (std::uint64_t s = 0; s < 3; ++s) rs.push_back(rec(m, p, n, s, 0.5 + 0.001 * n / (s + 1.0)));
    const auto agg = aggregate(rs, {"method", "policy", "size"}, "test_metric");
    testkit::TempDir dir;
    const auto files = emit_plot(agg, PlotKind::lines_vs_size, dir.path() / "fig1");
    std::ostringstream table;
    write_csv(agg, table);
    EXPECT_EQ(slurp(files.csv), table.str());

    const auto svg = slurp(files.svg);
    EXPECT_EQ(count(svg, "class=\"series\""), 4u);
    EXPECT_EQ(count(svg, "class=\"xtick\""), 4u);
    EXPECT_NE(svg.find("mae / shallow:3"), std::string::npos);
    EXPECT_NE(svg.find("log scale"), std::string::npos);
    EXPECT_EQ(count(svg, "class=\"errorbar\""), 16u);
}

TEST(Plot, CsvValuesRoundTrip) {
    const auto agg = aggregate({rec("a", "e2e", 5, 0, 1.0 / 3.0), rec("a", "e2e", 5, 1, 2.0 / 7.0)}, {"method"},
                               "test_metric");
    std::ostringstream os;
    write_csv(agg, os);
    std::istringstream is(os.str());
    std::string header, line;
    std::getline(is, header);
    std::getline(is, line);
    EXPECT_EQ(header, "method,n,mean,std");
    std::stringstream ls(line);
    std::string key, n, mean, sd;
    std::getline(ls, key, ',');
    std::getline(ls, n, ',');
    std::getline(ls, mean, ',');
    std::getline(ls, sd, ',');
    EXPECT_EQ(std::stod(mean), agg.rows[0].mean);
    EXPECT_EQ(std::stod(sd), agg.rows[0].std);
}

TEST(Plot, GroupedBars) {
    std::vector<RunRecord> rs;
    for (const auto* p : {"e2e", "shallow:6", "surgical:1-3"})
        for (const auto* m : {"mae", "moco"})
            for (std::uint64_t s = 0; s < 3; ++s) rs.push_back(rec(m, p, 100, s, 0.6 + 0.01 * s));
    const auto agg = aggregate(rs, {"policy", "method"}, "test_metric");
    testkit::TempDir dir;
    const auto files = emit_plot(agg, PlotKind::grouped_bars, dir.path() / "sub" / "fig2", "policies");
    const auto svg = slurp(files.svg);
    EXPECT_EQ(count(svg, "class=\"series\""), 2u);
    EXPECT_EQ(count(svg, "<rect x="), 6u + 2u);  // bars plus legend swatches
    EXPECT_EQ(count(svg, "class=\"xtick\""), 3u);
    std::ostringstream table;
    write_csv(agg, table);
    EXPECT_EQ(slurp(files.csv), table.str());
}

TEST(Plot, MissingAxisIsNamed) {
    const auto agg = aggregate({rec("a", "e2e", 5, 0, 0.5)}, {"method", "policy"}, "test_metric");
    testkit::TempDir dir;
    try {
        emit_plot(agg, PlotKind::lines_vs_size, dir.path() / "x");
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("size"), std::string::npos);
    }
    EXPECT_THROW(plot_kind_from_string("pie"), ConfigError);
}

}  // namespace
}  // namespace ftlab
