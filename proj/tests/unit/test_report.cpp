#include "dps/discovery.hpp"
#include "dps/error.hpp"
#include "dps/pipeline.hpp"
#include "dps/report.hpp"

#include <doctest.h>

#include <filesystem>
#include <sstream>

using namespace dps;

TEST_CASE("report csv round trip") {
    ReportRow a;
    a.method    = "dps_global";
    a.gamma     = 0.25;
    a.k         = 8;
    a.routing   = "global";
    a.nll       = 4.355512345678901;
    a.nll_lower = a.nll_upper = a.nll;
    a.alignment = 0.1 + 0.2;
    a.improved_fraction = 2.0 / 3.0;
    a.greedy_alignment  = 0.75;
    ReportRow b;
    b.method      = "ablation_random_heads";
    b.seeds       = 20;
    b.nll         = 1e-300;
    b.delta_nll   = -0.0125;
    b.delta_lower = -1e10;
    b.delta_upper = 3.5;

    std::stringstream ss;
    write_report_csv({a, b}, ss);
    const auto back = read_report_csv(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0] == a);
    CHECK(back[1] == b);
}

TEST_CASE("empty report has only a header") {
    std::stringstream ss;
    write_report_csv({}, ss);
    std::string line;
    size_t      lines = 0;
    while (std::getline(ss, line)) ++lines;
    CHECK(lines == 1);
    std::stringstream again(ss.str());
    CHECK(read_report_csv(again).empty());
}

TEST_CASE("malformed csv is a schema error") {
    std::stringstream ss("method,gamma\nx,1\n");
    try {
        read_report_csv(ss);
        FAIL("expected an error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::schema);
    }
}

TEST_CASE("user overlap grid is symmetric with a unit diagonal") {
    std::vector<HeadSet> sets(5);
    sets[0].heads = {{0, 0}, {0, 1}, {1, 1}};
    sets[1].heads = {{0, 0}, {1, 1}, {2, 3}};
    sets[2].heads = {{3, 3}};
    sets[3].heads = {};
    sets[4].heads = {{0, 1}, {0, 0}, {1, 1}};
    const auto m  = overlap_matrix(sets);

    Heatmap h;
    h.name = "jaccard_users";
    for (int i = 0; i < 5; ++i) {
        h.row_labels.push_back("user_00" + std::to_string(i));
        h.col_labels.push_back(h.row_labels.back());
    }
    h.values = m;
    std::stringstream ss;
    write_heatmap_csv(h, ss);
    const auto back = read_heatmap_csv(ss, "jaccard_users");
    CHECK(back == h);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(back.values[i][i] == 1.0);
        for (size_t j = 0; j < 5; ++j) CHECK(back.values[i][j] == back.values[j][i]);
    }
    CHECK(m[0][4] == 1.0);
    CHECK(m[0][1] == doctest::Approx(0.5));
    CHECK(m[2][3] == 0.0);
}

TEST_CASE("report directory layout") {
    BenchReport r;
    r.rows.resize(1);
    r.rows[0].method = "vanilla";
    r.summary["causal.separated"] = 1;
    r.environment["compiler"]     = "test";
    Heatmap h;
    h.name       = "grid";
    h.row_labels = {"a"};
    h.col_labels = {"b"};
    h.values     = {{0.5}};
    r.heatmaps.push_back(h);
    const auto dir = std::filesystem::temp_directory_path() / "dps_test_report";
    std::filesystem::remove_all(dir);
    emit_report(r, dir);
    CHECK(read_report_csv(dir / "report.csv") == r.rows);
    const auto j = load_report_json(dir / "report.json");
    CHECK(j.summary == r.summary);
    CHECK(j.environment == r.environment);
    CHECK(std::filesystem::exists(dir / "heatmaps" / "grid.csv"));
}

TEST_CASE("number formatting round trips") {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -0.0, 4.0}) {
        CHECK(std::stod(format_number(v)) == v);
    }
}

TEST_CASE("bench config json round trip and strictness") {
    BenchConfig c;
    c.seed              = 123;
    c.topk              = 5;
    c.gammas            = {0.0, 0.5};
    c.synth.eval_per_user = 9;
    c.train.steps       = 17;
    const BenchConfig back = bench_config_from_json(config_json(c));
    CHECK(config_json(back) == config_json(c));
    CHECK(back.seed == 123);
    CHECK(back.synth == c.synth);

    for (const char * bad : {R"({"sed": 1})", R"({"seed": "x"})", R"({"synth": {"clusters": 2}})", "[1]", "{"}) {
        try {
            bench_config_from_json(bad);
            FAIL("expected an error for " << bad);
        } catch (const Error & e) {
            CHECK(e.kind() == ErrorKind::schema);
        }
    }
    const auto partial = bench_config_from_json(R"({"topk": 3})");
    CHECK(partial.topk == 3);
    CHECK(partial.seed == 7);
}
