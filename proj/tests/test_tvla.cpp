#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "sshield/tvla.hpp"
#include "testutil.hpp"

using namespace sshield;

namespace {

TraceView view_of(const std::vector<float>& flat, size_t rows, size_t cols) {
    return TraceView{flat.data(), rows, cols};
}

TraceSet make_traceset(const std::vector<std::vector<float>>& fixed, const std::vector<std::vector<float>>& random) {
    TraceSet ts;
    ts.trace_len = fixed.at(0).size();
    for (const auto& t : fixed) {
        ts.labels.push_back(static_cast<uint8_t>(TraceLabel::Fixed));
        ts.samples.insert(ts.samples.end(), t.begin(), t.end());
    }
    for (const auto& t : random) {
        ts.labels.push_back(static_cast<uint8_t>(TraceLabel::Random));
        ts.samples.insert(ts.samples.end(), t.begin(), t.end());
    }
    return ts;
}

}  // namespace

TEST_CASE("welch_t hand-checked example") {
    std::vector<float> a = {0, 0, 2, 2};
    std::vector<float> b = {1, 1, 3, 3};
    auto t = welch_t(view_of(a, 4, 1), view_of(b, 4, 1));
    REQUIRE(t.size() == 1);
    REQUIRE_THAT(t[0], Catch::Matchers::WithinAbs(-1.224744871, 1e-6));
}

TEST_CASE("welch_t identical groups give zero") {
    std::vector<float> a = {1, 2, 3, 4, 5, 6};
    auto t = welch_t(view_of(a, 3, 2), view_of(a, 3, 2));
    for (double v : t) REQUIRE(v == 0.0);
}

TEST_CASE("welch_t argument validation") {
    std::vector<float> a = {1, 2};
    std::vector<float> b = {1, 2, 3, 4};
    REQUIRE_THROWS_AS(welch_t(view_of(a, 1, 2), view_of(b, 2, 2)), std::invalid_argument);
    REQUIRE_THROWS_AS(welch_t(view_of(b, 2, 2), view_of(b, 4, 1)), std::invalid_argument);
}

TEST_CASE("welch_t antisymmetry and affine invariance") {
    // values on a 1/16 grid and power-of-two scales keep the affine map
    // exact in float, so only the double-precision reduction is measured
    Rng rng(123);
    for (int rep = 0; rep < 1000; ++rep) {
        const size_t rows = 2 + rng.uniform_index(6);
        const size_t cols = 1 + rng.uniform_index(4);
        std::vector<float> a(rows * cols), b(rows * cols);
        for (float& v : a) v = static_cast<float>(rng.uniform_index(512)) / 16.0f;
        for (float& v : b) v = static_cast<float>(rng.uniform_index(512)) / 16.0f + 2.0f;

        auto tab = welch_t(view_of(a, rows, cols), view_of(b, rows, cols));
        auto tba = welch_t(view_of(b, rows, cols), view_of(a, rows, cols));
        for (size_t p = 0; p < tab.size(); ++p) REQUIRE(tab[p] == -tba[p]);

        const float scale = std::ldexp(1.0f, static_cast<int>(rng.uniform_index(5)) - 2);
        const float offset = static_cast<float>(rng.uniform_index(64)) / 16.0f;
        std::vector<float> a2(a), b2(b);
        for (float& v : a2) v = scale * v + offset;
        for (float& v : b2) v = scale * v + offset;
        auto t2 = welch_t(view_of(a2, rows, cols), view_of(b2, rows, cols));
        for (size_t p = 0; p < tab.size(); ++p) {
            if (std::isinf(tab[p])) {
                REQUIRE(t2[p] == tab[p]);
            } else {
                REQUIRE_THAT(t2[p], Catch::Matchers::WithinAbs(tab[p], 1e-9));
            }
        }
    }
}

TEST_CASE("welch_t false positive rate on null data") {
    Rng rng(777);
    const size_t points = 100, n = 5000;
    int passes = 0;
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<float> a(n * points), b(n * points);
        for (float& v : a) v = static_cast<float>(rng.normal());
        for (float& v : b) v = static_cast<float>(rng.normal());
        auto t = welch_t(view_of(a, n, points), view_of(b, n, points));
        double mx = 0.0;
        for (double v : t) mx = std::max(mx, std::fabs(v));
        if (mx < 4.5) ++passes;
    }
    REQUIRE(passes >= 9);
}

TEST_CASE("planted leak: argmax point and sqrt(n) scaling") {
    Rng rng(888);
    const size_t points = 20;
    const double delta = 0.5, sigma = 1.0;
    auto build = [&](size_t n) {
        std::vector<float> a(n * points), b(n * points);
        for (size_t i = 0; i < n; ++i)
            for (size_t p = 0; p < points; ++p) {
                const double bump = (p == 7) ? delta : 0.0;
                a[i * points + p] = static_cast<float>(rng.normal(bump, sigma));
                b[i * points + p] = static_cast<float>(rng.normal(0.0, sigma));
            }
        auto t = welch_t(view_of(a, n, points), view_of(b, n, points));
        size_t arg = 0;
        double mx = 0.0;
        for (size_t p = 0; p < points; ++p)
            if (std::fabs(t[p]) > mx) {
                mx = std::fabs(t[p]);
                arg = p;
            }
        return std::pair<size_t, double>{arg, mx};
    };

    auto [arg1, t1] = build(1000);
    REQUIRE(arg1 == 7);
    auto [arg2, t2] = build(2000);
    REQUIRE(arg2 == 7);
    const double ratio = t2 / t1;
    REQUIRE(ratio > std::sqrt(2.0) * 0.75);
    REQUIRE(ratio < std::sqrt(2.0) * 1.25);
}

TEST_CASE("run_tvla") {
    SECTION("degenerate zero-variance points are flagged, not fatal") {
        // fixed group constant at both points; random group constant at point 0
        // with a different value (infinite t), same value at point 1 (t = 0)
        auto ts = make_traceset({{1.0f, 2.0f}, {1.0f, 2.0f}, {1.0f, 2.0f}},
                                {{3.0f, 2.0f}, {3.0f, 2.0f}, {3.0f, 2.0f}});
        auto r = run_tvla(ts, 4.5);
        REQUIRE(r.degenerate_points == std::vector<size_t>{0});
        REQUIRE(std::isinf(r.t_scores[0]));
        REQUIRE(r.t_scores[0] < 0.0);  // fixed mean 1 < random mean 3
        REQUIRE(r.t_scores[1] == 0.0);
        REQUIRE(std::isinf(r.max_abs_t));
        REQUIRE(r.leaky_points == std::vector<size_t>{0});
    }

    SECTION("group size validation") {
        auto ts = make_traceset({{1.0f}}, {{2.0f}, {3.0f}});
        REQUIRE_THROWS_AS(run_tvla(ts, 4.5), std::invalid_argument);
    }

    SECTION("max_abs_t consistent with scores and threshold") {
        Rng rng(99);
        std::vector<std::vector<float>> fixed, random;
        for (int i = 0; i < 50; ++i) {
            fixed.push_back({static_cast<float>(rng.normal(5.0, 1.0)), static_cast<float>(rng.normal(0, 1))});
            random.push_back({static_cast<float>(rng.normal(0.0, 1.0)), static_cast<float>(rng.normal(0, 1))});
        }
        auto r = run_tvla(make_traceset(fixed, random), 4.5);
        double mx = 0.0;
        for (double v : r.t_scores) mx = std::max(mx, std::fabs(v));
        REQUIRE(r.max_abs_t == mx);
        for (size_t p : r.leaky_points) REQUIRE(std::fabs(r.t_scores[p]) > r.threshold);
        REQUIRE(r.max_abs_t > 4.5);
        REQUIRE(r.leaky_points == std::vector<size_t>{0});
    }
}

TEST_CASE("t_evolution") {
    Rng rng(1234);
    std::vector<std::vector<float>> fixed, random;
    for (int i = 0; i < 200; ++i) {
        fixed.push_back({static_cast<float>(rng.normal(0.4, 1.0))});
        random.push_back({static_cast<float>(rng.normal(0.0, 1.0))});
    }
    // interleave labels so prefixes contain both groups
    TraceSet ts;
    ts.trace_len = 1;
    for (int i = 0; i < 200; ++i) {
        ts.labels.push_back(static_cast<uint8_t>(TraceLabel::Fixed));
        ts.samples.push_back(fixed[i][0]);
        ts.labels.push_back(static_cast<uint8_t>(TraceLabel::Random));
        ts.samples.push_back(random[i][0]);
    }

    SECTION("single checkpoint equals run_tvla on that prefix") {
        auto curve = t_evolution(ts, {100});
        TraceSet prefix;
        prefix.trace_len = 1;
        prefix.labels.assign(ts.labels.begin(), ts.labels.begin() + 100);
        prefix.samples.assign(ts.samples.begin(), ts.samples.begin() + 100);
        REQUIRE(curve.checkpoints.size() == 1);
        REQUIRE(curve.checkpoints[0].second == run_tvla(prefix).max_abs_t);
    }

    SECTION("checkpoint validation") {
        REQUIRE_THROWS_AS(t_evolution(ts, {100, 100}), std::invalid_argument);
        REQUIRE_THROWS_AS(t_evolution(ts, {100, 50}), std::invalid_argument);
        REQUIRE_THROWS_AS(t_evolution(ts, {100, 100000}), std::invalid_argument);
    }

    SECTION("growing prefix grows |t| for a real difference") {
        auto curve = t_evolution(ts, {100, 400});
        REQUIRE(curve.checkpoints[1].second > curve.checkpoints[0].second);
    }
}

TEST_CASE("csv writers") {
    auto ts = make_traceset({{1.0f, 2.0f}, {1.1f, 2.0f}, {0.9f, 2.1f}},
                            {{3.0f, 2.0f}, {3.1f, 1.9f}, {2.9f, 2.0f}});
    auto r = run_tvla(ts, 4.5);
    std::ostringstream os;
    write_tvla_csv(os, r);
    const std::string csv = os.str();
    REQUIRE(csv.rfind("point,t,leaky\n", 0) == 0);
    size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    REQUIRE(lines == 1 + r.t_scores.size());

    auto curve = t_evolution(ts, {5, 6});
    std::ostringstream os2;
    write_evolution_csv(os2, curve);
    REQUIRE(os2.str().rfind("n_traces,max_abs_t\n", 0) == 0);
}
