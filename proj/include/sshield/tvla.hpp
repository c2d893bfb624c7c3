#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <vector>

#include "sshield/leakage.hpp"

namespace sshield {

// Welch's t-test leakage assessment over fixed-vs-random trace sets.

struct TraceView {
    const float* data = nullptr;
    size_t rows = 0;
    size_t cols = 0;

    const float* row(size_t i) const { return data + i * cols; }
};

// Per-point t = (mean_a - mean_b) / sqrt(var_a/n_a + var_b/n_b), sample
// variance with n-1. Means and variances use Welford's update in doubles,
// accumulated in row order so the reduction is deterministic. Zero variance
// in both groups gives t = 0 for equal means and a signed infinity sentinel
// otherwise.
inline std::vector<double> welch_t(const TraceView& a, const TraceView& b) {
    if (a.rows < 2 || b.rows < 2) throw std::invalid_argument("welch_t: each group needs >= 2 traces");
    if (a.cols != b.cols) throw std::invalid_argument("welch_t: trace length mismatch");

    const size_t len = a.cols;
    std::vector<double> mean_a(len, 0.0), m2_a(len, 0.0), mean_b(len, 0.0), m2_b(len, 0.0);
    for (size_t i = 0; i < a.rows; ++i) {
        const float* row = a.row(i);
        const double k = static_cast<double>(i + 1);
        for (size_t p = 0; p < len; ++p) {
            const double d1 = row[p] - mean_a[p];
            mean_a[p] += d1 / k;
            m2_a[p] += d1 * (row[p] - mean_a[p]);
        }
    }
    for (size_t i = 0; i < b.rows; ++i) {
        const float* row = b.row(i);
        const double k = static_cast<double>(i + 1);
        for (size_t p = 0; p < len; ++p) {
            const double d1 = row[p] - mean_b[p];
            mean_b[p] += d1 / k;
            m2_b[p] += d1 * (row[p] - mean_b[p]);
        }
    }

    std::vector<double> t(len);
    for (size_t p = 0; p < len; ++p) {
        const double var_a = m2_a[p] / static_cast<double>(a.rows - 1);
        const double var_b = m2_b[p] / static_cast<double>(b.rows - 1);
        const double diff = mean_a[p] - mean_b[p];
        const double denom = var_a / static_cast<double>(a.rows) + var_b / static_cast<double>(b.rows);
        if (denom == 0.0) {
            t[p] = diff == 0.0 ? 0.0
                               : std::copysign(std::numeric_limits<double>::infinity(), diff);
        } else {
            t[p] = diff / std::sqrt(denom);
        }
    }
    return t;
}

struct TvlaResult {
    std::vector<double> t_scores;
    double max_abs_t = 0.0;
    double threshold = 4.5;
    std::vector<size_t> leaky_points;       // |t| > threshold
    std::vector<size_t> degenerate_points;  // infinite-t sentinel locations
};

inline TvlaResult run_tvla(const TraceSet& ts, double threshold = 4.5) {
    const size_t n_fixed = ts.count_label(TraceLabel::Fixed);
    const size_t n_random = ts.size() - n_fixed;
    if (n_fixed < 2 || n_random < 2) throw std::invalid_argument("run_tvla: each label group needs >= 2 traces");

    // stable partition into two row-major matrices
    std::vector<float> fixed(n_fixed * ts.trace_len), random(n_random * ts.trace_len);
    size_t fi = 0, ri = 0;
    for (size_t i = 0; i < ts.size(); ++i) {
        float* dst = ts.labels[i] == static_cast<uint8_t>(TraceLabel::Fixed) ? fixed.data() + (fi++) * ts.trace_len
                                                                             : random.data() + (ri++) * ts.trace_len;
        const float* src = ts.trace(i);
        std::copy(src, src + ts.trace_len, dst);
    }

    TvlaResult result;
    result.threshold = threshold;
    result.t_scores = welch_t({fixed.data(), n_fixed, ts.trace_len}, {random.data(), n_random, ts.trace_len});
    for (size_t p = 0; p < result.t_scores.size(); ++p) {
        const double at = std::fabs(result.t_scores[p]);
        if (std::isinf(at)) result.degenerate_points.push_back(p);
        if (at > threshold) result.leaky_points.push_back(p);
        result.max_abs_t = std::max(result.max_abs_t, at);
    }
    return result;
}

struct EvolutionCurve {
    std::vector<std::pair<size_t, double>> checkpoints;  // (n traces used, max |t|)
};

// Prefix re-analysis: checkpoint n means "the first n traces in capture
// order", matching how a live campaign accumulates measurements.
inline EvolutionCurve t_evolution(const TraceSet& ts, const std::vector<size_t>& checkpoints,
                                  double threshold = 4.5) {
    EvolutionCurve curve;
    size_t prev = 0;
    for (size_t n : checkpoints) {
        if (n <= prev) throw std::invalid_argument("t_evolution: checkpoints must be strictly increasing");
        if (n > ts.size()) throw std::invalid_argument("t_evolution: checkpoint exceeds available traces");
        prev = n;
        TraceSet prefix;
        prefix.condition = ts.condition;
        prefix.trace_len = ts.trace_len;
        prefix.labels.assign(ts.labels.begin(), ts.labels.begin() + n);
        prefix.samples.assign(ts.samples.begin(), ts.samples.begin() + n * ts.trace_len);
        curve.checkpoints.emplace_back(n, run_tvla(prefix, threshold).max_abs_t);
    }
    return curve;
}

inline void write_tvla_csv(std::ostream& os, const TvlaResult& r) {
    os << "point,t,leaky\n";
    for (size_t p = 0; p < r.t_scores.size(); ++p) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.9g", r.t_scores[p]);
        os << p << ',' << buf << ',' << (std::fabs(r.t_scores[p]) > r.threshold ? 1 : 0) << '\n';
    }
}

inline void write_evolution_csv(std::ostream& os, const EvolutionCurve& c) {
    os << "n_traces,max_abs_t\n";
    for (const auto& [n, t] : c.checkpoints) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.9g", t);
        os << n << ',' << buf << '\n';
    }
}

}  // namespace sshield
