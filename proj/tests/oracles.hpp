#pragma once

// Reference implementations the tests compare the library against. Each one is the
// slowest obvious way to compute the quantity.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "ndt/harmonize.hpp"
#include "ndt/models/mlp.hpp"

namespace oracle {

/// Sort, take the order statistics at round(p * (n - 1)), count values in the closed band.
inline std::size_t trim_kept(std::vector<double> ys, double lo_pct, double hi_pct) {
    std::sort(ys.begin(), ys.end());
    const double n1 = static_cast<double>(ys.size() - 1);
    const double lo = ys[static_cast<std::size_t>(std::llround(lo_pct / 100.0 * n1))];
    const double hi = ys[static_cast<std::size_t>(std::llround(hi_pct / 100.0 * n1))];
    std::size_t kept = 0;
    for (double y : ys) kept += (y >= lo && y <= hi);
    return kept;
}

/// Recount of sign agreement; returns NaN when every pair is tied.
inline double sign_agreement(const std::vector<double>& truth, const std::vector<double>& pred, double eps) {
    auto sign = [eps](double v) {
        if (std::abs(v) < eps || v == 0.0) return 0;
        return v > 0.0 ? 1 : -1;
    };
    int untied = 0, agree = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (sign(truth[i]) == 0) continue;
        ++untied;
        if (sign(pred[i]) == sign(truth[i])) ++agree;
    }
    if (untied == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(agree) / untied;
}

struct Match {
    std::size_t to = 0;
    double distance = 0.0;
};

/// All-pairs nearest neighbour over the named nuisance features, pooled z-scores.
inline std::vector<std::optional<Match>> nearest_neighbours(const std::vector<ndt::hdl::DatasetRow>& from,
                                                            const std::vector<ndt::hdl::DatasetRow>& to,
                                                            const std::vector<std::string>& features,
                                                            double caliper) {
    auto value = [](const ndt::hdl::FeatureVector& f, const std::string& name) {
        if (name == "cpu_process_pct") return f.cpu_process_pct;
        if (name == "cpu_system_pct") return f.cpu_system_pct;
        return f.mem_system_pct;
    };
    std::vector<double> mean(features.size(), 0.0), sd(features.size(), 0.0);
    const double n = static_cast<double>(from.size() + to.size());
    for (std::size_t k = 0; k < features.size(); ++k) {
        for (const auto* side : {&from, &to}) {
            for (const auto& r : *side) mean[k] += value(r.features, features[k]);
        }
        mean[k] /= n;
        for (const auto* side : {&from, &to}) {
            for (const auto& r : *side) sd[k] += std::pow(value(r.features, features[k]) - mean[k], 2);
        }
        sd[k] = std::sqrt(sd[k] / n);
        if (sd[k] == 0.0) sd[k] = 1.0;
    }
    std::vector<std::optional<Match>> out;
    for (const auto& a : from) {
        std::optional<Match> best;
        for (std::size_t j = 0; j < to.size(); ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < features.size(); ++k) {
                d2 += std::pow((value(a.features, features[k]) - value(to[j].features, features[k])) / sd[k], 2);
            }
            const double d = std::sqrt(d2);
            if (!best || d < best->distance) best = Match{j, d};
        }
        out.push_back(best && best->distance <= caliper ? best : std::nullopt);
    }
    return out;
}

struct GradCheck {
    double max_relative_error = 0.0;
    int probes = 0;
};

/// Central differences on `probes` random parameters of a random batch, compared with
/// the analytic gradient. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck mlp_gradient_check(ndt::models::MlpNetwork net, int probes, std::uint64_t seed,
                                    double step = 1e-6, double floor = 1e-6) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    const std::size_t inputs = static_cast<std::size_t>(net.hidden().front().in);
    const std::size_t batch = 8;
    std::vector<double> x(batch * inputs), y(batch);
    for (auto& v : x) v = z(gen);
    for (auto& v : y) v = 2.0 * z(gen);

    std::vector<double> grad, scratch;
    net.loss_and_gradient(x, y, 1.0, 0.0, nullptr, grad, false);
    std::uniform_int_distribution<std::size_t> pick(0, net.params().size() - 1);

    GradCheck out;
    for (int p = 0; p < probes; ++p) {
        const std::size_t k = pick(gen);
        const double saved = net.params()[k];
        net.params()[k] = saved + step;
        const double up = net.loss_and_gradient(x, y, 1.0, 0.0, nullptr, scratch, false);
        net.params()[k] = saved - step;
        const double down = net.loss_and_gradient(x, y, 1.0, 0.0, nullptr, scratch, false);
        net.params()[k] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(grad[k]), std::abs(numeric), floor});
        out.max_relative_error = std::max(out.max_relative_error, std::abs(grad[k] - numeric) / denom);
        ++out.probes;
    }
    return out;
}

}  // namespace oracle
