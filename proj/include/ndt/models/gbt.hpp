#pragma once

// Squared-error gradient boosting over depth-limited regression trees. Splits are exact
// greedy searches over presorted feature columns, grown one level at a time.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/error.hpp"
#include "ndt/harmonize.hpp"
#include "ndt/rng.hpp"

namespace ndt::models {

struct GbtConfig {
    int n_estimators = 300;
    int max_depth = 6;
    double learning_rate = 0.05;
    int min_samples_leaf = 20;
    double subsample = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        require(n_estimators >= 1, "n_estimators must be >= 1");
        require(max_depth >= 1, "max_depth must be >= 1");
        require(learning_rate > 0.0 && learning_rate <= 1.0, "learning_rate outside (0,1]");
        require(min_samples_leaf >= 1, "min_samples_leaf must be >= 1");
        require(subsample > 0.0 && subsample <= 1.0, "subsample outside (0,1]");
    }
};

inline ordered_json to_json(const GbtConfig& c) {
    return ordered_json{{"n_estimators", c.n_estimators}, {"max_depth", c.max_depth},
                        {"learning_rate", c.learning_rate}, {"min_samples_leaf", c.min_samples_leaf},
                        {"subsample", c.subsample},       {"seed", c.seed}};
}

inline GbtConfig gbt_config_from_json(const nlohmann::json& j) {
    GbtConfig c;
    c.n_estimators = j.value("n_estimators", c.n_estimators);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.min_samples_leaf = j.value("min_samples_leaf", c.min_samples_leaf);
    c.subsample = j.value("subsample", c.subsample);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    double predict(std::span<const double> x) const {
        int i = 0;
        while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
            const auto& n = nodes[static_cast<std::size_t>(i)];
            i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }
};

struct GbtModel {
    double base_score = 0.0;
    std::vector<RegressionTree> trees;

    /// Prediction in log-target space.
    double predict_log(std::span<const double> x) const {
        double y = base_score;
        for (const auto& t : trees) y += t.predict(x);
        return y;
    }
};

/// Per-stage mean squared error on the training rows, index 0 is the base score alone.
struct GbtTrace {
    std::vector<double> train_mse;
};

namespace detail {

struct SplitCandidate {
    double gain = 0.0;
    int feature = -1;
    double threshold = 0.0;
};

struct NodeStats {
    int node = -1;
    double sum = 0.0;
    std::size_t count = 0;
};

class TreeBuilder {
public:
    TreeBuilder(const std::vector<std::vector<double>>& columns, const std::vector<std::vector<std::uint32_t>>& order,
                const GbtConfig& config)
        : columns_(columns), order_(order), config_(config) {}

    RegressionTree build(std::span<const double> residual, const std::vector<std::uint8_t>& in_bag) {
        const std::size_t n = residual.size();
        RegressionTree tree;
        node_of_.assign(n, -1);
        std::vector<NodeStats> frontier(1);
        frontier[0].node = 0;
        tree.nodes.emplace_back();
        for (std::size_t i = 0; i < n; ++i) {
            if (!in_bag[i]) continue;
            node_of_[i] = 0;
            frontier[0].sum += residual[i];
            ++frontier[0].count;
        }

        for (int depth = 0; depth < config_.max_depth && !frontier.empty(); ++depth) {
            const auto best = find_splits(residual, frontier, tree.nodes.size());
            std::vector<NodeStats> next;
            std::vector<int> left_of(tree.nodes.size(), -1), right_of(tree.nodes.size(), -1);
            for (std::size_t k = 0; k < frontier.size(); ++k) {
                const auto& fs = frontier[k];
                const auto id = static_cast<std::size_t>(fs.node);
                if (best[k].feature < 0) {
                    tree.nodes[id].value = leaf_value(fs);
                    continue;
                }
                const int left = static_cast<int>(tree.nodes.size());
                tree.nodes.emplace_back();
                tree.nodes.emplace_back();
                tree.nodes[id].feature = best[k].feature;
                tree.nodes[id].threshold = best[k].threshold;
                tree.nodes[id].left = left;
                tree.nodes[id].right = left + 1;
                left_of[id] = left;
                right_of[id] = left + 1;
            }
            std::vector<NodeStats> child_stats(tree.nodes.size());
            for (std::size_t i = 0; i < n; ++i) {
                const int cur = node_of_[i];
                if (cur < 0) continue;
                const auto& node = tree.nodes[static_cast<std::size_t>(cur)];
                if (node.feature < 0) {
                    node_of_[i] = -1;
                    continue;
                }
                const int child = columns_[static_cast<std::size_t>(node.feature)][i] <= node.threshold
                                      ? left_of[static_cast<std::size_t>(cur)]
                                      : right_of[static_cast<std::size_t>(cur)];
                node_of_[i] = child;
                auto& cs = child_stats[static_cast<std::size_t>(child)];
                cs.node = child;
                cs.sum += residual[i];
                ++cs.count;
            }
            for (const auto& fs : frontier) {
                const auto& node = tree.nodes[static_cast<std::size_t>(fs.node)];
                if (node.feature < 0) continue;
                next.push_back(child_stats[static_cast<std::size_t>(node.left)]);
                next.push_back(child_stats[static_cast<std::size_t>(node.right)]);
            }
            frontier = std::move(next);
        }
        for (const auto& fs : frontier) tree.nodes[static_cast<std::size_t>(fs.node)].value = leaf_value(fs);
        return tree;
    }

private:
    double leaf_value(const NodeStats& s) const {
        return s.count == 0 ? 0.0 : config_.learning_rate * s.sum / static_cast<double>(s.count);
    }

    std::vector<SplitCandidate> find_splits(std::span<const double> residual, const std::vector<NodeStats>& frontier,
                                            std::size_t node_count) const {
        const auto min_leaf = static_cast<std::size_t>(config_.min_samples_leaf);
        std::vector<int> slot(node_count, -1);
        for (std::size_t k = 0; k < frontier.size(); ++k) slot[static_cast<std::size_t>(frontier[k].node)] = static_cast<int>(k);

        std::vector<SplitCandidate> best(frontier.size());
        std::vector<double> left_sum(frontier.size());
        std::vector<std::size_t> left_count(frontier.size());
        std::vector<double> last_x(frontier.size());

        for (std::size_t f = 0; f < columns_.size(); ++f) {
            std::fill(left_sum.begin(), left_sum.end(), 0.0);
            std::fill(left_count.begin(), left_count.end(), 0);
            const auto& col = columns_[f];
            for (std::uint32_t i : order_[f]) {
                const int node = node_of_[i];
                if (node < 0) continue;
                const int k = slot[static_cast<std::size_t>(node)];
                if (k < 0) continue;
                const auto ks = static_cast<std::size_t>(k);
                const double x = col[i];
                const auto& fs = frontier[ks];
                const std::size_t nl = left_count[ks];
                if (nl > 0 && x > last_x[ks] && nl >= min_leaf && fs.count - nl >= min_leaf) {
                    const double sl = left_sum[ks];
                    const double sr = fs.sum - sl;
                    const auto nr = fs.count - nl;
                    const double gain = sl * sl / static_cast<double>(nl) + sr * sr / static_cast<double>(nr) -
                                        fs.sum * fs.sum / static_cast<double>(fs.count);
                    if (gain > best[ks].gain + 1e-12) {
                        double threshold = 0.5 * (last_x[ks] + x);
                        if (!(threshold < x)) threshold = last_x[ks];
                        best[ks] = SplitCandidate{gain, static_cast<int>(f), threshold};
                    }
                }
                left_sum[ks] += residual[i];
                ++left_count[ks];
                last_x[ks] = x;
            }
        }
        return best;
    }

    const std::vector<std::vector<double>>& columns_;
    const std::vector<std::vector<std::uint32_t>>& order_;
    const GbtConfig& config_;
    std::vector<int> node_of_;
};

}  // namespace detail

inline GbtModel fit_gbt(const hdl::RefinedDataset& train, const GbtConfig& config, GbtTrace* trace = nullptr) {
    config.validate();
    if (train.empty()) throw Error(Errc::empty_dataset, "training set is empty");
    const std::size_t n = train.size();
    std::vector<std::vector<double>> columns(hdl::kFeatureCount, std::vector<double>(n));
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = train.rows[i];
        if (!row.features.finite() || !std::isfinite(row.log_target)) {
            throw Error(Errc::non_finite_feature, "row " + std::to_string(i) + " is not finite");
        }
        const auto v = row.features.values();
        for (std::size_t f = 0; f < hdl::kFeatureCount; ++f) columns[f][i] = v[f];
        y[i] = row.log_target;
    }
    std::vector<std::vector<std::uint32_t>> order(hdl::kFeatureCount, std::vector<std::uint32_t>(n));
    for (std::size_t f = 0; f < hdl::kFeatureCount; ++f) {
        std::iota(order[f].begin(), order[f].end(), 0u);
        std::stable_sort(order[f].begin(), order[f].end(),
                         [&](std::uint32_t a, std::uint32_t b) { return columns[f][a] < columns[f][b]; });
    }

    GbtModel model;
    model.base_score = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    std::vector<double> fitted(n, model.base_score);
    std::vector<double> residual(n);
    std::vector<std::uint8_t> in_bag(n, 1);
    std::vector<std::uint32_t> perm(n);

    auto mse = [&] {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += (y[i] - fitted[i]) * (y[i] - fitted[i]);
        return acc / static_cast<double>(n);
    };
    if (trace) trace->train_mse.assign(1, mse());

    detail::TreeBuilder builder(columns, order, config);
    std::array<double, hdl::kFeatureCount> x{};
    for (int t = 0; t < config.n_estimators; ++t) {
        if (config.subsample < 1.0) {
            const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(config.subsample * static_cast<double>(n)));
            std::iota(perm.begin(), perm.end(), 0u);
            Rng rng = Rng::stream(config.seed, "gbt-subsample", static_cast<std::uint64_t>(t));
            for (std::size_t i = 0; i < keep; ++i) std::swap(perm[i], perm[i + rng.below(n - i)]);
            std::fill(in_bag.begin(), in_bag.end(), 0);
            for (std::size_t i = 0; i < keep; ++i) in_bag[perm[i]] = 1;
        }
        for (std::size_t i = 0; i < n; ++i) residual[i] = y[i] - fitted[i];
        RegressionTree tree = builder.build(residual, in_bag);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t f = 0; f < hdl::kFeatureCount; ++f) x[f] = columns[f][i];
            fitted[i] += tree.predict(x);
        }
        model.trees.push_back(std::move(tree));
        if (trace) trace->train_mse.push_back(mse());
    }
    return model;
}

inline ordered_json to_json(const GbtModel& m) {
    ordered_json trees = ordered_json::array();
    for (const auto& t : m.trees) {
        ordered_json feature = ordered_json::array(), threshold = ordered_json::array(), left = ordered_json::array(),
                     right = ordered_json::array(), value = ordered_json::array();
        for (const auto& n : t.nodes) {
            feature.push_back(n.feature);
            threshold.push_back(n.threshold);
            left.push_back(n.left);
            right.push_back(n.right);
            value.push_back(n.value);
        }
        trees.push_back(ordered_json{{"feature", feature}, {"threshold", threshold}, {"left", left},
                                     {"right", right},     {"value", value}});
    }
    return ordered_json{{"base_score", m.base_score}, {"trees", trees}};
}

inline GbtModel gbt_model_from_json(const nlohmann::json& j) {
    GbtModel m;
    m.base_score = j.at("base_score").get<double>();
    for (const auto& t : j.at("trees")) {
        const auto feature = t.at("feature").get<std::vector<int>>();
        const auto threshold = t.at("threshold").get<std::vector<double>>();
        const auto left = t.at("left").get<std::vector<int>>();
        const auto right = t.at("right").get<std::vector<int>>();
        const auto value = t.at("value").get<std::vector<double>>();
        const std::size_t n = feature.size();
        if (threshold.size() != n || left.size() != n || right.size() != n || value.size() != n || n == 0) {
            throw Error(Errc::corrupt_artifact, "inconsistent tree arrays");
        }
        RegressionTree tree;
        for (std::size_t i = 0; i < n; ++i) {
            const auto in_range = [&](int c) { return c > static_cast<int>(i) && c < static_cast<int>(n); };
            if (feature[i] >= static_cast<int>(hdl::kFeatureCount) ||
                (feature[i] >= 0 && (!in_range(left[i]) || !in_range(right[i])))) {
                throw Error(Errc::corrupt_artifact, "tree node references out of range");
            }
            tree.nodes.push_back(TreeNode{feature[i], threshold[i], left[i], right[i], value[i]});
        }
        m.trees.push_back(std::move(tree));
    }
    return m;
}

}  // namespace ndt::models
