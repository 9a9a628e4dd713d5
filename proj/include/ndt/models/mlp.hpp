#pragma once

// Feed-forward regressor: [Dense -> (BatchNorm) -> ReLU -> Dropout] x hidden, then a
// linear output unit. Trained with Huber loss on the log target using Adam. All
// parameters live in one flat vector so the optimiser and gradient checks are generic.

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

struct MlpConfig {
    std::vector<int> layer_widths{64, 32, 16};
    double dropout = 0.3;
    bool use_batch_norm = false;
    double huber_delta = 1.0;
    double learning_rate = 1e-3;
    int epochs = 40;
    int batch_size = 64;
    std::uint64_t seed = 0;

    void validate() const {
        require(!layer_widths.empty(), "layer_widths must be non-empty");
        for (int w : layer_widths) require(w >= 1, "layer widths must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, "dropout outside [0,1)");
        require(huber_delta > 0.0, "huber_delta must be > 0");
        require(learning_rate > 0.0, "learning_rate must be > 0");
        require(epochs >= 0, "epochs must be >= 0");
        require(batch_size >= 1, "batch_size must be >= 1");
    }
};

inline ordered_json to_json(const MlpConfig& c) {
    return ordered_json{{"layer_widths", c.layer_widths}, {"dropout", c.dropout},
                        {"use_batch_norm", c.use_batch_norm}, {"huber_delta", c.huber_delta},
                        {"learning_rate", c.learning_rate}, {"epochs", c.epochs},
                        {"batch_size", c.batch_size},       {"seed", c.seed}};
}

inline MlpConfig mlp_config_from_json(const nlohmann::json& j) {
    MlpConfig c;
    c.layer_widths = j.value("layer_widths", c.layer_widths);
    c.dropout = j.value("dropout", c.dropout);
    c.use_batch_norm = j.value("use_batch_norm", c.use_batch_norm);
    c.huber_delta = j.value("huber_delta", c.huber_delta);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

inline double huber(double r, double delta) {
    const double a = std::abs(r);
    return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_grad(double r, double delta) { return std::clamp(r, -delta, delta); }

class MlpNetwork {
public:
    static constexpr double kBnEps = 1e-5;
    static constexpr double kBnMomentum = 0.1;

    struct Layer {
        int in = 0;
        int out = 0;
        std::size_t w = 0;  // out x in, row-major
        std::size_t b = 0;
        std::size_t gamma = 0;
        std::size_t beta = 0;
        std::size_t stats = 0;  // offset into running mean/var
    };

    MlpNetwork() = default;

    MlpNetwork(int inputs, const std::vector<int>& widths, bool batch_norm) : batch_norm_(batch_norm) {
        std::size_t offset = 0;
        std::size_t stats = 0;
        int in = inputs;
        for (int width : widths) {
            Layer l{in, width, offset, 0, 0, 0, stats};
            offset += static_cast<std::size_t>(in * width);
            l.b = offset;
            offset += static_cast<std::size_t>(width);
            if (batch_norm) {
                l.gamma = offset;
                offset += static_cast<std::size_t>(width);
                l.beta = offset;
                offset += static_cast<std::size_t>(width);
                stats += static_cast<std::size_t>(width);
            }
            hidden_.push_back(l);
            in = width;
        }
        output_ = Layer{in, 1, offset, offset + static_cast<std::size_t>(in), 0, 0, 0};
        offset += static_cast<std::size_t>(in) + 1;
        params_.assign(offset, 0.0);
        running_mean_.assign(stats, 0.0);
        running_var_.assign(stats, 1.0);
    }

    /// He-normal weights for ReLU layers, unit BN scale, zero biases; the output bias
    /// starts at `output_bias`.
    void initialize(std::uint64_t seed, double output_bias) {
        Rng rng = Rng::stream(seed, "mlp-init");
        for (const auto& l : hidden_) {
            const double sd = std::sqrt(2.0 / l.in);
            for (int k = 0; k < l.in * l.out; ++k) params_[l.w + static_cast<std::size_t>(k)] = rng.normal(0.0, sd);
            for (int k = 0; k < l.out; ++k) params_[l.b + static_cast<std::size_t>(k)] = 0.0;
            if (batch_norm_) {
                for (int k = 0; k < l.out; ++k) {
                    params_[l.gamma + static_cast<std::size_t>(k)] = 1.0;
                    params_[l.beta + static_cast<std::size_t>(k)] = 0.0;
                }
            }
        }
        const double sd = std::sqrt(1.0 / output_.in);
        for (int k = 0; k < output_.in; ++k) params_[output_.w + static_cast<std::size_t>(k)] = rng.normal(0.0, sd);
        params_[output_.b] = output_bias;
    }

    std::vector<double>& params() noexcept { return params_; }
    const std::vector<double>& params() const noexcept { return params_; }
    std::vector<double>& running_mean() noexcept { return running_mean_; }
    std::vector<double>& running_var() noexcept { return running_var_; }
    const std::vector<double>& running_mean() const noexcept { return running_mean_; }
    const std::vector<double>& running_var() const noexcept { return running_var_; }
    bool batch_norm() const noexcept { return batch_norm_; }
    const std::vector<Layer>& hidden() const noexcept { return hidden_; }

    /// Inference on one standardised input (dropout off, BN uses running statistics).
    double forward(std::span<const double> x) const {
        std::vector<double> a(x.begin(), x.end());
        std::vector<double> z;
        for (const auto& l : hidden_) {
            z.assign(static_cast<std::size_t>(l.out), 0.0);
            for (int o = 0; o < l.out; ++o) {
                const double* w = &params_[l.w + static_cast<std::size_t>(o * l.in)];
                double acc = params_[l.b + static_cast<std::size_t>(o)];
                for (int i = 0; i < l.in; ++i) acc += w[i] * a[static_cast<std::size_t>(i)];
                if (batch_norm_) {
                    const std::size_t s = l.stats + static_cast<std::size_t>(o);
                    acc = (acc - running_mean_[s]) / std::sqrt(running_var_[s] + kBnEps);
                    acc = params_[l.gamma + static_cast<std::size_t>(o)] * acc + params_[l.beta + static_cast<std::size_t>(o)];
                }
                z[static_cast<std::size_t>(o)] = acc > 0.0 ? acc : 0.0;
            }
            a.swap(z);
        }
        double y = params_[output_.b];
        for (int i = 0; i < output_.in; ++i) y += params_[output_.w + static_cast<std::size_t>(i)] * a[static_cast<std::size_t>(i)];
        return y;
    }

    /// Mean Huber loss of a batch in training mode (BN on batch statistics) and its
    /// gradient with respect to params(). Dropout applies only when `dropout_rng` is set.
    double loss_and_gradient(std::span<const double> x, std::span<const double> y, double huber_delta,
                             double dropout, Rng* dropout_rng, std::vector<double>& grad,
                             bool update_running_stats) {
        const std::size_t batch = y.size();
        const auto bsz = static_cast<double>(batch);
        grad.assign(params_.size(), 0.0);

        struct Cache {
            std::vector<double> input;   // B x in
            std::vector<double> pre;     // B x out, after BN affine (input to ReLU)
            std::vector<double> xhat;    // B x out, normalised (BN only)
            std::vector<double> inv_std; // out (BN only)
            std::vector<double> mask;    // B x out, dropout scale
        };
        std::vector<Cache> caches(hidden_.size());
        std::vector<double> a(x.begin(), x.end());

        for (std::size_t h = 0; h < hidden_.size(); ++h) {
            const auto& l = hidden_[h];
            auto& c = caches[h];
            const auto out = static_cast<std::size_t>(l.out);
            const auto in = static_cast<std::size_t>(l.in);
            c.input = a;
            c.pre.assign(batch * out, 0.0);
            for (std::size_t r = 0; r < batch; ++r) {
                for (std::size_t o = 0; o < out; ++o) {
                    const double* w = &params_[l.w + o * in];
                    double acc = params_[l.b + o];
                    for (std::size_t i = 0; i < in; ++i) acc += w[i] * a[r * in + i];
                    c.pre[r * out + o] = acc;
                }
            }
            if (batch_norm_) {
                c.xhat.assign(batch * out, 0.0);
                c.inv_std.assign(out, 0.0);
                for (std::size_t o = 0; o < out; ++o) {
                    double mu = 0.0;
                    for (std::size_t r = 0; r < batch; ++r) mu += c.pre[r * out + o];
                    mu /= bsz;
                    double var = 0.0;
                    for (std::size_t r = 0; r < batch; ++r) var += (c.pre[r * out + o] - mu) * (c.pre[r * out + o] - mu);
                    var /= bsz;
                    const double inv = 1.0 / std::sqrt(var + kBnEps);
                    c.inv_std[o] = inv;
                    const double gamma = params_[l.gamma + o];
                    const double beta = params_[l.beta + o];
                    for (std::size_t r = 0; r < batch; ++r) {
                        const double xh = (c.pre[r * out + o] - mu) * inv;
                        c.xhat[r * out + o] = xh;
                        c.pre[r * out + o] = gamma * xh + beta;
                    }
                    if (update_running_stats) {
                        const std::size_t s = l.stats + o;
                        running_mean_[s] = (1.0 - kBnMomentum) * running_mean_[s] + kBnMomentum * mu;
                        running_var_[s] = (1.0 - kBnMomentum) * running_var_[s] + kBnMomentum * var;
                    }
                }
            }
            c.mask.assign(batch * out, 1.0);
            if (dropout_rng && dropout > 0.0) {
                const double keep_scale = 1.0 / (1.0 - dropout);
                for (auto& m : c.mask) m = dropout_rng->uniform() < dropout ? 0.0 : keep_scale;
            }
            a.assign(batch * out, 0.0);
            for (std::size_t k = 0; k < batch * out; ++k) a[k] = (c.pre[k] > 0.0 ? c.pre[k] : 0.0) * c.mask[k];
        }

        const auto last = static_cast<std::size_t>(output_.in);
        double loss = 0.0;
        std::vector<double> d_out(batch);
        for (std::size_t r = 0; r < batch; ++r) {
            double pred = params_[output_.b];
            for (std::size_t i = 0; i < last; ++i) pred += params_[output_.w + i] * a[r * last + i];
            const double resid = pred - y[r];
            loss += huber(resid, huber_delta);
            d_out[r] = huber_grad(resid, huber_delta) / bsz;
        }
        loss /= bsz;

        std::vector<double> da(batch * last, 0.0);
        for (std::size_t r = 0; r < batch; ++r) {
            grad[output_.b] += d_out[r];
            for (std::size_t i = 0; i < last; ++i) {
                grad[output_.w + i] += d_out[r] * a[r * last + i];
                da[r * last + i] = d_out[r] * params_[output_.w + i];
            }
        }

        for (std::size_t h = hidden_.size(); h-- > 0;) {
            const auto& l = hidden_[h];
            const auto& c = caches[h];
            const auto out = static_cast<std::size_t>(l.out);
            const auto in = static_cast<std::size_t>(l.in);
            std::vector<double> dz(batch * out);
            for (std::size_t k = 0; k < batch * out; ++k) dz[k] = c.pre[k] > 0.0 ? da[k] * c.mask[k] : 0.0;
            if (batch_norm_) {
                for (std::size_t o = 0; o < out; ++o) {
                    const double gamma = params_[l.gamma + o];
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t r = 0; r < batch; ++r) {
                        const double g = dz[r * out + o];
                        grad[l.gamma + o] += g * c.xhat[r * out + o];
                        grad[l.beta + o] += g;
                        const double dxhat = g * gamma;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * c.xhat[r * out + o];
                    }
                    for (std::size_t r = 0; r < batch; ++r) {
                        const double dxhat = dz[r * out + o] * gamma;
                        dz[r * out + o] =
                            c.inv_std[o] / bsz * (bsz * dxhat - sum_dxhat - c.xhat[r * out + o] * sum_dxhat_xhat);
                    }
                }
            }
            std::vector<double> da_prev(batch * in, 0.0);
            for (std::size_t r = 0; r < batch; ++r) {
                for (std::size_t o = 0; o < out; ++o) {
                    const double g = dz[r * out + o];
                    if (g == 0.0) continue;
                    grad[l.b + o] += g;
                    double* gw = &grad[l.w + o * in];
                    const double* w = &params_[l.w + o * in];
                    for (std::size_t i = 0; i < in; ++i) {
                        gw[i] += g * c.input[r * in + i];
                        da_prev[r * in + i] += g * w[i];
                    }
                }
            }
            da.swap(da_prev);
        }
        return loss;
    }

private:
    bool batch_norm_ = false;
    std::vector<Layer> hidden_;
    Layer output_;
    std::vector<double> params_;
    std::vector<double> running_mean_;
    std::vector<double> running_var_;
};

struct MlpModel {
    MlpConfig config;
    std::vector<double> feature_mean;
    std::vector<double> feature_scale;
    MlpNetwork network;

    std::vector<double> standardize(std::span<const double> x) const {
        std::vector<double> z(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - feature_mean[i]) / feature_scale[i];
        return z;
    }

    double predict_log(std::span<const double> x) const { return network.forward(standardize(x)); }
};

struct MlpTrace {
    std::vector<double> epoch_loss;
};

class Adam {
public:
    explicit Adam(std::size_t n, double lr) : lr_(lr), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
            v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
            params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + kEps);
        }
    }

private:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    double lr_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::uint64_t t_ = 0;
};

inline MlpModel fit_mlp(const hdl::RefinedDataset& train, const MlpConfig& config, MlpTrace* trace = nullptr) {
    config.validate();
    if (train.empty()) throw Error(Errc::empty_dataset, "training set is empty");
    constexpr std::size_t d = hdl::kFeatureCount;
    const std::size_t n = train.size();

    MlpModel model;
    model.config = config;
    model.feature_mean.assign(d, 0.0);
    model.feature_scale.assign(d, 0.0);
    double target_mean = 0.0;
    for (const auto& row : train.rows) {
        if (!row.features.finite() || !std::isfinite(row.log_target)) {
            throw Error(Errc::non_finite_feature, "training row is not finite");
        }
        const auto v = row.features.values();
        for (std::size_t f = 0; f < d; ++f) model.feature_mean[f] += v[f];
        target_mean += row.log_target;
    }
    for (auto& m : model.feature_mean) m /= static_cast<double>(n);
    target_mean /= static_cast<double>(n);
    for (const auto& row : train.rows) {
        const auto v = row.features.values();
        for (std::size_t f = 0; f < d; ++f) {
            model.feature_scale[f] += (v[f] - model.feature_mean[f]) * (v[f] - model.feature_mean[f]);
        }
    }
    for (auto& s : model.feature_scale) {
        s = std::sqrt(s / static_cast<double>(n));
        if (!(s > 1e-12)) s = 1.0;
    }

    std::vector<double> x(n * d);
    std::vector<double> y(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto z = model.standardize(train.rows[r].features.values());
        std::copy(z.begin(), z.end(), x.begin() + static_cast<std::ptrdiff_t>(r * d));
        y[r] = train.rows[r].log_target;
    }

    model.network = MlpNetwork(static_cast<int>(d), config.layer_widths, config.use_batch_norm);
    model.network.initialize(config.seed, target_mean);

    Adam adam(model.network.params().size(), config.learning_rate);
    Rng dropout_rng = Rng::stream(config.seed, "mlp-dropout");
    std::vector<std::uint32_t> order(n);
    std::vector<double> bx, by, grad;
    const auto batch = static_cast<std::size_t>(config.batch_size);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0u);
        Rng shuffle = Rng::stream(config.seed, "mlp-shuffle", static_cast<std::uint64_t>(epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            bx.resize((end - start) * d);
            by.resize(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t r = order[k];
                std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r * d), d,
                            bx.begin() + static_cast<std::ptrdiff_t>((k - start) * d));
                by[k - start] = y[r];
            }
            const double loss = model.network.loss_and_gradient(bx, by, config.huber_delta, config.dropout,
                                                                &dropout_rng, grad, true);
            if (!std::isfinite(loss)) {
                throw Error(Errc::divergence, "loss became non-finite in epoch " + std::to_string(epoch));
            }
            epoch_loss += loss * static_cast<double>(end - start);
            adam.step(model.network.params(), grad);
        }
        if (trace) trace->epoch_loss.push_back(epoch_loss / static_cast<double>(n));
    }
    return model;
}

inline ordered_json to_json(const MlpModel& m) {
    return ordered_json{{"feature_mean", m.feature_mean},
                        {"feature_scale", m.feature_scale},
                        {"params", m.network.params()},
                        {"bn_running_mean", m.network.running_mean()},
                        {"bn_running_var", m.network.running_var()}};
}

inline MlpModel mlp_model_from_json(const nlohmann::json& params, const MlpConfig& config) {
    MlpModel m;
    m.config = config;
    m.feature_mean = params.at("feature_mean").get<std::vector<double>>();
    m.feature_scale = params.at("feature_scale").get<std::vector<double>>();
    m.network = MlpNetwork(static_cast<int>(hdl::kFeatureCount), config.layer_widths, config.use_batch_norm);
    auto p = params.at("params").get<std::vector<double>>();
    auto rm = params.at("bn_running_mean").get<std::vector<double>>();
    auto rv = params.at("bn_running_var").get<std::vector<double>>();
    if (p.size() != m.network.params().size() || rm.size() != m.network.running_mean().size() ||
        rv.size() != m.network.running_var().size() || m.feature_mean.size() != hdl::kFeatureCount ||
        m.feature_scale.size() != hdl::kFeatureCount) {
        throw Error(Errc::corrupt_artifact, "MLP parameter shapes do not match config");
    }
    m.network.params() = std::move(p);
    m.network.running_mean() = std::move(rm);
    m.network.running_var() = std::move(rv);
    return m;
}

}  // namespace ndt::models
