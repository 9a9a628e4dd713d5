#pragma once

// Discrete-time closed-loop simulator of a pod-scaled inference service.
//
// Users alternate between exponentially distributed think periods and one blocking
// request. Requests share a FIFO queue served by the first idle pod with lognormal
// service times. The fraction of users holding an active session follows a slow
// mean-reverting process shared by every regime run from the same seed, which gives
// each regime a spread of load states around its nominal operating point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <queue>
#include <vector>

#include "ndt/error.hpp"
#include "ndt/record.hpp"
#include "ndt/rng.hpp"
#include "ndt/stats.hpp"

namespace ndt::sim {

struct ClusterConfig {
    int pods = 1;
    double service_time_ms = 2.0;
    double service_cv = 0.25;
    /// Service-time inflation per connected user on a pod (session state contention):
    /// mean service = service_time_ms * (1 + session_overhead * users / pods).
    double session_overhead = 0.002;
    double cpu_overhead_pct = 8.0;
    double mem_base_pct = 35.0;
    /// Memory held by active user sessions at full activity.
    double session_mem_pct = 20.0;

    void validate() const {
        require(pods >= 1, "pods must be >= 1");
        require(service_time_ms > 0.0, "service_time_ms must be > 0");
        require(service_cv >= 0.0, "service_cv must be >= 0");
        require(session_overhead >= 0.0, "session_overhead must be >= 0");
        require(cpu_overhead_pct >= 0.0 && cpu_overhead_pct <= 100.0, "cpu_overhead_pct outside [0,100]");
        require(mem_base_pct >= 0.0 && mem_base_pct <= 100.0, "mem_base_pct outside [0,100]");
        require(session_mem_pct >= 0.0 && session_mem_pct <= 100.0, "session_mem_pct outside [0,100]");
    }
};

struct WorkloadSpec {
    int users = 0;
    double think_time_ms = 100.0;
    /// Session activity process: stationary mean and sd of the active-user fraction and
    /// its correlation time. activity_sd = 0 keeps the fraction fixed at activity_mean.
    double activity_mean = 0.7;
    double activity_sd = 0.3;
    double activity_tau_ms = 10000.0;

    void validate() const {
        require(users >= 0, "users must be >= 0");
        require(think_time_ms > 0.0, "think_time_ms must be > 0");
        require(activity_mean > 0.0 && activity_mean <= 1.0, "activity_mean outside (0,1]");
        require(activity_sd >= 0.0, "activity_sd must be >= 0");
        require(activity_tau_ms > 0.0, "activity_tau_ms must be > 0");
    }

    /// Every user permanently active.
    static WorkloadSpec steady(int users, double think_time_ms) {
        return WorkloadSpec{users, think_time_ms, 1.0, 0.0, 4000.0};
    }
};

struct RegimeSetting {
    WorkloadSpec workload;
    ClusterConfig cluster;

    RegimeKey key() const { return RegimeKey{workload.users, cluster.pods}; }
};

struct ScenarioSpec {
    std::vector<RegimeSetting> regimes;
    int ticks_per_regime = 2000;
    double tick_ms = 20.0;
    std::uint64_t seed = 0;
    double anomaly_rate = 0.0;

    void validate() const {
        require(ticks_per_regime >= 1, "ticks_per_regime must be >= 1");
        require(tick_ms > 0.0, "tick_ms must be > 0");
        require(anomaly_rate >= 0.0 && anomaly_rate < 1.0, "anomaly_rate outside [0,1)");
        for (const auto& r : regimes) {
            r.workload.validate();
            r.cluster.validate();
        }
    }
};

struct RunStats {
    std::uint64_t issued = 0;
    std::uint64_t completed = 0;
    std::size_t max_queue = 0;
};

struct RegimeRun {
    std::vector<TelemetryRecord> records;
    RunStats stats;
};

struct GroundTruthDelta {
    RegimeKey from;
    RegimeKey to;
    double mean_delta_ms = 0.0;
    double median_delta_ms = 0.0;
    int sign = 0;
};

namespace detail {

class ClosedLoopCluster {
public:
    ClosedLoopCluster(const WorkloadSpec& workload, const ClusterConfig& cluster, double tick_ms,
                      std::uint64_t seed)
        : workload_(workload),
          cluster_(cluster),
          tick_ms_(tick_ms),
          service_mean_ms_(cluster.service_time_ms *
                           (1.0 + cluster.session_overhead * workload.users / cluster.pods)),
          users_(static_cast<std::size_t>(workload.users)),
          pods_(static_cast<std::size_t>(cluster.pods)),
          demand_rng_(Rng::stream(seed, "demand")),
          noise_rng_(Rng::stream(seed, "noise")) {
        user_rng_.reserve(users_.size());
        for (std::size_t i = 0; i < users_.size(); ++i) user_rng_.push_back(Rng::stream(seed, "user", i));
        pod_rng_.reserve(pods_.size());
        for (std::size_t j = 0; j < pods_.size(); ++j) pod_rng_.push_back(Rng::stream(seed, "pod", j));
        activity_ = std::clamp(workload_.activity_mean, kMinActivity, 1.0);
    }

    TelemetryRecord step(double timestamp_ms) {
        const double t0 = static_cast<double>(tick_) * tick_ms_;
        const double t1 = t0 + tick_ms_;
        if (tick_ > 0) advance_activity();
        apply_activity(t0);

        depth_sum_ = 0.0;
        enqueues_ = 0;
        latency_sum_ = 0.0;
        completions_ = 0;
        busy_ms_ = 0.0;

        while (!events_.empty() && events_.top().time < t1) {
            const Event ev = events_.top();
            events_.pop();
            if (ev.kind == Event::Kind::think_end) {
                on_think_end(ev);
            } else {
                on_service_end(ev);
            }
        }
        for (auto& pod : pods_) {
            if (pod.busy) {
                busy_ms_ += t1 - pod.busy_since;
                pod.busy_since = t1;
            }
        }

        TelemetryRecord rec;
        rec.timestamp_ms = timestamp_ms;
        rec.current_users = workload_.users;
        rec.pods = cluster_.pods;
        rec.avg_depth_on_enqueue =
            enqueues_ > 0 ? depth_sum_ / static_cast<double>(enqueues_) : static_cast<double>(queue_.size());
        rec.avg_backlog_sec_est = static_cast<double>(queue_.size()) * cluster_.service_time_ms /
                                  (static_cast<double>(cluster_.pods) * 1000.0);
        rec.avg_cpu_process_pct =
            std::clamp(100.0 * busy_ms_ / (static_cast<double>(cluster_.pods) * tick_ms_), 0.0, 100.0);
        rec.avg_cpu_system_pct = std::clamp(cluster_.cpu_overhead_pct + noise_rng_.normal(0.0, 2.0), 0.0, 100.0);
        mem_walk_ = 0.995 * mem_walk_ + 0.03 * noise_rng_.normal();
        rec.avg_mem_system_pct =
            std::clamp(cluster_.mem_base_pct + cluster_.session_mem_pct * activity_ + mem_walk_, 0.0, 100.0);
        if (completions_ > 0) rec.avg_total_infer_ms = latency_sum_ / static_cast<double>(completions_);

        ++tick_;
        return rec;
    }

    const RunStats& stats() const noexcept { return stats_; }

private:
    static constexpr double kMinActivity = 0.05;

    struct Event {
        enum class Kind : std::uint8_t { think_end, service_end };
        double time;
        std::uint64_t seq;
        Kind kind;
        std::size_t id;
        std::uint32_t generation;

        bool operator>(const Event& other) const {
            return time != other.time ? time > other.time : seq > other.seq;
        }
    };

    enum class UserState : std::uint8_t { idle, thinking, waiting, in_service };

    struct User {
        UserState state = UserState::idle;
        bool active = false;
        std::uint32_t generation = 0;
        double enqueue_time = 0.0;
    };

    struct Pod {
        bool busy = false;
        std::size_t user = 0;
        double busy_since = 0.0;
    };

    void push(double time, Event::Kind kind, std::size_t id, std::uint32_t generation) {
        events_.push(Event{time, seq_++, kind, id, generation});
    }

    void advance_activity() {
        if (workload_.activity_sd <= 0.0) return;
        const double rate = tick_ms_ / workload_.activity_tau_ms;
        activity_ += (workload_.activity_mean - activity_) * rate +
                     workload_.activity_sd * std::sqrt(2.0 * rate) * demand_rng_.normal();
        activity_ = std::clamp(activity_, kMinActivity, 1.0);
    }

    void apply_activity(double now) {
        const auto target = static_cast<std::size_t>(std::lround(activity_ * static_cast<double>(users_.size())));
        for (std::size_t i = active_count_; i < target; ++i) {
            User& u = users_[i];
            u.active = true;
            if (u.state == UserState::idle) start_thinking(i, now);
        }
        for (std::size_t i = target; i < active_count_; ++i) {
            User& u = users_[i];
            u.active = false;
            if (u.state == UserState::thinking) {
                ++u.generation;
                u.state = UserState::idle;
            }
        }
        active_count_ = target;
    }

    void start_thinking(std::size_t user, double now) {
        User& u = users_[user];
        u.state = UserState::thinking;
        ++u.generation;
        push(now + user_rng_[user].exponential(workload_.think_time_ms), Event::Kind::think_end, user, u.generation);
    }

    void start_service(std::size_t pod_index, std::size_t user, double now) {
        Pod& pod = pods_[pod_index];
        pod.busy = true;
        pod.user = user;
        pod.busy_since = now;
        users_[user].state = UserState::in_service;
        const double service = pod_rng_[pod_index].lognormal_mean_cv(service_mean_ms_, cluster_.service_cv);
        push(now + service, Event::Kind::service_end, pod_index, 0);
    }

    void on_think_end(const Event& ev) {
        User& u = users_[ev.id];
        if (u.generation != ev.generation || u.state != UserState::thinking) return;
        ++stats_.issued;
        depth_sum_ += static_cast<double>(queue_.size());
        ++enqueues_;
        u.enqueue_time = ev.time;
        for (std::size_t j = 0; j < pods_.size(); ++j) {
            if (!pods_[j].busy) {
                start_service(j, ev.id, ev.time);
                return;
            }
        }
        u.state = UserState::waiting;
        queue_.push_back(ev.id);
        stats_.max_queue = std::max(stats_.max_queue, queue_.size());
    }

    void on_service_end(const Event& ev) {
        Pod& pod = pods_[ev.id];
        busy_ms_ += ev.time - pod.busy_since;
        pod.busy = false;
        const std::size_t user = pod.user;
        User& u = users_[user];
        latency_sum_ += ev.time - u.enqueue_time;
        ++completions_;
        ++stats_.completed;
        if (u.active) {
            start_thinking(user, ev.time);
        } else {
            u.state = UserState::idle;
        }
        if (!queue_.empty()) {
            const std::size_t next = queue_.front();
            queue_.pop_front();
            start_service(ev.id, next, ev.time);
        }
    }

    WorkloadSpec workload_;
    ClusterConfig cluster_;
    double tick_ms_;
    double service_mean_ms_;
    std::vector<User> users_;
    std::vector<Pod> pods_;
    std::vector<Rng> user_rng_;
    std::vector<Rng> pod_rng_;
    Rng demand_rng_;
    Rng noise_rng_;
    std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
    std::deque<std::size_t> queue_;
    std::uint64_t seq_ = 0;
    std::uint64_t tick_ = 0;
    std::size_t active_count_ = 0;
    double activity_ = 1.0;
    double mem_walk_ = 0.0;

    double depth_sum_ = 0.0;
    std::uint64_t enqueues_ = 0;
    double latency_sum_ = 0.0;
    std::uint64_t completions_ = 0;
    double busy_ms_ = 0.0;
    RunStats stats_;
};

}  // namespace detail

/// Runs one regime and also returns request accounting.
inline RegimeRun simulate_regime(const WorkloadSpec& workload, const ClusterConfig& cluster, int ticks,
                                 double tick_ms, std::uint64_t seed, double start_ms = 0.0) {
    workload.validate();
    cluster.validate();
    require(ticks >= 1, "ticks must be >= 1");
    require(tick_ms > 0.0, "tick_ms must be > 0");
    detail::ClosedLoopCluster sim(workload, cluster, tick_ms, seed);
    RegimeRun run;
    run.records.reserve(static_cast<std::size_t>(ticks));
    for (int k = 0; k < ticks; ++k) run.records.push_back(sim.step(start_ms + k * tick_ms));
    run.stats = sim.stats();
    return run;
}

inline std::vector<TelemetryRecord> run_regime(const WorkloadSpec& workload, const ClusterConfig& cluster,
                                               int ticks, double tick_ms, std::uint64_t seed) {
    return simulate_regime(workload, cluster, ticks, tick_ms, seed).records;
}

/// Multiplies the latency of roughly `rate` of the latency-bearing records by a spike
/// factor drawn from [5, 10).
inline std::vector<TelemetryRecord> inject_anomalies(std::vector<TelemetryRecord> records, double rate,
                                                     std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error(Errc::invalid_argument, "anomaly rate outside [0,1)");
    if (rate == 0.0) return records;
    Rng rng = Rng::stream(seed, "anomaly");
    for (auto& r : records) {
        const bool spike = rng.bernoulli(rate);
        if (spike && r.avg_total_infer_ms) {
            r.avg_total_infer_ms = *r.avg_total_infer_ms * rng.uniform(5.0, 10.0);
        }
    }
    return records;
}

/// Runs every regime in order on one timeline; all regimes share the scenario seed so
/// their demand randomness is paired.
inline std::vector<TelemetryRecord> run_scenario(const ScenarioSpec& spec) {
    spec.validate();
    std::vector<TelemetryRecord> out;
    out.reserve(spec.regimes.size() * static_cast<std::size_t>(spec.ticks_per_regime));
    for (std::size_t i = 0; i < spec.regimes.size(); ++i) {
        const auto& r = spec.regimes[i];
        const double start = static_cast<double>(i) * spec.ticks_per_regime * spec.tick_ms;
        auto run = simulate_regime(r.workload, r.cluster, spec.ticks_per_regime, spec.tick_ms, spec.seed, start);
        auto records = inject_anomalies(std::move(run.records), spec.anomaly_rate, stream_key(spec.seed, "regime", i));
        out.insert(out.end(), records.begin(), records.end());
    }
    return out;
}

/// Steady-state latencies (ms) after discarding the first 10% of ticks as warm-up.
inline std::vector<double> steady_latencies(const std::vector<TelemetryRecord>& records) {
    const std::size_t skip = records.size() / 10;
    std::vector<double> out;
    for (std::size_t i = skip; i < records.size(); ++i) {
        if (records[i].avg_total_infer_ms) out.push_back(*records[i].avg_total_infer_ms);
    }
    return out;
}

/// Ground-truth latency change between two configurations, both simulated from the same
/// seed so they see identical demand randomness.
inline GroundTruthDelta oracle_delta(const RegimeSetting& from, const RegimeSetting& to, int ticks,
                                     std::uint64_t seed, double tick_ms = 20.0, double epsilon_tie_ms = 0.5) {
    const auto a = steady_latencies(run_regime(from.workload, from.cluster, ticks, tick_ms, seed));
    const auto b = steady_latencies(run_regime(to.workload, to.cluster, ticks, tick_ms, seed));
    if (a.empty() || b.empty()) {
        throw Error(Errc::insufficient_completions, "a regime produced no latency samples");
    }
    GroundTruthDelta d;
    d.from = from.key();
    d.to = to.key();
    d.mean_delta_ms = stats::mean(b) - stats::mean(a);
    d.median_delta_ms = stats::median(b) - stats::median(a);
    d.sign = stats::signum(d.mean_delta_ms, epsilon_tie_ms);
    return d;
}

}  // namespace ndt::sim
