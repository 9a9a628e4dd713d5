#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ndt {

/// Machine-readable failure codes shared by the library, CLI and HTTP service.
enum class Errc {
    invalid_argument,
    insufficient_completions,
    storage_failure,
    schema_violation,
    io_failure,
    parse_error,
    unmapped_metric,
    empty_regime,
    domain_error,
    missing_regime,
    empty_dataset,
    non_finite_feature,
    divergence,
    schema_mismatch,
    zero_variance_target,
    insufficient_tail_samples,
    duplicate_id,
    not_found,
    corrupt_artifact,
    insufficient_pairs,
    invalid_transition,
    all_pairs_tied,
};

constexpr std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::invalid_argument: return "invalid-argument";
        case Errc::insufficient_completions: return "insufficient-completions";
        case Errc::storage_failure: return "storage-failure";
        case Errc::schema_violation: return "schema-violation";
        case Errc::io_failure: return "io-failure";
        case Errc::parse_error: return "parse-error";
        case Errc::unmapped_metric: return "unmapped-metric";
        case Errc::empty_regime: return "empty-regime";
        case Errc::domain_error: return "domain-error";
        case Errc::missing_regime: return "missing-regime";
        case Errc::empty_dataset: return "empty-dataset";
        case Errc::non_finite_feature: return "non-finite-feature";
        case Errc::divergence: return "divergence";
        case Errc::schema_mismatch: return "schema-mismatch";
        case Errc::zero_variance_target: return "zero-variance-target";
        case Errc::insufficient_tail_samples: return "insufficient-tail-samples";
        case Errc::duplicate_id: return "duplicate-id";
        case Errc::not_found: return "not-found";
        case Errc::corrupt_artifact: return "corrupt-artifact";
        case Errc::insufficient_pairs: return "insufficient-pairs";
        case Errc::invalid_transition: return "invalid-transition";
        case Errc::all_pairs_tied: return "all-pairs-tied";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw Error(Errc::invalid_argument, message);
}

}  // namespace ndt
