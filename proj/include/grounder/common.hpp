#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace grounder {

using Mat = Eigen::MatrixXd;

// Error taxonomy. The CLI maps these onto exit codes: config -> 2, data -> 3,
// everything else thrown at runtime -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct SamplingError : Error {
    explicit SamplingError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Distinct ingestion failures, each its own class so callers can tell them apart.
struct AnnotationFieldError : DataError {
    explicit AnnotationFieldError(const std::string& msg) : DataError(msg) {}
};

struct BoxBoundsError : DataError {
    explicit BoxBoundsError(const std::string& msg) : DataError(msg) {}
};

struct ImageReadError : DataError {
    explicit ImageReadError(const std::string& msg) : DataError(msg) {}
};

struct DuplicateIdError : DataError {
    explicit DuplicateIdError(const std::string& msg) : DataError(msg) {}
};

struct InputError : DataError {
    explicit InputError(const std::string& msg) : DataError(msg) {}
};

// SplitMix64; used to derive decorrelated per-sample / per-step seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return splitmix64(mix_seed(a, b) ^ splitmix64(c));
}

// Named warning counters for soft fallbacks (empty pooling selection, zero
// joint-attention vector). Tests reset and inspect these.
class WarnCounters {
public:
    static WarnCounters& instance() {
        static WarnCounters w;
        return w;
    }

    void bump(const std::string& name) { counters_[name].fetch_add(1, std::memory_order_relaxed); }

    std::int64_t count(const std::string& name) const {
        auto it = counters_.find(name);
        return it == counters_.end() ? 0 : it->second.load(std::memory_order_relaxed);
    }

    void reset() {
        for (auto& kv : counters_) kv.second.store(0, std::memory_order_relaxed);
    }

private:
    WarnCounters()
        : counters_{} {
        counters_["pool_empty_selection"];
        counters_["zero_joint_attention"];
    }
    std::map<std::string, std::atomic<std::int64_t>> counters_;
};

}  // namespace grounder
