#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace causal_story {

/// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A caller violated an operation's precondition.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Invalid configuration value (maps to CLI exit code 2).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent input data (dataset files, checkpoints, token ids).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

/// Attention mask with a row that has no admissible column.
struct InvalidMaskError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct StatsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised when the optimizer observes a non-finite loss.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

}  // namespace detail
}  // namespace causal_story
