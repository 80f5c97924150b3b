#pragma once

#include <stdexcept>
#include <string>

namespace ecotta {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes (config -> 2, data -> 3, format -> 4).

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StatisticsError : std::runtime_error {
    explicit StatisticsError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LifecycleError : std::runtime_error {
    explicit LifecycleError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised on malformed binary containers; carries the offending byte offset.
struct FormatError : std::runtime_error {
    std::size_t byte_offset;
    FormatError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

}  // namespace ecotta
