#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ebt {

/// Raised when a caller breaks an operation's precondition (shapes, ranges).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when training or thinking produces non-finite values.
class InstabilityError : public std::runtime_error {
public:
    InstabilityError(const std::string& what, std::int64_t step, double norm)
        : std::runtime_error(what), step_(step), norm_(norm) {}
    std::int64_t step() const { return step_; }
    double norm() const { return norm_; }

private:
    std::int64_t step_;
    double norm_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define EBT_REQUIRE(cond, msg)                                  \
    do {                                                        \
        if (!(cond)) throw ::ebt::ContractViolation(msg);       \
    } while (0)

}  // namespace ebt
