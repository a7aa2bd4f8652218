#pragma once

#include <stdexcept>
#include <string>

namespace tdma_fl {

/// Failure classes; the CLI maps each to a distinct exit status.
enum class ErrorClass {
    config = 2,
    data = 3,
    numeric = 4,
    range = 5,
    contract = 6,
};

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), m_class(cls) {}
    ErrorClass error_class() const noexcept { return m_class; }
    int exit_code() const noexcept { return static_cast<int>(m_class); }

private:
    ErrorClass m_class;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorClass::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorClass::data, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorClass::numeric, what) {}
};

class RangeError : public Error {
public:
    explicit RangeError(const std::string& what) : Error(ErrorClass::range, what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(ErrorClass::contract, what) {}
};

} // namespace tdma_fl
