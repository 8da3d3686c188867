#pragma once

#include <stdexcept>
#include <string>

namespace da2 {

enum class ErrorKind {
    Shape,
    Config,
    Format,
    Io,
    Numeric,
    Oracle,
    State,
};

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorKind::Shape, what) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error(ErrorKind::Format, what) {}
};
struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};
// Non-finite loss or gradient during training.
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};
struct OracleError : Error {
    explicit OracleError(const std::string& what) : Error(ErrorKind::Oracle, what) {}
};
// Misuse of a stateful object, e.g. replaying a consumed tape.
struct StateError : Error {
    explicit StateError(const std::string& what) : Error(ErrorKind::State, what) {}
};

}  // namespace da2
