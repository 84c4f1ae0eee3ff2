#pragma once

#include <stdexcept>
#include <string>

namespace casteer {

/// Failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
    io,          // file could not be opened, read or written
    format,      // container or JSON content is malformed
    validation,  // arguments violate a precondition
    numeric,     // non-finite values or a zero-norm direction
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::io:
    case ErrorKind::format:
        return 1;
    case ErrorKind::validation:
        return 2;
    case ErrorKind::numeric:
        return 3;
    }
    return 1;
}

}  // namespace casteer
