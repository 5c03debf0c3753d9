#pragma once

#include <stdexcept>
#include <string>

namespace reinjectr {

struct invalid_input : std::runtime_error {
    explicit invalid_input(const std::string& msg) : std::runtime_error(msg) {}
};

struct numerical_failure : std::runtime_error {
    explicit numerical_failure(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct corrupt_dump : io_error {
    explicit corrupt_dump(const std::string& msg) : io_error(msg) {}
};

struct unsupported_version : io_error {
    explicit unsupported_version(const std::string& msg) : io_error(msg) {}
};

// Non-fatal diagnostics (e.g. calibration inputs that are not pre-normalized)
// go through this hook; default prints to stderr.
void emit_warning(const std::string& msg);
void set_warning_handler(void (*handler)(const std::string&));

}  // namespace reinjectr
