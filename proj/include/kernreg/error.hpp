#pragma once

#include <stdexcept>
#include <string>

namespace kernreg {

// Single exception type; the kind maps to CLI exit codes.
class Error : public std::runtime_error {
public:
    enum class Kind { config, shape, data, io, divergence, internal };

    Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(Error::Kind::config, msg); }
[[noreturn]] inline void throw_shape(const std::string& msg) { throw Error(Error::Kind::shape, msg); }
[[noreturn]] inline void throw_data(const std::string& msg) { throw Error(Error::Kind::data, msg); }
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(Error::Kind::io, msg); }

inline void check(bool ok, Error::Kind kind, const std::string& msg) {
    if (!ok) throw Error(kind, msg);
}

}  // namespace kernreg
