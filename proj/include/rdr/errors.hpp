#pragma once

#include <stdexcept>
#include <string>

namespace rdr {

class error : public std::runtime_error {
public:
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

class dimension_error : public error {
public:
    using error::error;
};

class parse_error : public error {
public:
    using error::error;
};

class lookup_error : public error {
public:
    using error::error;
};

class vocabulary_error : public error {
public:
    using error::error;
};

class argument_error : public error {
public:
    using error::error;
};

class numeric_error : public error {
public:
    using error::error;
};

class target_error : public error {
public:
    using error::error;
};

class metrics_error : public error {
public:
    using error::error;
};

} // namespace rdr
