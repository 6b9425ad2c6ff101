#pragma once

#include <stdexcept>
#include <string>

namespace fedproj {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Mismatched vector lengths or matrix shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Malformed input files or datasets.
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment or algorithm configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A loss or parameter became non-finite during training.
class DivergenceError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require_dims(bool ok, const std::string& what) {
    if (!ok) {
        throw DimensionError(what);
    }
}

}  // namespace detail
}  // namespace fedproj
