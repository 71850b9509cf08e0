#pragma once

#include <stdexcept>
#include <string>

namespace captree {

// Base class for every recoverable pipeline failure. Per-node code catches
// this type; anything else is treated as systemic and propagates.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TransportError : public Error {
public:
    using Error::Error;
};

class MalformedResponse : public Error {
public:
    using Error::Error;
};

class BackendRefusal : public Error {
public:
    using Error::Error;
};

class CoverageGap : public Error {
public:
    using Error::Error;
};

class EmptySequence : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class MissingPlaceholder : public Error {
public:
    using Error::Error;
};

class SchemaViolation : public Error {
public:
    using Error::Error;
};

class TooFewPoints : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class StorageError : public Error {
public:
    using Error::Error;
};

}  // namespace captree
