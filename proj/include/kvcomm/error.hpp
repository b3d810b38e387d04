#pragma once

#include <stdexcept>
#include <string>

namespace kvcomm {

// Base for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input: config files, templates, placeholder names.
class ParseError : public Error {
public:
    using Error::Error;
};

// Mismatched lengths, layer counts, or non-contiguous positions.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A runtime invariant of the orchestration protocol was broken (missing
// anchor offset in the reuse branch, upstream response absent, ...).
class ContractViolation : public Error {
public:
    using Error::Error;
};

// A forward pass would run past ModelConfig::max_context.
class ContextOverflow : public Error {
public:
    using Error::Error;
};

} // namespace kvcomm
