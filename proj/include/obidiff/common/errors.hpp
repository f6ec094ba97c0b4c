// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace obidiff {

// Precondition failures use std::invalid_argument directly.

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A glyph image with no pixel above the binarization threshold.
class EmptyGlyphError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Untrained, missing, or non-finite model parameters.
class ModelStateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed document; `pointer` is the JSON pointer of the offending value.
class SchemaError : public std::runtime_error {
public:
    SchemaError(std::string pointer, const std::string& detail)
        : std::runtime_error(pointer + ": " + detail), pointer_(std::move(pointer)) {}
    const std::string& pointer() const { return pointer_; }

private:
    std::string pointer_;
};

class IncompleteSessionError : public std::runtime_error {
public:
    explicit IncompleteSessionError(std::vector<std::string> unanswered);
    const std::vector<std::string>& unanswered() const { return unanswered_; }

private:
    std::vector<std::string> unanswered_;
};

}  // namespace obidiff
