// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace blink {

// Bad argument values or shapes.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation was invoked in the wrong lifecycle state (decode before
// prefill, drop without a live super-resolution block, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A layer hook produced a token stream that breaks the sequence invariants.
class PipelineIntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing or inconsistent configuration (weights, checkpoints, options).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs for which the requested quantity is undefined, e.g. a saliency
// ratio over an all-zero patch vector.
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Bad command-line usage (unknown command, suite or flag).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed on-disk data. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace blink
