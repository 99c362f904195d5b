// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moeup {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, configs or structurally inconsistent inputs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures and corrupt on-disk artifacts.
class IoError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss or gradient).
class TrainingError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace moeup
