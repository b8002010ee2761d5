// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace speechmoe {

// Base error. `category()` is the short machine-parsable tag printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define SPEECHMOE_DEFINE_ERROR(Name, tag) \
  class Name : public Error {             \
   public:                                \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  };

SPEECHMOE_DEFINE_ERROR(DimensionError, "dimension")
SPEECHMOE_DEFINE_ERROR(EmptySequenceError, "empty-sequence")
SPEECHMOE_DEFINE_ERROR(ConfigError, "config")
SPEECHMOE_DEFINE_ERROR(StateError, "state")
SPEECHMOE_DEFINE_ERROR(LabelError, "label")
SPEECHMOE_DEFINE_ERROR(InfeasibleAlignmentError, "infeasible-alignment")
SPEECHMOE_DEFINE_ERROR(DegenerateDistributionError, "degenerate-distribution")
SPEECHMOE_DEFINE_ERROR(NumericError, "numeric")
SPEECHMOE_DEFINE_ERROR(PartitionError, "partition")
SPEECHMOE_DEFINE_ERROR(TransportError, "transport")
SPEECHMOE_DEFINE_ERROR(SyncError, "sync")
SPEECHMOE_DEFINE_ERROR(FormatError, "format")
SPEECHMOE_DEFINE_ERROR(IoError, "io")

#undef SPEECHMOE_DEFINE_ERROR

}  // namespace speechmoe
