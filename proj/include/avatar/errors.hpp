#pragma once

#include <stdexcept>

namespace av {

// File-system and protocol failures (missing files, short reads, HTTP errors).
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A document (config, manifest, prompt table, checkpoint index) that does not
// match its schema. Messages name the offending key or field.
class SchemaError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace av
