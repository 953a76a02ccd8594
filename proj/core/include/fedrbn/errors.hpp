#pragma once

#include <stdexcept>
#include <string>

namespace fedrbn {

// Shapes or layer structures that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Values outside an operation's domain (negative lr, non one-hot labels, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller violated a usage contract, e.g. attacking a model left in training mode.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// SVM fit on data carrying a single label.
class DegenerateFitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary records or config files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedrbn
