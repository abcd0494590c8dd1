#pragma once

#include <stdexcept>
#include <string>

namespace mbm {

// Base class for all library errors. Subclasses distinguish recoverable
// per-cell estimation failures (InsufficientClassError, UndefinedMetricError)
// from hard input/usage errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A named column is missing or a schema declaration is inconsistent.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// A cell could not be parsed (non-numeric score/covariate, bad CSV row).
class ParseError : public Error {
 public:
  using Error::Error;
};

// A value violates a dataset invariant (label outside {0,1}, non-finite score).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A subpopulation key references an unknown attribute or level.
class KeyError : public Error {
 public:
  using Error::Error;
};

// A formula symbol does not resolve to an attribute, covariate, or the label.
class NameError : public Error {
 public:
  using Error::Error;
};

// A record carries a categorical level absent from the schema.
class LevelError : public Error {
 public:
  using Error::Error;
};

// Formula text could not be parsed; message carries the character position.
class FormulaSyntaxError : public Error {
 public:
  using Error::Error;
};

// A parameter record does not conform to the model's design matrices.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A metric needs at least one score in a class that is empty.
class InsufficientClassError : public Error {
 public:
  using Error::Error;
};

// PPV with zero predicted positives; reported as missing, never as 0.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Too few observations to form a baseline (KDE needs at least two).
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// Posterior draws do not match the (spec, dataset) they are used with.
class StalenessError : public Error {
 public:
  using Error::Error;
};

// Run-configuration file is malformed or self-inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

// Numerical linear algebra failure (non-positive-definite system).
class LinalgError : public Error {
 public:
  using Error::Error;
};

}  // namespace mbm
