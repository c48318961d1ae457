#ifndef FDR_ERROR_HPP
#define FDR_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fdr {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable/unwritable file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// File readable but not in a supported encoding.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Caller passed a value outside the documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Singular systems, non-finite losses, spectra that are not real-valued.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Folded meshes, self-intersecting boundaries.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Random mesh generation gave up.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Image pair has too little texture for a dense correspondence.
class MetricUndefinedError : public Error {
 public:
  using Error::Error;
};

}  // namespace fdr

#endif  // FDR_ERROR_HPP
