#pragma once

#include <stdexcept>
#include <string>

namespace fieldshift {

/// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind {
  Config = 2,
  Data = 3,
  Numeric = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string category, const std::string& what)
      : std::runtime_error(what), kind_(kind), category_(std::move(category)) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }
  const std::string& category() const noexcept { return category_; }

 private:
  ErrorKind kind_;
  std::string category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, "config", what) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::Data, "dimension", what) {}
};

struct GeometryError : Error {
  GeometryError(const std::string& what, std::size_t polygon_index)
      : Error(ErrorKind::Data, "geometry", what), polygon_index(polygon_index) {}
  std::size_t polygon_index;
};

struct StatisticsError : Error {
  explicit StatisticsError(const std::string& what) : Error(ErrorKind::Data, "statistics", what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::Data, "input", what) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error(ErrorKind::Data, "domain", what) {}
};

struct StateError : Error {
  explicit StateError(const std::string& what) : Error(ErrorKind::Data, "state", what) {}
};

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& what) : Error(ErrorKind::Data, "checkpoint", what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, "numeric", what) {}
};

}  // namespace fieldshift
