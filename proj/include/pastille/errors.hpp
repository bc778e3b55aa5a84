#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pastille {

// Every error the library raises derives from Error so callers (the CLI in
// particular) can map failures to exit codes with a single catch.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class InvalidRegion : public Error {
 public:
  using Error::Error;
};

class NumericFailure : public Error {
 public:
  NumericFailure(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class NoLeadingRow : public Error {
 public:
  NoLeadingRow() : Error("belt is empty: no tracked row with deposited pastilles") {}
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class ObjectiveFailure : public Error {
 public:
  using Error::Error;
};

class TuningFailure : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset, std::int64_t record = -1)
      : Error(what), offset_(offset), record_(record) {}
  std::uint64_t offset() const noexcept { return offset_; }
  // Index of the record being read, or -1 when the header is at fault.
  std::int64_t record() const noexcept { return record_; }

 private:
  std::uint64_t offset_;
  std::int64_t record_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, int line = 0, std::string key = {})
      : Error(what), line_(line), key_(std::move(key)) {}
  int line() const noexcept { return line_; }
  const std::string& key() const noexcept { return key_; }

 private:
  int line_;
  std::string key_;
};

}  // namespace pastille
