#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dabdu {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents violate an operation's shape contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition that is not about shapes.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised in checked mode when an operation produces NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file content.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Weight file does not match the parameter schema of the target model.
class SchemaError : public Error {
 public:
  SchemaError(std::vector<std::string> missing, std::vector<std::string> extra,
              std::vector<std::string> mismatched)
      : Error(describe(missing, extra, mismatched)),
        missing_(std::move(missing)),
        extra_(std::move(extra)),
        mismatched_(std::move(mismatched)) {}

  const std::vector<std::string>& missing() const noexcept { return missing_; }
  const std::vector<std::string>& extra() const noexcept { return extra_; }
  const std::vector<std::string>& mismatched() const noexcept { return mismatched_; }

 private:
  static std::string join(const std::vector<std::string>& names) {
    std::string out;
    for (const auto& n : names) {
      if (!out.empty()) out += ", ";
      out += n;
    }
    return out;
  }

  static std::string describe(const std::vector<std::string>& missing,
                              const std::vector<std::string>& extra,
                              const std::vector<std::string>& mismatched) {
    std::string msg = "weight schema mismatch";
    if (!missing.empty()) msg += "; missing: " + join(missing);
    if (!extra.empty()) msg += "; extra: " + join(extra);
    if (!mismatched.empty()) msg += "; shape mismatch: " + join(mismatched);
    return msg;
  }

  std::vector<std::string> missing_;
  std::vector<std::string> extra_;
  std::vector<std::string> mismatched_;
};

}  // namespace dabdu
