#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace demosynth {

// Base of every library error. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t position, const std::string& found,
              const std::string& expected)
      : Error("syntax error at offset " + std::to_string(position) +
              ": found '" + found + "', expected one of {" + expected + "}"),
        position_(position),
        expected_(expected) {}
  std::size_t position() const { return position_; }
  const std::string& expected() const { return expected_; }

 private:
  std::size_t position_;
  std::string expected_;
};

#define DEMOSYNTH_DEFINE_ERROR(Name)  \
  class Name : public Error {         \
   public:                            \
    using Error::Error;               \
  };

DEMOSYNTH_DEFINE_ERROR(LimitError)
DEMOSYNTH_DEFINE_ERROR(DecodeError)
DEMOSYNTH_DEFINE_ERROR(ConfigError)
DEMOSYNTH_DEFINE_ERROR(InvalidAction)
DEMOSYNTH_DEFINE_ERROR(RangeError)
DEMOSYNTH_DEFINE_ERROR(MalformedToken)
DEMOSYNTH_DEFINE_ERROR(IoError)
DEMOSYNTH_DEFINE_ERROR(BudgetError)
DEMOSYNTH_DEFINE_ERROR(CorruptDataset)
DEMOSYNTH_DEFINE_ERROR(VersionMismatch)
DEMOSYNTH_DEFINE_ERROR(ShapeError)
DEMOSYNTH_DEFINE_ERROR(DivergenceError)
DEMOSYNTH_DEFINE_ERROR(ClosureOverflow)

#undef DEMOSYNTH_DEFINE_ERROR

}  // namespace demosynth
