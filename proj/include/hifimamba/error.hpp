/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <stdexcept>
#include <string>

namespace hifi {

/// Broad failure class; the CLI maps each one onto a process exit code.
enum class ErrorClass { config = 2, io = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }
  int exit_code() const noexcept { return static_cast<int>(cls_); }

 private:
  ErrorClass cls_;
};

#define HIFI_DEFINE_ERROR(Name, Cls)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(Cls, #Name ": " + what) {} \
  }

// Shapes and configuration.
HIFI_DEFINE_ERROR(ShapeMismatch, ErrorClass::config);
HIFI_DEFINE_ERROR(OddDimension, ErrorClass::config);
HIFI_DEFINE_ERROR(OddSpatialDim, ErrorClass::config);
HIFI_DEFINE_ERROR(IndivisibleShape, ErrorClass::config);
HIFI_DEFINE_ERROR(InfeasibleMask, ErrorClass::config);
HIFI_DEFINE_ERROR(ImageTooSmall, ErrorClass::config);
HIFI_DEFINE_ERROR(ConfigError, ErrorClass::config);

// Numerics.
HIFI_DEFINE_ERROR(ConstantImage, ErrorClass::numeric);
HIFI_DEFINE_ERROR(NonFiniteInput, ErrorClass::numeric);
HIFI_DEFINE_ERROR(NonPositiveDelta, ErrorClass::numeric);
HIFI_DEFINE_ERROR(ZeroReference, ErrorClass::numeric);
HIFI_DEFINE_ERROR(NonFiniteLoss, ErrorClass::numeric);

// Files and datasets.
HIFI_DEFINE_ERROR(MissingDataset, ErrorClass::io);
HIFI_DEFINE_ERROR(CorruptFile, ErrorClass::io);
HIFI_DEFINE_ERROR(EmptyVolume, ErrorClass::io);
HIFI_DEFINE_ERROR(IoError, ErrorClass::io);

#undef HIFI_DEFINE_ERROR

}  // namespace hifi
