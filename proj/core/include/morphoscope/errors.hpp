/*
 * Copyright 2026 Morphoscope Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace morphoscope {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Shapes or dimensionalities of two operands do not agree.
class DimensionMismatchError : public Error {
 public:
  explicit DimensionMismatchError(const std::string& what) : Error(what) {}
};

/// A linear system is singular or numerically singular.
class SingularSystemError : public Error {
 public:
  explicit SingularSystemError(const std::string& what) : Error(what) {}
};

/// An argument violates a documented precondition.
class InvalidArgumentError : public Error {
 public:
  explicit InvalidArgumentError(const std::string& what) : Error(what) {}
};

/// Filesystem-level failure (open/read/write).
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

/// Reason a tensor or image file was rejected.
enum class FormatErrorCode {
  BadMagic,
  BadVersion,
  BadDtype,
  BadRank,
  BadDims,
  TruncatedPayload,
  SizeMismatch,
  NonFiniteData,
  UnsupportedFormat,
  BadMaxval,
};

/// A file exists but does not conform to its declared format.
class FormatError : public Error {
 public:
  FormatError(FormatErrorCode code, const std::string& what)
      : Error(what), code_(code) {}
  FormatErrorCode code() const { return code_; }

 private:
  FormatErrorCode code_;
};

}  // namespace morphoscope
