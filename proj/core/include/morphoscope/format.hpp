// Copyright 2026 The Morphoscope Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MORPHOSCOPE_FORMAT_HPP_
#define MORPHOSCOPE_FORMAT_HPP_

#include <charconv>
#include <string>

namespace morphoscope {

// Shortest decimal form that parses back to the exact same double, so text
// outputs (landmark files, CSV logs) survive round trips bit for bit.
inline std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace morphoscope

#endif  // MORPHOSCOPE_FORMAT_HPP_
