/*
 * Copyright 2026 The meshmpi Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
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

namespace meshmpi {

/// Invalid device or runtime configuration (bad dims, reserve >= memory, ...).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// A modeled allocation exceeded the per-core local memory budget.
/// Signals a configuration that is infeasible on the modeled hardware.
class OutOfMemoryError : public std::runtime_error {
public:
  explicit OutOfMemoryError(const std::string& what)
      : std::runtime_error("out of memory: " + what) {}
};

/// Protocol violation between communicating ranks (size/tag mismatch,
/// invalid rank, misuse of a communicator).
class CommError : public std::runtime_error {
public:
  explicit CommError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised inside blocked ranks when another rank of the same job failed.
class JobAborted : public std::runtime_error {
public:
  JobAborted() : std::runtime_error("job aborted by peer rank failure") {}
};

}  // namespace meshmpi
