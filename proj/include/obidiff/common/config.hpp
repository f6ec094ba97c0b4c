// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace obidiff {

/// Reads one JSON object; SchemaError on parse failure or a non-object root.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// OBIDIFF_<A>__<B>=v sets cfg["a"]["b"]: the prefix is dropped, "__" separates
/// levels and keys are lower-cased. Values that parse as JSON keep their type;
/// anything else is stored as a string. Returns the applied keys as JSON pointers.
std::vector<std::string> apply_env_overrides(nlohmann::json& cfg, const std::map<std::string, std::string>& env);

/// Snapshot of the process environment restricted to OBIDIFF_ variables.
std::map<std::string, std::string> obidiff_environment();

/// Recursive merge; objects merge key-wise, everything else in `patch` replaces.
void merge_config(nlohmann::json& base, const nlohmann::json& patch);

/// Thrown when another process holds the output directory lock.
class LockError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Exclusive advisory lock on <dir>/.obidiff.lock, released on destruction or process exit.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    int fd_ = -1;
};

}  // namespace obidiff
