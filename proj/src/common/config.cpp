// SPDX-License-Identifier: Apache-2.0
#include "obidiff/common/config.hpp"

#include <algorithm>
#include <cctype>
#include <fcntl.h>
#include <fstream>
#include <sys/file.h>
#include <unistd.h>

#include "obidiff/common/errors.hpp"

extern char** environ;

namespace obidiff {

using nlohmann::json;

namespace {
constexpr std::string_view kPrefix = "OBIDIFF_";
}

json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError("", "invalid JSON in " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw SchemaError("", "config root must be an object");
    return doc;
}

std::vector<std::string> apply_env_overrides(json& cfg, const std::map<std::string, std::string>& env) {
    std::vector<std::string> applied;
    for (const auto& [name, raw] : env) {
        if (name.size() <= kPrefix.size() || name.compare(0, kPrefix.size(), kPrefix) != 0) continue;
        std::string rest = name.substr(kPrefix.size());
        std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char c) { return char(std::tolower(c)); });
        std::vector<std::string> keys;
        for (std::size_t pos = 0;;) {
            const auto next = rest.find("__", pos);
            keys.push_back(rest.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
            if (next == std::string::npos) break;
            pos = next + 2;
        }
        if (std::any_of(keys.begin(), keys.end(), [](const std::string& k) { return k.empty(); }))
            throw SchemaError("", "malformed override variable " + name);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        json* node = &cfg;
        std::string ptr;
        for (std::size_t i = 0; i < keys.size(); ++i) {
            if (!node->is_object()) throw SchemaError(ptr, "override " + name + " descends into a non-object");
            ptr += "/" + keys[i];
            node = &(*node)[keys[i]];
            if (i + 1 < keys.size() && node->is_null()) *node = json::object();
        }
        *node = std::move(value);
        applied.push_back(ptr);
    }
    return applied;
}

std::map<std::string, std::string> obidiff_environment() {
    std::map<std::string, std::string> out;
    for (char** e = environ; e && *e; ++e) {
        const std::string entry(*e);
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        auto name = entry.substr(0, eq);
        if (name.compare(0, kPrefix.size(), kPrefix) == 0) out.emplace(std::move(name), entry.substr(eq + 1));
    }
    return out;
}

void merge_config(json& base, const json& patch) {
    if (!base.is_object() || !patch.is_object()) {
        base = patch;
        return;
    }
    for (const auto& [key, value] : patch.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object())
            merge_config(base[key], value);
        else
            base[key] = value;
    }
}

DirectoryLock::DirectoryLock(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto path = dir / ".obidiff.lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw LockError("output directory " + dir.string() + " is locked by another run");
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::ftruncate(fd_, 0) == 0) [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
}

DirectoryLock::~DirectoryLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

}  // namespace obidiff
