// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>

namespace obidiff::study {

struct ServerConfig {
    std::filesystem::path bundle_dir;
    std::filesystem::path log_dir;     // defaults to <bundle_dir>/logs
    std::filesystem::path static_dir;  // served at "/" when non-empty
    // Milliseconds since the epoch; replaceable for deterministic tests.
    std::function<std::int64_t()> clock;
};

/// HTTP front end of the study. Every session owns one append-only log, so a
/// restarted server restores any session by id; all appends are serialized.
///
///   GET  /api/session[?id=ID]   create, or restore an existing session
///   GET  /api/items/{item_id}   PNG bytes, never the truth label
///   POST /api/responses         {session_id?, item_id, choice}; first answer wins
///   GET  /api/report[?session_id=ID]  409 until every item is answered
///
/// Requests without a session id address the most recently created or restored session.
class StudyServer {
public:
    explicit StudyServer(ServerConfig config);
    ~StudyServer();
    StudyServer(const StudyServer&) = delete;
    StudyServer& operator=(const StudyServer&) = delete;

    /// Binds to an ephemeral port and returns it; then call listen_after_bind().
    int bind_to_any_port(const std::string& host = "127.0.0.1");
    bool listen_after_bind();
    bool listen(const std::string& host, int port);
    void wait_until_ready() const;
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace obidiff::study
