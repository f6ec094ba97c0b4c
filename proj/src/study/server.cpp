// SPDX-License-Identifier: Apache-2.0
#include "obidiff/study/server.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <regex>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "obidiff/common/errors.hpp"
#include "obidiff/eval/study.hpp"
#include "obidiff/study/bundle.hpp"

namespace obidiff::study {

using nlohmann::json;

namespace {

std::int64_t system_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& error, const std::string& detail,
                json extra = json::object()) {
    extra["error"] = error;
    extra["detail"] = detail;
    send_json(res, status, extra);
}

bool valid_session_id(const std::string& id) {
    static const std::regex re("[A-Za-z0-9_-]{1,64}");
    return std::regex_match(id, re);
}

}  // namespace

struct StudyServer::Impl {
    ServerConfig cfg;
    std::vector<eval::StudyItem> items;
    std::map<std::string, std::size_t> item_index;
    httplib::Server http;
    std::mutex mu;  // guards sessions, latest and every log append
    std::map<std::string, eval::StudySession> sessions;
    std::string latest;
    std::mt19937_64 ids{std::random_device{}()};

    std::filesystem::path log_path(const std::string& id) const { return cfg.log_dir / (id + ".jsonl"); }

    // Caller holds mu. Returns nullptr when the id is unknown both in memory and on disk.
    eval::StudySession* lookup(const std::string& id) {
        if (id.empty()) return latest.empty() ? nullptr : &sessions.at(latest);
        if (!valid_session_id(id)) return nullptr;
        auto it = sessions.find(id);
        if (it == sessions.end()) {
            const auto path = log_path(id);
            if (!std::filesystem::exists(path)) return nullptr;
            it = sessions.emplace(id, eval::read_session_log(path, items)).first;
        }
        return &it->second;
    }

    json session_view(const eval::StudySession& s) const {
        json order = json::array(), answered = json::object();
        for (const auto& item : s.items) order.push_back(item.item_id);
        for (const auto& [id, r] : s.responses) answered[id] = eval::to_string(r.choice);
        return {{"session_id", s.session_id}, {"created_at", s.created_at_ms}, {"n_items", s.items.size()},
                {"items", order},           {"responses", answered},        {"complete", s.complete()}};
    }

    void get_session(const httplib::Request& req, httplib::Response& res) {
        std::lock_guard lock(mu);
        if (req.has_param("id")) {
            const auto id = req.get_param_value("id");
            auto* s = lookup(id);
            if (!s || id.empty()) return send_error(res, 404, "unknown_session", "no session with id '" + id + "'");
            latest = s->session_id;
            return send_json(res, 200, session_view(*s));
        }
        eval::StudySession s;
        do {
            std::ostringstream id;
            id << std::hex << ids();
            s.session_id = id.str();
        } while (sessions.count(s.session_id) || std::filesystem::exists(log_path(s.session_id)));
        s.created_at_ms = cfg.clock();
        s.items = items;
        eval::append_session_header(log_path(s.session_id), s);
        latest = s.session_id;
        const auto view = session_view(s);
        const auto id = s.session_id;
        sessions.emplace(id, std::move(s));
        send_json(res, 200, view);
    }

    void get_item(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto it = item_index.find(id);
        if (it == item_index.end()) return send_error(res, 404, "unknown_item", "no item with id '" + id + "'");
        std::ifstream in(cfg.bundle_dir / items[it->second].image_path, std::ios::binary);
        if (!in) return send_error(res, 500, "io_error", "image for item '" + id + "' is missing");
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        res.set_content(std::move(bytes), "image/png");
    }

    void post_response(const httplib::Request& req, httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::parse_error& e) {
            return send_error(res, 400, "bad_request", std::string("invalid JSON: ") + e.what());
        }
        if (!body.is_object() || !body.contains("item_id") || !body["item_id"].is_string() || !body.contains("choice") ||
            !body["choice"].is_string())
            return send_error(res, 400, "bad_request", "expected {item_id: string, choice: string}");
        if (body.contains("session_id") && !body["session_id"].is_string())
            return send_error(res, 400, "bad_request", "session_id must be a string");
        const auto item_id = body["item_id"].get<std::string>();
        const auto choice = eval::parse_choice(body["choice"].get<std::string>());
        if (!choice) return send_error(res, 400, "bad_request", "choice must be 'real' or 'generated'");

        std::lock_guard lock(mu);
        const auto sid = body.value("session_id", std::string());
        auto* s = lookup(sid);
        if (!s) return send_error(res, 404, "unknown_session", sid.empty() ? "no active session" : "no session with id '" + sid + "'");
        if (!s->find(item_id))
            return send_error(res, 404, "unknown_item", "item '" + item_id + "' is not part of session " + s->session_id);
        if (const auto prev = s->responses.find(item_id); prev != s->responses.end()) {
            return send_json(res, 200,
                             {{"status", "duplicate"},
                              {"session_id", s->session_id},
                              {"item_id", item_id},
                              {"choice", eval::to_string(prev->second.choice)},
                              {"warning", "item already answered; the first answer is kept"}});
        }
        const eval::StudyResponse r{*choice, cfg.clock()};
        eval::append_response(log_path(s->session_id), item_id, r);
        s->responses.emplace(item_id, r);
        send_json(res, 200,
                  {{"status", "recorded"},
                   {"session_id", s->session_id},
                   {"item_id", item_id},
                   {"choice", eval::to_string(r.choice)},
                   {"answered", s->responses.size()},
                   {"n_items", s->items.size()},
                   {"complete", s->complete()}});
    }

    void get_report(const httplib::Request& req, httplib::Response& res) {
        std::lock_guard lock(mu);
        const auto sid = req.has_param("session_id") ? req.get_param_value("session_id") : req.get_param_value("id");
        auto* s = lookup(sid);
        if (!s) return send_error(res, 404, "unknown_session", sid.empty() ? "no active session" : "no session with id '" + sid + "'");
        try {
            res.set_content(eval::report_to_json(eval::score_study(*s)), "application/json");
        } catch (const IncompleteSessionError& e) {
            send_error(res, 409, "incomplete_session",
                       std::to_string(e.unanswered().size()) + " of " + std::to_string(s->items.size()) +
                           " items unanswered",
                       {{"unanswered", e.unanswered()}});
        }
    }
};

StudyServer::StudyServer(ServerConfig config) : impl_(std::make_unique<Impl>()) {
    auto& im = *impl_;
    im.cfg = std::move(config);
    if (im.cfg.log_dir.empty()) im.cfg.log_dir = im.cfg.bundle_dir / "logs";
    if (!im.cfg.clock) im.cfg.clock = system_ms;
    im.items = load_bundle_items(im.cfg.bundle_dir);
    for (std::size_t i = 0; i < im.items.size(); ++i)
        if (!im.item_index.emplace(im.items[i].item_id, i).second)
            throw SchemaError("/items/" + std::to_string(i) + "/item_id", "duplicate item id " + im.items[i].item_id);
    std::filesystem::create_directories(im.cfg.log_dir);

    auto guarded = [&im](void (Impl::*fn)(const httplib::Request&, httplib::Response&)) {
        return [&im, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                (im.*fn)(req, res);
            } catch (const SchemaError& e) {
                send_error(res, 500, "corrupt_log", e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "internal_error", e.what());
            }
        };
    };
    im.http.Get("/api/session", guarded(&Impl::get_session));
    im.http.Get(R"(/api/items/([A-Za-z0-9_.-]+))", guarded(&Impl::get_item));
    im.http.Post("/api/responses", guarded(&Impl::post_response));
    im.http.Get("/api/report", guarded(&Impl::get_report));
    if (!im.cfg.static_dir.empty()) {
        if (!im.http.set_mount_point("/", im.cfg.static_dir.string()))
            throw IoError("static directory not found: " + im.cfg.static_dir.string());
    }
}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind_to_any_port(const std::string& host) { return impl_->http.bind_to_any_port(host); }
bool StudyServer::listen_after_bind() { return impl_->http.listen_after_bind(); }
bool StudyServer::listen(const std::string& host, int port) { return impl_->http.listen(host, port); }
void StudyServer::wait_until_ready() const { impl_->http.wait_until_ready(); }
void StudyServer::stop() {
    if (impl_) impl_->http.stop();
}

}  // namespace obidiff::study
