// SPDX-License-Identifier: Apache-2.0
#include "obidiff/eval/study.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "obidiff/common/errors.hpp"

namespace obidiff::eval {

using nlohmann::json;

const char* to_string(Choice c) { return c == Choice::Generated ? "generated" : "real"; }

std::optional<Choice> parse_choice(const std::string& s) {
    if (s == "real") return Choice::Real;
    if (s == "generated") return Choice::Generated;
    return std::nullopt;
}

std::vector<std::string> StudySession::unanswered() const {
    std::vector<std::string> out;
    for (const auto& item : items)
        if (!responses.count(item.item_id)) out.push_back(item.item_id);
    return out;
}

const StudyItem* StudySession::find(const std::string& item_id) const {
    for (const auto& item : items)
        if (item.item_id == item_id) return &item;
    return nullptr;
}

StudyMetrics metrics_from_confusion(const Confusion& c) {
    StudyMetrics m;
    if (c.tp + c.fp) m.precision = double(c.tp) / double(c.tp + c.fp);
    if (c.tp + c.fn) m.recall = double(c.tp) / double(c.tp + c.fn);
    if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    return m;
}

StudyReport score_study(const StudySession& session) {
    if (auto missing = session.unanswered(); !missing.empty()) throw IncompleteSessionError(std::move(missing));
    Confusion c;
    std::int64_t last = session.created_at_ms;
    for (const auto& item : session.items) {
        const auto& r = session.responses.at(item.item_id);
        last = std::max(last, r.timestamp_ms);
        const bool truth_pos = item.truth == Choice::Generated;
        const bool pred_pos = r.choice == Choice::Generated;
        if (truth_pos && pred_pos) ++c.tp;
        else if (!truth_pos && pred_pos) ++c.fp;
        else if (truth_pos) ++c.fn;
        else ++c.tn;
    }
    return {session.session_id, metrics_from_confusion(c), double(last - session.created_at_ms) / 1000.0,
            session.items.size()};
}

StudyMetrics aggregate_metrics(const std::vector<StudyMetrics>& sessions) {
    if (sessions.empty()) throw std::invalid_argument("aggregate_metrics: no sessions");
    StudyMetrics m;
    for (const auto& s : sessions) {
        m.precision += s.precision;
        m.recall += s.recall;
        m.f1 += s.f1;
    }
    const double n = double(sessions.size());
    return {m.precision / n, m.recall / n, m.f1 / n};
}

std::string report_to_json(const StudyReport& r) {
    nlohmann::ordered_json doc;
    doc["session_id"] = r.session_id;
    doc["precision"] = r.metrics.precision;
    doc["recall"] = r.metrics.recall;
    doc["f1"] = r.metrics.f1;
    doc["duration_s"] = r.duration_s;
    doc["n_items"] = r.n_items;
    return doc.dump();
}

namespace {

void append_line(const std::filesystem::path& log, const json& record) {
    if (log.has_parent_path()) std::filesystem::create_directories(log.parent_path());
    std::ofstream out(log, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot append to " + log.string());
    out << record.dump() << '\n';
    out.flush();
    if (!out) throw IoError("short write to " + log.string());
}

}  // namespace

void append_session_header(const std::filesystem::path& log, const StudySession& s) {
    json items = json::array();
    for (const auto& item : s.items) items.push_back(item.item_id);
    append_line(log, {{"type", "session"}, {"session_id", s.session_id}, {"created_at", s.created_at_ms}, {"items", items}});
}

void append_response(const std::filesystem::path& log, const std::string& item_id, const StudyResponse& r) {
    append_line(log, {{"type", "response"}, {"item_id", item_id}, {"choice", to_string(r.choice)}, {"timestamp", r.timestamp_ms}});
}

StudySession read_session_log(const std::filesystem::path& log, const std::vector<StudyItem>& bundle_items) {
    std::ifstream in(log);
    if (!in) throw IoError("cannot open session log " + log.string());
    std::map<std::string, const StudyItem*> index;
    for (const auto& item : bundle_items) index.emplace(item.item_id, &item);

    StudySession s;
    bool have_header = false;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string ptr = "/" + std::to_string(n);
        json rec;
        try {
            rec = json::parse(line);
            const auto type = rec.at("type").get<std::string>();
            if (type == "session") {
                if (have_header) throw SchemaError(ptr, "second session header");
                have_header = true;
                s.session_id = rec.at("session_id").get<std::string>();
                s.created_at_ms = rec.at("created_at").get<std::int64_t>();
                for (const auto& id : rec.at("items")) {
                    const auto hit = index.find(id.get<std::string>());
                    if (hit == index.end()) throw SchemaError(ptr + "/items", "item not in bundle: " + id.get<std::string>());
                    s.items.push_back(*hit->second);
                }
            } else if (type == "response") {
                if (!have_header) throw SchemaError(ptr, "response before session header");
                const auto id = rec.at("item_id").get<std::string>();
                const auto choice = parse_choice(rec.at("choice").get<std::string>());
                if (!choice) throw SchemaError(ptr + "/choice", "expected real or generated");
                if (!s.find(id)) throw SchemaError(ptr + "/item_id", "item not in session: " + id);
                s.responses.emplace(id, StudyResponse{*choice, rec.at("timestamp").get<std::int64_t>()});
            } else {
                throw SchemaError(ptr + "/type", "unknown record type " + type);
            }
        } catch (const json::exception& e) {
            throw SchemaError(ptr, e.what());
        }
    }
    if (!have_header) throw SchemaError("", "session log has no header: " + log.string());
    return s;
}

}  // namespace obidiff::eval
