// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace obidiff::eval {

enum class Choice { Real, Generated };

const char* to_string(Choice c);
std::optional<Choice> parse_choice(const std::string& s);

struct StudyItem {
    std::string item_id;
    std::string image_path;  // relative to the bundle root
    Choice truth = Choice::Real;
};

struct StudyResponse {
    Choice choice = Choice::Real;
    std::int64_t timestamp_ms = 0;
};

struct StudySession {
    std::string session_id;
    std::int64_t created_at_ms = 0;
    std::vector<StudyItem> items;
    std::map<std::string, StudyResponse> responses;

    std::vector<std::string> unanswered() const;
    bool complete() const { return unanswered().empty(); }
    const StudyItem* find(const std::string& item_id) const;
};

/// "generated" is the positive class.
struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct StudyMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Ratios with an empty denominator are 0.
StudyMetrics metrics_from_confusion(const Confusion& c);

struct StudyReport {
    std::string session_id;
    StudyMetrics metrics;
    double duration_s = 0.0;
    std::size_t n_items = 0;
};

/// Throws IncompleteSessionError naming every unanswered item.
StudyReport score_study(const StudySession& session);

/// Unweighted mean of per-session precision, recall and F1 (not F1 of the means).
StudyMetrics aggregate_metrics(const std::vector<StudyMetrics>& sessions);

/// Canonical report document; server, offline scorer and UI export share these bytes.
std::string report_to_json(const StudyReport& r);

// Append-only session log: one header record, then one record per accepted response.
void append_session_header(const std::filesystem::path& log, const StudySession& s);
void append_response(const std::filesystem::path& log, const std::string& item_id, const StudyResponse& r);

/// Rebuilds a session from its log and the bundle's items (which carry the truth).
/// Later duplicate responses for an item are ignored.
StudySession read_session_log(const std::filesystem::path& log, const std::vector<StudyItem>& bundle_items);

}  // namespace obidiff::eval
