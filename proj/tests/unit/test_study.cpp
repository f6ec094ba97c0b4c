// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "obidiff/common/errors.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/eval/study.hpp"
#include "obidiff/study/bundle.hpp"
#include "obidiff/study/server.hpp"
#include "support.hpp"

using namespace obidiff;
using namespace obidiff::eval;
using nlohmann::json;

namespace {

Confusion confusion(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
    Confusion c;
    c.tp = tp;
    c.fp = fp;
    c.fn = fn;
    c.tn = tn;
    return c;
}

StudySession session_of(std::size_t n) {
    StudySession s;
    s.session_id = "s1";
    s.created_at_ms = 1000;
    for (std::size_t i = 0; i < n; ++i)
        s.items.push_back({"i" + std::to_string(i), "images/i" + std::to_string(i) + ".png",
                           i % 2 ? Choice::Generated : Choice::Real});
    return s;
}

/// Small synthetic dataset with a val split, bundled with the copy-style generator.
struct BundleFixture {
    testing::TempDir dir{"bundle"};
    std::vector<StudyItem> items;

    BundleFixture() {
        data::SynthConfig sc;
        sc.classes = 3;
        sc.per_class = 6;
        sc.resolution = 32;
        sc.seed = 4;
        auto m = data::build_synthetic_dataset(sc, dir / "data");
        m = data::split_dataset(m, 0.5, 4);
        study::BundleConfig bc;
        bc.n_real = 4;
        bc.n_generated = 4;
        bc.seed = 2;
        items = study::build_bundle(m, diffusion::copy_style_generator(), bc, dir / "bundle");
    }
    std::filesystem::path bundle() const { return dir / "bundle"; }
};

struct RunningServer {
    study::StudyServer server;
    int port;
    std::thread thread;

    explicit RunningServer(study::ServerConfig cfg) : server(std::move(cfg)) {
        port = server.bind_to_any_port();
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~RunningServer() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

json post_response(httplib::Client& c, const json& body, int expect) {
    auto res = c.Post("/api/responses", body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == expect);
    return json::parse(res->body);
}

}  // namespace

TEST_CASE("metrics from confusion counts") {
    const auto half = metrics_from_confusion(confusion(5, 5, 5, 5));
    CHECK(half.precision == 0.5);
    CHECK(half.recall == 0.5);
    CHECK(half.f1 == 0.5);
    const auto perfect = metrics_from_confusion(confusion(7, 0, 0, 3));
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);
    CHECK(perfect.f1 == 1.0);
    const auto none = metrics_from_confusion(confusion(0, 0, 4, 6));
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
    const auto skew = metrics_from_confusion(confusion(3, 1, 3, 0));
    CHECK(skew.precision == 0.75);
    CHECK(skew.recall == 0.5);
    CHECK(skew.f1 == doctest::Approx(0.6));
}

TEST_CASE("aggregate is the mean of per-participant metrics") {
    const std::vector<double> p{0.56, 0.55, 0.50, 0.53, 0.49, 0.48, 0.52, 0.54, 0.58, 0.47, 0.54, 0.58, 0.54, 0.44, 0.49};
    const std::vector<double> r{0.53, 0.86, 0.88, 0.44, 0.62, 0.56, 0.40, 0.56, 0.48, 0.16, 0.63, 0.68, 0.63, 0.47, 0.66};
    const std::vector<double> f{0.54, 0.67, 0.64, 0.48, 0.55, 0.52, 0.45, 0.55, 0.53, 0.24, 0.58, 0.63, 0.58, 0.46, 0.56};
    std::vector<StudyMetrics> rows;
    for (std::size_t i = 0; i < p.size(); ++i) rows.push_back({p[i], r[i], f[i]});
    const auto avg = aggregate_metrics(rows);
    CHECK(std::round(avg.precision * 100) / 100 == doctest::Approx(0.52));
    CHECK(std::round(avg.recall * 100) / 100 == doctest::Approx(0.57));
    CHECK(std::round(avg.f1 * 100) / 100 == doctest::Approx(0.53));
    // F1 of the averaged precision and recall would differ.
    CHECK(2 * avg.precision * avg.recall / (avg.precision + avg.recall) != doctest::Approx(avg.f1).epsilon(1e-3));
    CHECK_THROWS_AS(aggregate_metrics({}), std::invalid_argument);
}

TEST_CASE("scoring a session") {
    auto s = session_of(4);
    CHECK(s.unanswered().size() == 4);
    s.responses["i0"] = {Choice::Real, 2000};
    s.responses["i1"] = {Choice::Generated, 3000};
    try {
        score_study(s);
        FAIL("expected IncompleteSessionError");
    } catch (const IncompleteSessionError& e) {
        CHECK(e.unanswered() == std::vector<std::string>{"i2", "i3"});
    }
    s.responses["i2"] = {Choice::Generated, 4000};
    s.responses["i3"] = {Choice::Real, 6500};
    const auto report = score_study(s);
    CHECK(report.metrics.precision == 0.5);
    CHECK(report.metrics.recall == 0.5);
    CHECK(report.duration_s == 5.5);
    CHECK(report.n_items == 4);
    const auto doc = json::parse(report_to_json(report));
    CHECK(doc["session_id"] == "s1");
    CHECK(doc["f1"] == 0.5);
    CHECK(doc["n_items"] == 4);

    CHECK(parse_choice("generated") == Choice::Generated);
    CHECK(parse_choice("real") == Choice::Real);
    CHECK_FALSE(parse_choice("fake").has_value());
}

TEST_CASE("session log round trip keeps the first answer") {
    testing::TempDir dir("log");
    auto s = session_of(3);
    const auto log = dir / "s1.jsonl";
    append_session_header(log, s);
    append_response(log, "i1", {Choice::Generated, 1500});
    append_response(log, "i1", {Choice::Real, 1600});
    append_response(log, "i0", {Choice::Real, 1700});
    const auto back = read_session_log(log, s.items);
    CHECK(back.session_id == "s1");
    CHECK(back.created_at_ms == 1000);
    CHECK(back.items.size() == 3);
    CHECK(back.items[1].truth == Choice::Generated);
    REQUIRE(back.responses.size() == 2);
    CHECK(back.responses.at("i1").choice == Choice::Generated);
    CHECK(back.unanswered() == std::vector<std::string>{"i2"});

    {
        std::ofstream out(log, std::ios::app);
        out << "{\"type\":\"response\",\"item_id\":\"zz\",\"choice\":\"real\",\"timestamp\":1}\n";
    }
    try {
        read_session_log(log, s.items);
        FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
        CHECK(e.pointer() == "/5/item_id");
    }
    CHECK_THROWS_AS(read_session_log(dir / "missing.jsonl", s.items), IoError);
}

TEST_CASE("study bundle layout") {
    BundleFixture fx;
    REQUIRE(fx.items.size() == 8);
    std::size_t generated = 0;
    for (const auto& item : fx.items) {
        generated += item.truth == Choice::Generated;
        CHECK(std::filesystem::exists(fx.bundle() / item.image_path));
        CHECK(item.item_id.find("gen") == std::string::npos);
    }
    CHECK(generated == 4);
    const auto loaded = study::load_bundle_items(fx.bundle());
    REQUIRE(loaded.size() == fx.items.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].item_id == fx.items[i].item_id);
        CHECK(loaded[i].image_path == fx.items[i].image_path);
        CHECK(loaded[i].truth == fx.items[i].truth);
    }
}

TEST_CASE("study server end to end") {
    BundleFixture fx;
    std::int64_t now = 10'000;
    study::ServerConfig cfg;
    cfg.bundle_dir = fx.bundle();
    cfg.clock = [&now] { return now += 250; };
    std::string sid;
    std::string report_bytes;
    {
        RunningServer srv(cfg);
        auto c = srv.client();

        auto res = c.Get("/api/session");
        REQUIRE(res);
        REQUIRE(res->status == 200);
        const auto session = json::parse(res->body);
        sid = session["session_id"];
        CHECK(session["n_items"] == 8);
        CHECK(session["complete"] == false);
        // Items expose ids only; the truth label stays server-side.
        for (const auto& item : session["items"]) CHECK(item.is_string());
        CHECK(res->body.find("truth") == std::string::npos);
        CHECK(res->body.find("generated") == std::string::npos);

        res = c.Get("/api/items/" + fx.items[0].item_id);
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(res->get_header_value("Content-Type") == "image/png");
        CHECK(res->body.substr(1, 3) == "PNG");
        res = c.Get("/api/items/nope");
        REQUIRE(res);
        CHECK(res->status == 404);
        CHECK(json::parse(res->body)["error"] == "unknown_item");

        res = c.Get("/api/report");
        REQUIRE(res);
        CHECK(res->status == 409);
        const auto pending = json::parse(res->body);
        CHECK(pending["error"] == "incomplete_session");
        CHECK(pending["unanswered"].size() == 8);

        post_response(c, {{"item_id", fx.items[0].item_id}}, 400);
        post_response(c, {{"item_id", fx.items[0].item_id}, {"choice", "maybe"}}, 400);
        post_response(c, {{"item_id", "nope"}, {"choice", "real"}}, 404);
        post_response(c, {{"session_id", "unknown"}, {"item_id", fx.items[0].item_id}, {"choice", "real"}}, 404);
        CHECK(c.Post("/api/responses", "{not json", "application/json")->status == 400);

        // Answer the first half correctly and the rest by always saying "real".
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& item = fx.items[i];
            const auto r = post_response(c, {{"session_id", sid}, {"item_id", item.item_id}, {"choice", to_string(item.truth)}}, 200);
            CHECK(r["status"] == "recorded");
            CHECK(r["answered"] == i + 1);
        }
        const auto dup = post_response(
            c, {{"item_id", fx.items[0].item_id},
                {"choice", fx.items[0].truth == Choice::Real ? "generated" : "real"}}, 200);
        CHECK(dup["status"] == "duplicate");
        CHECK(dup["choice"] == to_string(fx.items[0].truth));
    }
    {
        // A restarted server restores the session from its log.
        RunningServer srv(cfg);
        auto c = srv.client();
        auto res = c.Get("/api/session?id=" + sid);
        REQUIRE(res);
        REQUIRE(res->status == 200);
        const auto restored = json::parse(res->body);
        CHECK(restored["responses"].size() == 4);
        CHECK(c.Get("/api/session?id=bad%20id")->status == 404);
        for (std::size_t i = 4; i < 8; ++i)
            post_response(c, {{"session_id", sid}, {"item_id", fx.items[i].item_id}, {"choice", "real"}}, 200);
        res = c.Get("/api/report?session_id=" + sid);
        REQUIRE(res);
        REQUIRE(res->status == 200);
        report_bytes = res->body;
    }
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < 8; ++i) {
        const bool truth_gen = fx.items[i].truth == Choice::Generated;
        const bool said_gen = i < 4 && truth_gen;
        tp += truth_gen && said_gen;
        fp += !truth_gen && said_gen;
        fn += truth_gen && !said_gen;
        tn += !truth_gen && !said_gen;
    }
    const auto expected = metrics_from_confusion(confusion(tp, fp, fn, tn));
    const auto report = json::parse(report_bytes);
    CHECK(report["session_id"] == sid);
    CHECK(report["precision"].get<double>() == expected.precision);
    CHECK(report["recall"].get<double>() == expected.recall);
    CHECK(report["f1"].get<double>() == expected.f1);
    CHECK(report["n_items"] == 8);
    CHECK(report["duration_s"].get<double>() > 0.0);
    // The offline scorer reproduces the server's bytes.
    CHECK(study::score_session_log(fx.bundle(), fx.bundle() / "logs" / (sid + ".jsonl")) == report_bytes);
}
