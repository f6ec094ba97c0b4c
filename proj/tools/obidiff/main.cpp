// SPDX-License-Identifier: Apache-2.0
// obidiff: dataset, training, generation, evaluation and study commands.
//
// Every command resolves its parameters as defaults < --config file < OBIDIFF_
// environment overrides < command-line flags, and writes the resolved document
// to <out>/config.resolved.json so the run can be repeated with --config alone.

#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "obidiff/common/checkpoint.hpp"
#include "obidiff/common/config.hpp"
#include "obidiff/common/errors.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/data/synth.hpp"
#include "obidiff/denoiser/denoiser.hpp"
#include "obidiff/diffusion/pipeline.hpp"
#include "obidiff/eval/augment.hpp"
#include "obidiff/eval/classifier.hpp"
#include "obidiff/eval/metrics.hpp"
#include "obidiff/study/bundle.hpp"
#include "obidiff/study/server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace obidiff;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kModelState = 3, kIo = 4, kLocked = 5, kIncomplete = 6 };

constexpr const char* kResolvedName = "config.resolved.json";

json defaults() {
    return {{"seed", 0},
            {"synth", {{"classes", 8}, {"per_class", 60}, {"first_class", 0}, {"resolution", 64}}},
            {"split", {{"ratio", 0.8}, {"test_classes", json::array()}}},
            {"schedule", {{"T", 1000}, {"beta_start", 1e-4}, {"beta_end", 0.02}}},
            {"model", diffusion::to_json(diffusion::ModelConfig{})},
            {"train", diffusion::to_json(diffusion::TrainConfig{})},
            {"generate",
             {{"mode", "few-shot"}, {"sampling_steps", 50}, {"limit", 0}, {"dual_mask", true}}},
            {"denoiser", denoiser::to_json(denoiser::DenoiserConfig{})},
            {"denoiser_train", denoiser::to_json(denoiser::DenoiserTrainConfig{})},
            {"classifier", eval::to_json(eval::ClassifierConfig{})},
            {"classifier_train", eval::to_json(eval::ClassifierTrainConfig{})},
            {"classifier_input", "style"},
            {"eval", {{"split", "val"}}},
            {"augment", {{"scales", {1, 5}}, {"rare_classes", json::array()}, {"rare_keep", 6}, {"sampling_steps", 50}}},
            {"features", {{"kde_points", 128}}},
            {"study", {{"n_real", 50}, {"n_generated", 50}, {"split", "val"}, {"sampling_steps", 50}}},
            {"serve", {{"host", "127.0.0.1"}, {"port", 8080}}}};
}

/// Options shared by every subcommand plus the flag overrides it collected.
struct Invocation {
    std::string config_path;
    // Each applier copies one explicitly given flag into `flags`.
    std::vector<std::function<void(json&)>> appliers;

    json resolve() const {
        json cfg = defaults();
        if (!config_path.empty()) merge_config(cfg, load_config_file(config_path));
        for (const auto& ptr : apply_env_overrides(cfg, obidiff_environment())) std::cerr << "env override " << ptr << "\n";
        json flags = json::object();
        for (const auto& apply : appliers) apply(flags);
        merge_config(cfg, flags);
        return cfg;
    }
};

/// Registers a flag whose value lands at `ptr` in the config when given.
template <typename V>
void bind(CLI::App* app, Invocation& inv, const std::string& flag, const std::string& ptr, const std::string& help) {
    auto value = std::make_shared<V>();
    auto* opt = app->add_option(flag, *value, help);
    inv.appliers.push_back([opt, ptr, value](json& flags) {
        if (opt->count()) flags[json::json_pointer(ptr)] = *value;
    });
}

void bind_flag(CLI::App* app, Invocation& inv, const std::string& flag, const std::string& ptr, bool value,
               const std::string& help) {
    auto* opt = app->add_flag(flag, help);
    inv.appliers.push_back([opt, ptr, value](json& flags) {
        if (opt->count()) flags[json::json_pointer(ptr)] = value;
    });
}

void add_common(CLI::App* app, Invocation& inv) {
    app->add_option("--config", inv.config_path, "JSON config document")->check(CLI::ExistingFile);
    bind<std::uint64_t>(app, inv, "--seed", "/seed", "Master seed");
    bind<std::string>(app, inv, "--out", "/out", "Output directory");
}

std::string require_string(const json& cfg, const std::string& ptr, const std::string& what) {
    const json::json_pointer p(ptr);
    if (!cfg.contains(p) || !cfg[p].is_string() || cfg[p].get<std::string>().empty())
        throw std::invalid_argument(what + " is required (config " + ptr + ")");
    return cfg[p].get<std::string>();
}

fs::path out_dir(const json& cfg, const fs::path& fallback = {}) {
    if (cfg.contains("out") && cfg["out"].is_string()) return cfg["out"].get<std::string>();
    if (!fallback.empty()) return fallback;
    throw std::invalid_argument("--out is required");
}

void write_resolved(const fs::path& dir, const json& cfg) {
    data::write_file_atomic(dir / kResolvedName, cfg.dump(2) + "\n");
}

void write_text(const fs::path& path, const std::string& text) { data::write_file_atomic(path, text); }

std::string csv_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

diffusion::NoiseSchedule schedule_from(const json& s) {
    return diffusion::make_schedule(s.at("T").get<int>(), s.at("beta_start").get<double>(), s.at("beta_end").get<double>());
}

// ---------------------------------------------------------------- dataset

int cmd_synth(const json& cfg) {
    const auto& s = cfg["synth"];
    data::SynthConfig sc;
    sc.classes = s.at("classes").get<int>();
    sc.per_class = s.at("per_class").get<int>();
    sc.first_class = s.at("first_class").get<int>();
    sc.resolution = s.at("resolution").get<std::size_t>();
    sc.seed = cfg["seed"].get<std::uint64_t>();
    const auto dir = out_dir(cfg);
    DirectoryLock lock(dir);
    const auto m = data::build_synthetic_dataset(sc, dir);
    write_resolved(dir, cfg);
    std::cout << "wrote " << m.pairs.size() << " pairs to " << (dir / "manifest.json").string() << "\n";
    return kOk;
}

int cmd_validate(const json& cfg) {
    const fs::path manifest_path = require_string(cfg, "/manifest", "--manifest");
    auto m = data::load_manifest(manifest_path);
    const auto dir = out_dir(cfg, m.root);
    std::ostringstream csv;
    const auto summary = data::run_quality_gate(m, csv);
    write_text(dir / "qc.csv", csv.str());
    data::save_manifest(m, manifest_path);
    write_resolved(dir, cfg);
    std::cout << "accepted " << summary.accepted << " rejected " << summary.rejected << " mean_iou_accepted "
              << summary.mean_iou_accepted << "\n";
    return kOk;
}

int cmd_split(const json& cfg) {
    const fs::path manifest_path = require_string(cfg, "/manifest", "--manifest");
    const auto m = data::load_manifest(manifest_path);
    const auto& s = cfg["split"];
    const auto out = data::split_dataset(m, s.at("ratio").get<double>(), cfg["seed"].get<std::uint64_t>(),
                                         s.at("test_classes").get<std::vector<int>>());
    data::save_manifest(out, manifest_path);
    write_resolved(out_dir(cfg, m.root), cfg);
    for (const auto& [name, ids] : out.splits) std::cout << name << " " << ids.size() << "\n";
    return kOk;
}

// ---------------------------------------------------------------- diffusion

int cmd_train_diffusion(json cfg) {
    const auto m = data::load_manifest(require_string(cfg, "/manifest", "--manifest"));
    auto model_cfg = diffusion::model_config_from_json(cfg["model"]);
    model_cfg.resolution = m.resolution;
    auto train_cfg = diffusion::train_config_from_json(cfg["train"]);
    train_cfg.seed = cfg["seed"].get<std::uint64_t>();
    const auto dir = out_dir(cfg);
    train_cfg.checkpoint_dir = dir;
    cfg["model"] = diffusion::to_json(model_cfg);
    cfg["train"] = diffusion::to_json(train_cfg);
    const auto sched = schedule_from(cfg["schedule"]);

    DirectoryLock lock(dir);
    write_resolved(dir, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = diffusion::train(m, model_cfg, train_cfg, sched, [&](int step, double loss) {
        if (step % 50 == 0) std::cerr << "step " << step << " loss " << loss << "\n";
    });
    const double train_s = seconds_since(t0);
    diffusion::save_diffusion(dir, result.model, sched, train_cfg.seed, result.loss_ema, cfg["train"]);

    std::ostringstream losses;
    losses << "step,loss\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i) losses << i << ',' << csv_number(result.losses[i]) << '\n';
    write_text(dir / "losses.csv", losses.str());

    json summary = {{"steps", train_cfg.steps}, {"loss_ema", result.loss_ema}, {"train_seconds", train_s}};
    const auto val = diffusion::load_examples(m, "val", train_cfg.masking);
    if (!val.empty()) summary["val_eps_mse"] = diffusion::validation_eps_mse(result.model, val, sched, train_cfg.seed);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
    return kOk;
}

struct GenJob {
    fs::path glyph, style, out;
    std::uint64_t seed;
    bool dual;
    std::string label;
};

int cmd_generate(const json& cfg) {
    const auto& g = cfg["generate"];
    const fs::path ckpt = require_string(cfg, "/generate/checkpoint", "--checkpoint");
    const auto loaded = diffusion::load_diffusion(ckpt);
    diffusion::require_usable(loaded.model);
    const std::string mode = g.at("mode").get<std::string>();
    const int steps = g.at("sampling_steps").get<int>();
    const bool dual = g.at("dual_mask").get<bool>();
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const auto dir = out_dir(cfg);

    std::vector<GenJob> jobs;
    if (mode == "personalized") {
        if (g.contains("requests")) {
            std::ifstream in(g["requests"].get<std::string>());
            if (!in) throw IoError("cannot open requests file");
            for (const auto& r : diffusion::parse_generation_requests(in))
                jobs.push_back({r.glyph_path, r.style_path, r.out_path, r.seed, r.dual_mask, r.out_path});
        } else {
            const fs::path glyph = require_string(cfg, "/generate/glyph", "--glyph");
            const fs::path style = require_string(cfg, "/generate/style", "--style");
            jobs.push_back({glyph, style, dir / "generated.png", seed, dual, "generated"});
        }
    } else if (mode == "few-shot" || mode == "zero-shot") {
        const auto m = data::load_manifest(require_string(cfg, "/manifest", "--manifest"));
        // Zero-shot conditions only on classes absent from training.
        const std::string split = mode == "zero-shot" ? "test" : g.value("split", std::string("val"));
        auto pairs = m.split(split);
        if (pairs.empty())
            throw std::invalid_argument("split '" + split + "' is empty" +
                                        (mode == "zero-shot" ? "; run split with --test-classes" : ""));
        const auto limit = g.at("limit").get<std::size_t>();
        if (limit && pairs.size() > limit) pairs.resize(limit);
        for (std::size_t i = 0; i < pairs.size(); ++i)
            jobs.push_back({m.resolve(pairs[i].glyph_path), m.resolve(pairs[i].style_path),
                            dir / "images" / (pairs[i].pair_id + ".png"), seed * 1000003ULL + i, dual, pairs[i].pair_id});
    } else {
        throw std::invalid_argument("unknown generate mode '" + mode + "' (personalized|few-shot|zero-shot)");
    }

    write_resolved(dir, cfg);
    json provenance = {{"checkpoint", fs::absolute(ckpt).string()},
                       {"checkpoint_step", loaded.meta.step},
                       {"mode", mode},
                       {"sampling_steps", steps},
                       {"items", json::array()}};
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const auto& j = jobs[i];
        const auto glyph = data::load_png(j.glyph);
        const auto style = data::load_png(j.style);
        const auto img = diffusion::generate_personalized(loaded.model, glyph, style, j.dual, loaded.schedule, steps, j.seed);
        data::save_png(j.out, img);
        provenance["items"].push_back({{"glyph", j.glyph.string()},
                                       {"style", j.style.string()},
                                       {"output", j.out.string()},
                                       {"seed", j.seed},
                                       {"dual_mask", j.dual}});
        std::cerr << "generated " << (i + 1) << "/" << jobs.size() << " " << j.label << "\n";
    }
    provenance["seconds"] = seconds_since(t0);
    write_text(dir / "provenance.json", provenance.dump(2) + "\n");
    return kOk;
}

// ---------------------------------------------------------------- denoiser / classifier

int cmd_train_denoiser(json cfg) {
    const auto m = data::load_manifest(require_string(cfg, "/manifest", "--manifest"));
    auto dc = denoiser::denoiser_config_from_json(cfg["denoiser"]);
    dc.resolution = m.resolution;
    auto tc = denoiser::denoiser_train_config_from_json(cfg["denoiser_train"]);
    tc.seed = cfg["seed"].get<std::uint64_t>();
    cfg["denoiser"] = denoiser::to_json(dc);
    cfg["denoiser_train"] = denoiser::to_json(tc);
    const auto dir = out_dir(cfg);
    DirectoryLock lock(dir);
    write_resolved(dir, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = denoiser::train_denoiser(m, dc, tc);
    json summary = {{"epochs", tc.epochs}, {"train_seconds", seconds_since(t0)},
                    {"final_loss", result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()}};
    const auto val = denoiser::load_image_pairs(m, "val");
    if (!val.empty()) summary["val_l1"] = denoiser::evaluate_l1(result.model, val);
    denoiser::save_denoiser(dir, result.model, tc.seed, summary["final_loss"].get<double>(), cfg["denoiser_train"]);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
    return kOk;
}

std::vector<eval::LabeledImage> labeled_styles(const data::DatasetManifest& m, const std::string& split) {
    std::vector<eval::LabeledImage> out;
    for (const auto& p : m.split(split)) out.push_back({data::load_png(m.resolve(p.style_path)), p.class_id});
    return out;
}

json acc_json(const eval::AccAtK& a) { return {{"acc1", a.acc1}, {"acc3", a.acc3}, {"acc5", a.acc5}}; }

int cmd_train_classifier(json cfg) {
    const auto m = data::load_manifest(require_string(cfg, "/manifest", "--manifest"));
    auto cc = eval::classifier_config_from_json(cfg["classifier"]);
    cc.resolution = m.resolution;
    auto tc = eval::classifier_train_config_from_json(cfg["classifier_train"]);
    tc.seed = cfg["seed"].get<std::uint64_t>();
    cfg["classifier"] = eval::to_json(cc);
    cfg["classifier_train"] = eval::to_json(tc);
    const auto dir = out_dir(cfg);
    DirectoryLock lock(dir);
    write_resolved(dir, cfg);
    // "glyph" trains a recognizer for the clean domain, the one denoised rubbings are mapped into.
    const auto input = cfg["classifier_input"].get<std::string>();
    if (input != "style" && input != "glyph") throw SchemaError("/classifier_input", "expected style or glyph");
    std::vector<eval::LabeledImage> train;
    if (input == "glyph")
        for (const auto& p : m.split("train")) train.push_back({data::load_pair(m, p).glyph, p.class_id});
    else
        train = labeled_styles(m, "train");
    const auto t0 = std::chrono::steady_clock::now();
    const auto clf = eval::train_classifier(train, cc, tc);
    json summary = {{"input", input}, {"train_items", train.size()}, {"train_seconds", seconds_since(t0)}};
    const auto val = labeled_styles(m, "val");
    if (!val.empty()) summary["val"] = acc_json(eval::evaluate_accuracy(clf, val));
    eval::save_classifier(dir, clf, tc.seed, cfg["classifier_train"]);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
    return kOk;
}

// ---------------------------------------------------------------- evaluation

std::vector<fs::path> png_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::string metrics_row(const std::string& a, const std::string& b, const eval::PairMetrics& pm) {
    return a + ',' + b + ',' + csv_number(pm.l1) + ',' + csv_number(pm.rmse) + ',' + csv_number(pm.psnr) + ',' +
           csv_number(pm.ssim) + '\n';
}

int cmd_eval(const json& cfg) {
    const auto& e = cfg["eval"];
    const auto dir = out_dir(cfg);
    json summary = json::object();
    std::string metrics = "image_a,image_b,l1,rmse,psnr,ssim\n";
    std::size_t metric_rows = 0;

    if (e.contains("a") || e.contains("b")) {
        // Directory mode: pair files by name.
        const fs::path a = require_string(cfg, "/eval/a", "--a"), b = require_string(cfg, "/eval/b", "--b");
        for (const auto& pa : png_files(a)) {
            const auto pb = b / pa.filename();
            if (!fs::exists(pb)) continue;
            metrics += metrics_row(pa.string(), pb.string(), eval::pair_metrics(data::load_png(pa), data::load_png(pb)));
            ++metric_rows;
        }
    }

    if (cfg.contains("manifest")) {
        const auto m = data::load_manifest(cfg["manifest"].get<std::string>());
        const std::string split = e.at("split").get<std::string>();
        const auto pairs = m.split(split);
        std::vector<data::GrayImage> real, generated;
        std::vector<eval::LabeledImage> gen_labeled;
        if (e.contains("images")) {
            const fs::path images = e["images"].get<std::string>();
            for (const auto& p : pairs) {
                const auto path = images / (p.pair_id + ".png");
                if (!fs::exists(path)) continue;
                const auto ref = data::load_png(m.resolve(p.style_path));
                auto img = data::load_png(path);
                metrics += metrics_row(path.string(), m.resolve(p.style_path).string(), eval::pair_metrics(img, ref));
                ++metric_rows;
                real.push_back(ref);
                gen_labeled.push_back({img, p.class_id});
                generated.push_back(std::move(img));
            }
        }
        if (e.contains("classifier")) {
            const auto clf = eval::load_classifier(e["classifier"].get<std::string>());
            std::optional<denoiser::DenoiserNet<float>> den;
            if (e.contains("denoiser")) den = denoiser::load_denoiser(e["denoiser"].get<std::string>());
            std::string acc = "set,subset,n,acc1,acc3,acc5\n";
            auto row = [&](const std::string& set, const std::string& subset, const std::vector<eval::LabeledImage>& items) {
                if (items.empty()) return;
                const auto a = eval::evaluate_accuracy(clf, items);
                acc += set + ',' + subset + ',' + std::to_string(items.size()) + ',' + csv_number(a.acc1) + ',' +
                       csv_number(a.acc3) + ',' + csv_number(a.acc5) + '\n';
                summary["accuracy"][set][subset] = acc_json(a);
            };
            std::vector<eval::LabeledImage> raw, denoised;
            std::vector<data::NoiseType> types;
            for (const auto& p : pairs) {
                raw.push_back({data::load_png(m.resolve(p.style_path)), p.class_id});
                types.push_back(p.noise_type);
            }
            if (den) {
                std::vector<data::GrayImage> inputs;
                for (const auto& r : raw) inputs.push_back(r.image);
                const auto out = denoiser::denoise_batch(*den, inputs);
                for (std::size_t i = 0; i < out.size(); ++i) denoised.push_back({out[i], raw[i].class_id});
            }
            auto emit = [&](const std::string& set, const std::vector<eval::LabeledImage>& items) {
                row(set, "all", items);
                for (int t = 0; t < data::kNoiseTypeCount; ++t) {
                    std::vector<eval::LabeledImage> sub;
                    for (std::size_t i = 0; i < items.size(); ++i)
                        if (int(types[i]) == t) sub.push_back(items[i]);
                    row(set, std::string(data::to_string(data::NoiseType(t))), sub);
                }
            };
            emit("raw", raw);
            if (den) emit("denoised", denoised);
            if (!gen_labeled.empty()) {
                row("generated", "all", gen_labeled);
                summary["fid_proxy"] = eval::fid_proxy(real, generated, clf);
            }
            write_text(dir / "accuracy.csv", acc);
        }
    }
    if (!metric_rows && !summary.contains("accuracy"))
        throw std::invalid_argument("nothing to evaluate: give --a/--b, or --manifest with --images and/or --classifier");
    write_text(dir / "metrics.csv", metrics);
    summary["metric_rows"] = metric_rows;
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_resolved(dir, cfg);
    std::cout << summary.dump() << "\n";
    return kOk;
}

int cmd_augment(json cfg) {
    const auto m = data::load_manifest(require_string(cfg, "/manifest", "--manifest"));
    auto ac = eval::augment_config_from_json(cfg["augment"]);
    ac.seed = cfg["seed"].get<std::uint64_t>();
    ac.classifier = eval::classifier_config_from_json(cfg["classifier"]);
    ac.classifier.resolution = m.resolution;
    ac.train = eval::classifier_train_config_from_json(cfg["classifier_train"]);
    ac.train.seed = ac.seed;
    const auto& a = cfg["augment"];
    const auto dir = out_dir(cfg);
    std::optional<diffusion::LoadedDiffusion> loaded;
    diffusion::BatchGenerator generator;
    if (a.value("generator", std::string()) == "copy-style") {
        generator = diffusion::copy_style_generator();
    } else {
        loaded = diffusion::load_diffusion(require_string(cfg, "/augment/checkpoint", "--checkpoint"));
        generator = diffusion::make_generator(loaded->model, loaded->schedule, a.at("sampling_steps").get<int>(), true);
    }
    DirectoryLock lock(dir);
    write_resolved(dir, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = eval::augmentation_experiment(m, generator, ac);
    std::ostringstream csv;
    eval::write_augment_csv(csv, result);
    write_text(dir / "results.csv", csv.str());
    const json summary = {{"rare_classes", result.rare_classes}, {"rare_items", result.rare_items}, {"seconds", seconds_since(t0)}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    std::cout << csv.str();
    return kOk;
}

int cmd_features(const json& cfg) {
    const auto dir = out_dir(cfg);
    std::vector<std::pair<std::string, std::vector<fs::path>>> sets;
    const auto& f = cfg["features"];
    if (f.contains("images"))
        for (const auto& d : f["images"]) sets.emplace_back(fs::path(d.get<std::string>()).filename().string(), png_files(d.get<std::string>()));
    if (cfg.contains("manifest")) {
        const auto m = data::load_manifest(cfg["manifest"].get<std::string>());
        std::vector<fs::path> paths;
        for (const auto& p : m.split(f.value("split", std::string("val")))) paths.push_back(m.resolve(p.style_path));
        sets.emplace_back("styles", paths);
    }
    if (sets.empty()) throw std::invalid_argument("features needs --images DIR or --manifest");
    std::string csv = "image,brightness,contrast,sharpness,si\n";
    std::map<std::string, std::vector<double>> series;
    for (const auto& [name, paths] : sets)
        for (const auto& p : paths) {
            const auto s = eval::feature_stats(data::load_png(p));
            csv += p.string() + ',' + csv_number(s.brightness) + ',' + csv_number(s.contrast) + ',' +
                   csv_number(s.sharpness) + ',' + csv_number(s.si) + '\n';
            series[name + "/brightness"].push_back(s.brightness);
            series[name + "/contrast"].push_back(s.contrast);
            series[name + "/sharpness"].push_back(s.sharpness);
            series[name + "/si"].push_back(s.si);
        }
    write_text(dir / "features.csv", csv);
    std::ostringstream kde;
    eval::write_kde_csv(kde, series, f.at("kde_points").get<std::size_t>());
    write_text(dir / "kde.csv", kde.str());
    write_resolved(dir, cfg);
    return kOk;
}

// ---------------------------------------------------------------- study

int cmd_study_bundle(const json& cfg) {
    const auto m = data::load_manifest(require_string(cfg, "/manifest", "--manifest"));
    const auto& s = cfg["study"];
    study::BundleConfig bc;
    bc.n_real = s.at("n_real").get<std::size_t>();
    bc.n_generated = s.at("n_generated").get<std::size_t>();
    bc.split = s.at("split").get<std::string>();
    bc.seed = cfg["seed"].get<std::uint64_t>();
    std::optional<diffusion::LoadedDiffusion> loaded;
    diffusion::BatchGenerator generator;
    if (bc.n_generated) {
        loaded = diffusion::load_diffusion(require_string(cfg, "/study/checkpoint", "--checkpoint"));
        generator = diffusion::make_generator(loaded->model, loaded->schedule, s.at("sampling_steps").get<int>(), true);
    }
    const auto dir = out_dir(cfg);
    DirectoryLock lock(dir);
    const auto items = study::build_bundle(m, generator, bc, dir);
    write_resolved(dir, cfg);
    std::cout << "bundle with " << items.size() << " items at " << dir.string() << "\n";
    return kOk;
}

study::StudyServer* g_server = nullptr;

int cmd_study_serve(const json& cfg) {
    const auto& s = cfg["serve"];
    study::ServerConfig sc;
    sc.bundle_dir = require_string(cfg, "/serve/bundle", "--bundle");
    if (s.contains("log_dir")) sc.log_dir = s["log_dir"].get<std::string>();
    if (s.contains("static")) sc.static_dir = s["static"].get<std::string>();
    study::StudyServer server(sc);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    const auto host = s.at("host").get<std::string>();
    const int port = s.at("port").get<int>();
    std::cerr << "serving " << sc.bundle_dir.string() << " on http://" << host << ":" << port << "\n";
    const bool ok = server.listen(host, port);
    g_server = nullptr;
    if (!ok) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
    return kOk;
}

int cmd_study_score(const json& cfg) {
    const auto& s = cfg["study"];
    const fs::path bundle = require_string(cfg, "/study/bundle", "--bundle");
    if (!s.contains("logs") || s["logs"].empty()) throw std::invalid_argument("--log is required");
    const auto items = study::load_bundle_items(bundle);
    std::vector<eval::StudyMetrics> all;
    std::string reports;
    for (const auto& log : s["logs"]) {
        const auto report = eval::score_study(eval::read_session_log(log.get<std::string>(), items));
        all.push_back(report.metrics);
        reports += eval::report_to_json(report) + "\n";
    }
    std::cout << reports;
    if (all.size() > 1) {
        const auto mean = eval::aggregate_metrics(all);
        std::cout << json({{"sessions", all.size()}, {"precision", mean.precision}, {"recall", mean.recall}, {"f1", mean.f1}}).dump()
                  << "\n";
    }
    if (cfg.contains("out")) {
        const fs::path dir = cfg["out"].get<std::string>();
        write_text(dir / "reports.jsonl", reports);
        write_resolved(dir, cfg);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"obidiff: glyph- and style-conditioned diffusion toolkit"};
    app.require_subcommand(1);
    Invocation inv;
    std::function<int(json)> action;

    auto sub = [&](const char* name, const char* help, std::function<int(json)> fn) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, inv);
        cmd->callback([&action, fn] { action = fn; });
        return cmd;
    };

    auto* synth = sub("synth", "Synthesize a glyph/style dataset", cmd_synth);
    bind<int>(synth, inv, "--classes", "/synth/classes", "Number of classes");
    bind<int>(synth, inv, "--per-class", "/synth/per_class", "Pairs per class");
    bind<std::size_t>(synth, inv, "--resolution", "/synth/resolution", "Image side in pixels");

    auto* validate = sub("validate", "Run the IoU quality gate and write qc.csv", cmd_validate);
    bind<std::string>(validate, inv, "--manifest", "/manifest", "Dataset manifest");

    auto* split = sub("split", "Assign train/val(/test) splits in place", cmd_split);
    bind<std::string>(split, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<double>(split, inv, "--ratio", "/split/ratio", "Train fraction per class");
    bind<std::vector<int>>(split, inv, "--test-classes", "/split/test_classes", "Classes held out for zero-shot");

    auto* train = sub("train-diffusion", "Train the conditioned diffusion model", cmd_train_diffusion);
    bind<std::string>(train, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<int>(train, inv, "--steps", "/train/steps", "Optimizer steps");
    bind<std::size_t>(train, inv, "--batch", "/train/batch", "Batch size");
    bind<double>(train, inv, "--lr", "/train/lr", "Peak learning rate");
    bind_flag(train, inv, "--no-masking", "/train/masking", false, "Train without style masking");
    bind_flag(train, inv, "--freeze-glyph-encoder", "/train/freeze_glyph_encoder", true, "Keep the glyph encoder at init");

    auto* gen = sub("generate", "Sample images from a trained model", cmd_generate);
    bind<std::string>(gen, inv, "--checkpoint", "/generate/checkpoint", "Diffusion checkpoint directory");
    bind<std::string>(gen, inv, "--mode", "/generate/mode", "personalized|few-shot|zero-shot");
    bind<std::string>(gen, inv, "--manifest", "/manifest", "Dataset manifest (few-shot/zero-shot)");
    bind<std::string>(gen, inv, "--split", "/generate/split", "Split for few-shot mode");
    bind<std::string>(gen, inv, "--glyph", "/generate/glyph", "Glyph PNG (personalized)");
    bind<std::string>(gen, inv, "--style", "/generate/style", "Style PNG (personalized)");
    bind<std::string>(gen, inv, "--requests", "/generate/requests", "JSONL generation requests (personalized)");
    bind<int>(gen, inv, "--sampling-steps", "/generate/sampling_steps", "Reverse steps");
    bind<std::size_t>(gen, inv, "--limit", "/generate/limit", "Cap on generated items");
    bind_flag(gen, inv, "--single-mask", "/generate/dual_mask", false, "Mask only the target glyph box");

    auto* tden = sub("train-denoiser", "Train the denoising baseline", cmd_train_denoiser);
    bind<std::string>(tden, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<int>(tden, inv, "--epochs", "/denoiser_train/epochs", "Epochs");

    auto* tclf = sub("train-classifier", "Train the recognition classifier", cmd_train_classifier);
    bind<std::string>(tclf, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<int>(tclf, inv, "--epochs", "/classifier_train/epochs", "Epochs");
    bind<std::string>(tclf, inv, "--input", "/classifier_input", "Training images: style or glyph");

    auto* ev = sub("eval", "Pair metrics, Acc@k and FID proxy", cmd_eval);
    bind<std::string>(ev, inv, "--a", "/eval/a", "First image directory");
    bind<std::string>(ev, inv, "--b", "/eval/b", "Second image directory");
    bind<std::string>(ev, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<std::string>(ev, inv, "--split", "/eval/split", "Evaluation split");
    bind<std::string>(ev, inv, "--images", "/eval/images", "Generated images named <pair_id>.png");
    bind<std::string>(ev, inv, "--classifier", "/eval/classifier", "Classifier checkpoint");
    bind<std::string>(ev, inv, "--denoiser", "/eval/denoiser", "Denoiser checkpoint");

    auto* aug = sub("augment-experiment", "Rare-class augmentation at several scales", cmd_augment);
    bind<std::string>(aug, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<std::string>(aug, inv, "--checkpoint", "/augment/checkpoint", "Diffusion checkpoint");
    bind<std::string>(aug, inv, "--generator", "/augment/generator", "Set to copy-style for the control stub");
    bind<std::vector<int>>(aug, inv, "--scales", "/augment/scales", "Pseudo images per rare item");

    auto* feat = sub("features", "Low-level feature table and KDE", cmd_features);
    bind<std::vector<std::string>>(feat, inv, "--images", "/features/images", "Image directories");
    bind<std::string>(feat, inv, "--manifest", "/manifest", "Dataset manifest (style images)");

    auto* sb = sub("study-bundle", "Build a real-vs-generated study bundle", cmd_study_bundle);
    bind<std::string>(sb, inv, "--manifest", "/manifest", "Dataset manifest");
    bind<std::string>(sb, inv, "--checkpoint", "/study/checkpoint", "Diffusion checkpoint");
    bind<std::size_t>(sb, inv, "--n-real", "/study/n_real", "Real items");
    bind<std::size_t>(sb, inv, "--n-generated", "/study/n_generated", "Generated items");

    auto* ss = sub("study-serve", "Serve a study bundle over HTTP", cmd_study_serve);
    bind<std::string>(ss, inv, "--bundle", "/serve/bundle", "Bundle directory");
    bind<std::string>(ss, inv, "--host", "/serve/host", "Bind address");
    bind<int>(ss, inv, "--port", "/serve/port", "Port");
    bind<std::string>(ss, inv, "--static", "/serve/static", "Static UI directory");
    bind<std::string>(ss, inv, "--log-dir", "/serve/log_dir", "Session log directory");

    auto* sc = sub("study-score", "Score session logs offline", cmd_study_score);
    bind<std::string>(sc, inv, "--bundle", "/study/bundle", "Bundle directory");
    bind<std::vector<std::string>>(sc, inv, "--log", "/study/logs", "Session log(s)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    try {
        return action(inv.resolve());
    } catch (const LockError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kLocked;
    } catch (const SchemaError& e) {
        std::cerr << "schema error at '" << e.pointer() << "': " << e.what() << "\n";
        return kUsage;
    } catch (const ModelStateError& e) {
        std::cerr << "model state error: " << e.what() << "\n";
        return kModelState;
    } catch (const IncompleteSessionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIncomplete;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return kUsage;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
}
