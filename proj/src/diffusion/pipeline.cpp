// SPDX-License-Identifier: Apache-2.0
#include "obidiff/diffusion/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>

#include "obidiff/common/errors.hpp"

namespace obidiff::diffusion {

using nlohmann::json;

json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch", c.batch},
            {"lr", c.optim.lr},
            {"beta1", c.optim.beta1},
            {"beta2", c.optim.beta2},
            {"weight_decay", c.optim.weight_decay},
            {"warmup_steps", c.warmup_steps},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed},
            {"masking", c.masking},
            {"freeze_glyph_encoder", c.freeze_glyph_encoder},
            {"ema_decay", c.ema_decay},
            {"checkpoint_every", c.checkpoint_every},
            {"split", c.split}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    const auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const json::exception& e) {
            throw SchemaError(std::string("/") + key, e.what());
        }
    };
    get("steps", c.steps);
    get("batch", c.batch);
    get("lr", c.optim.lr);
    get("beta1", c.optim.beta1);
    get("beta2", c.optim.beta2);
    get("weight_decay", c.optim.weight_decay);
    get("warmup_steps", c.warmup_steps);
    get("grad_clip", c.grad_clip);
    get("seed", c.seed);
    get("masking", c.masking);
    get("freeze_glyph_encoder", c.freeze_glyph_encoder);
    get("ema_decay", c.ema_decay);
    get("checkpoint_every", c.checkpoint_every);
    get("split", c.split);
    return c;
}

std::vector<Example> load_examples(const data::DatasetManifest& m, const std::string& split, bool masking) {
    std::vector<Example> out;
    for (const auto& rec : m.split(split)) {
        auto images = data::load_pair(m, rec);
        Example e;
        e.style_input = masking ? data::mask_style(images.style, images.glyph, false, m.mask_threshold) : images.style;
        e.x0 = std::move(images.style);
        e.glyph = std::move(images.glyph);
        e.class_id = rec.class_id;
        e.noise_type = rec.noise_type;
        e.pair_id = rec.pair_id;
        out.push_back(std::move(e));
    }
    return out;
}

namespace {

struct Batch {
    std::vector<data::GrayImage> x0, glyph, style;
};

Batch gather(const std::vector<Example>& examples, const std::vector<std::size_t>& idx) {
    Batch b;
    for (std::size_t i : idx) {
        b.x0.push_back(examples[i].x0);
        b.glyph.push_back(examples[i].glyph);
        b.style.push_back(examples[i].style_input);
    }
    return b;
}

Var<float> gaussian(nn::Shape shape, std::mt19937_64& rng) {
    std::normal_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> v(nn::numel(shape));
    for (auto& x : v) x = dist(rng);
    return Var<float>::constant(std::move(shape), std::move(v));
}

}  // namespace

TrainResult train(const std::vector<Example>& examples, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const NoiseSchedule& sched, const StepCallback& on_step) {
    if (examples.empty()) throw std::invalid_argument("train: empty training split");
    if (cfg.batch == 0 || cfg.steps < 0) throw std::invalid_argument("train: invalid batch or step count");
    for (const auto& e : examples)
        if (e.x0.width != model_cfg.resolution || e.x0.height != model_cfg.resolution)
            throw std::invalid_argument("train: example " + e.pair_id + " does not match model resolution");

    TrainResult result{ConditionedDenoiser<float>(model_cfg, cfg.seed ^ 0x5EEDF00DULL), {}, 0.0};
    auto& model = result.model;
    if (cfg.freeze_glyph_encoder) model.set_glyph_encoder_trainable(false);
    const auto params = model.parameters();
    nn::AdamW<float> opt(params, cfg.optim);
    std::optional<nn::Ema<float>> ema;
    if (cfg.ema_decay > 0.0) ema.emplace(params, cfg.ema_decay);

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;
    std::uniform_int_distribution<int> pick_t(1, sched.T);
    const std::size_t res = model_cfg.resolution;

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> idx;
        while (idx.size() < cfg.batch) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        const Batch b = gather(examples, idx);
        std::vector<int> t(idx.size());
        for (auto& v : t) v = pick_t(rng);
        const auto eps = gaussian({idx.size(), 1, res, res}, rng);

        opt.zero_grad();
        const auto loss = training_loss(model, to_model_space<float>(b.x0), to_model_space<float>(b.glyph),
                                        to_model_space<float>(b.style), t, eps, sched);
        nn::backward(loss);
        if (cfg.grad_clip > 0.0) nn::clip_grad_norm(params, cfg.grad_clip);
        const double warm = cfg.warmup_steps > 0 ? std::min(1.0, double(step + 1) / cfg.warmup_steps) : 1.0;
        opt.set_lr(cfg.optim.lr * warm);
        opt.step();
        if (ema) ema->update(params);
        ++model.trained_steps;

        const double l = double(loss.item());
        if (!std::isfinite(l)) throw ModelStateError("training diverged at step " + std::to_string(step));
        result.losses.push_back(l);
        result.loss_ema = step == 0 ? l : 0.98 * result.loss_ema + 0.02 * l;
        if (on_step) on_step(step, l);
        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (step + 1) % cfg.checkpoint_every == 0)
            save_diffusion(cfg.checkpoint_dir, model, sched, cfg.seed, result.loss_ema, to_json(cfg));
    }
    if (ema) {
        auto live = model.parameters();
        ema->swap_into(live);
    }
    return result;
}

TrainResult train(const data::DatasetManifest& m, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const NoiseSchedule& sched, const StepCallback& on_step) {
    return train(load_examples(m, cfg.split, cfg.masking), model_cfg, cfg, sched, on_step);
}

double validation_eps_mse(const ConditionedDenoiser<float>& model, const std::vector<Example>& examples,
                          const NoiseSchedule& sched, std::uint64_t seed, int draws) {
    if (examples.empty()) throw std::invalid_argument("validation_eps_mse: no examples");
    nn::NoGradGuard no_grad;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick_t(1, sched.T);
    const std::size_t res = model.config().resolution;
    double total = 0.0;
    std::size_t count = 0;
    constexpr std::size_t kChunk = 16;
    for (std::size_t start = 0; start < examples.size(); start += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(examples.size(), start + kChunk); ++i) idx.push_back(i);
        const Batch b = gather(examples, idx);
        const auto x0 = to_model_space<float>(b.x0);
        const auto tau_g = model.glyph_encode(to_model_space<float>(b.glyph));
        const auto tau_s = model.style_encode(to_model_space<float>(b.style));
        for (int d = 0; d < draws; ++d) {
            std::vector<int> t(idx.size());
            for (auto& v : t) v = pick_t(rng);
            const auto eps = gaussian({idx.size(), 1, res, res}, rng);
            const auto pred = model.predict_noise(q_sample(x0, t, eps, sched), t, tau_g, tau_s);
            total += double(nn::mse_loss(pred, eps).item()) * double(idx.size());
            count += idx.size();
        }
    }
    return total / double(count);
}

std::vector<int> respaced_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("sampling steps must lie in [1, T]");
    std::vector<int> ts;
    if (steps == 1) return {T};
    for (int k = steps - 1; k >= 0; --k)
        ts.push_back(1 + int(std::lround(double(k) * double(T - 1) / double(steps - 1))));
    return ts;
}

std::vector<data::GrayImage> sample_batch(const ConditionedDenoiser<float>& model,
                                          const std::vector<data::GrayImage>& glyphs,
                                          const std::vector<data::GrayImage>& styles_masked,
                                          const NoiseSchedule& sched, int steps,
                                          const std::vector<std::uint64_t>& seeds) {
    if (glyphs.size() != styles_masked.size() || glyphs.size() != seeds.size())
        throw std::invalid_argument("sample_batch: glyphs, styles and seeds must have equal length");
    require_usable(model);
    const auto ts = respaced_timesteps(sched.T, steps);
    const std::size_t res = model.config().resolution;
    const std::size_t per = res * res;
    nn::NoGradGuard no_grad;
    std::vector<data::GrayImage> out;
    constexpr std::size_t kChunk = 16;
    for (std::size_t start = 0; start < glyphs.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, glyphs.size() - start);
        const std::vector<data::GrayImage> g(glyphs.begin() + std::ptrdiff_t(start),
                                             glyphs.begin() + std::ptrdiff_t(start + n));
        const std::vector<data::GrayImage> s(styles_masked.begin() + std::ptrdiff_t(start),
                                             styles_masked.begin() + std::ptrdiff_t(start + n));
        const auto tau_g = model.glyph_encode(to_model_space<float>(g));
        const auto tau_s = model.style_encode(to_model_space<float>(s));
        std::vector<std::mt19937_64> rngs;
        for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(seeds[start + i]);
        std::normal_distribution<float> normal(0.0f, 1.0f);
        std::vector<float> x(n * per);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < per; ++j) x[i * per + j] = normal(rngs[i]);

        for (std::size_t k = 0; k < ts.size(); ++k) {
            const int t = ts[k];
            const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
            const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
            const double beta = 1.0 - ab / ab_prev;
            const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
            const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
            const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
            const auto eps = model.predict_noise(Var<float>::constant({n, 1, res, res}, x), std::vector<int>(n, t),
                                                 tau_g, tau_s);
            const auto e = eps.data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < per; ++j) {
                    const std::size_t q = i * per + j;
                    const double x0 =
                        std::clamp((double(x[q]) - std::sqrt(1.0 - ab) * double(e[q])) / std::sqrt(ab), -1.0, 1.0);
                    double next = c0 * x0 + ct * double(x[q]);
                    if (t_prev > 0) next += sigma * double(normal(rngs[i]));
                    x[q] = float(next);
                }
        }
        for (std::size_t i = 0; i < n; ++i)
            out.push_back(from_model_space(std::span<const float>(x.data() + i * per, per), res, res));
    }
    return out;
}

data::GrayImage sample(const ConditionedDenoiser<float>& model, const data::GrayImage& glyph,
                       const data::GrayImage& style_masked, const NoiseSchedule& sched, int steps,
                       std::uint64_t seed) {
    return sample_batch(model, {glyph}, {style_masked}, sched, steps, {seed}).front();
}

data::GrayImage generate_personalized(const ConditionedDenoiser<float>& model, const data::GrayImage& glyph,
                                      const data::GrayImage& style_raw, bool dual, const NoiseSchedule& sched,
                                      int steps, std::uint64_t seed) {
    return sample(model, glyph, data::mask_style(style_raw, glyph, dual), sched, steps, seed);
}

BatchGenerator make_generator(const ConditionedDenoiser<float>& model, const NoiseSchedule& sched, int steps,
                              bool dual_mask) {
    require_usable(model);
    return [&model, sched, steps, dual_mask](const std::vector<data::GrayImage>& glyphs,
                                             const std::vector<data::GrayImage>& styles,
                                             const std::vector<std::uint64_t>& seeds) {
        if (glyphs.size() != styles.size()) throw std::invalid_argument("generator: glyph/style count mismatch");
        std::vector<data::GrayImage> masked;
        masked.reserve(styles.size());
        for (std::size_t i = 0; i < styles.size(); ++i) masked.push_back(data::mask_style(styles[i], glyphs[i], dual_mask));
        return sample_batch(model, glyphs, masked, sched, steps, seeds);
    };
}

BatchGenerator copy_style_generator() {
    return [](const std::vector<data::GrayImage>& glyphs, const std::vector<data::GrayImage>& styles,
              const std::vector<std::uint64_t>& seeds) {
        if (glyphs.size() != styles.size() || seeds.size() != styles.size())
            throw std::invalid_argument("generator: input count mismatch");
        return styles;
    };
}

std::vector<GenerationRequest> parse_generation_requests(std::istream& in) {
    std::vector<GenerationRequest> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string ptr = "/" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw SchemaError(ptr, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw SchemaError(ptr, "expected object");
        GenerationRequest r;
        const auto str = [&](const char* key, std::string& field) {
            if (!j.contains(key) || !j[key].is_string()) throw SchemaError(ptr + "/" + key, "expected string");
            field = j[key].get<std::string>();
        };
        str("glyph_path", r.glyph_path);
        str("style_path", r.style_path);
        str("out_path", r.out_path);
        if (j.contains("seed")) {
            if (!j["seed"].is_number_unsigned()) throw SchemaError(ptr + "/seed", "expected non-negative integer");
            r.seed = j["seed"].get<std::uint64_t>();
        }
        if (j.contains("dual_mask")) {
            if (!j["dual_mask"].is_boolean()) throw SchemaError(ptr + "/dual_mask", "expected boolean");
            r.dual_mask = j["dual_mask"].get<bool>();
        }
        out.push_back(std::move(r));
    }
    return out;
}

void save_diffusion(const std::filesystem::path& dir, const ConditionedDenoiser<float>& model,
                    const NoiseSchedule& sched, std::uint64_t seed, double loss_ema, const json& train_config) {
    CheckpointMeta meta;
    meta.kind = "diffusion";
    meta.step = model.trained_steps;
    meta.seed = seed;
    meta.loss_ema = loss_ema;
    meta.config = {{"model", to_json(model.config())}};
    if (!train_config.is_null()) meta.config["train"] = train_config;
    meta.schedule = {{"T", sched.T}, {"beta_start", sched.beta_start}, {"beta_end", sched.beta_end}};
    save_checkpoint(dir, model.parameters(), meta);
}

LoadedDiffusion load_diffusion(const std::filesystem::path& dir) {
    auto meta = read_checkpoint_meta(dir, "diffusion");
    if (!meta.config.contains("model") || meta.schedule.is_null())
        throw ModelStateError("diffusion checkpoint sidecar lacks model config or schedule");
    const auto cfg = model_config_from_json(meta.config["model"]);
    ConditionedDenoiser<float> model(cfg, 0);
    auto params = model.parameters();
    load_checkpoint_params(dir, params);
    model.trained_steps = meta.step;
    const auto& s = meta.schedule;
    auto sched = make_schedule(s.at("T").get<int>(), s.at("beta_start").get<double>(), s.at("beta_end").get<double>());
    return {std::move(model), std::move(sched), std::move(meta)};
}

}  // namespace obidiff::diffusion
