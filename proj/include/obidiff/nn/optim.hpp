// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "obidiff/nn/layers.hpp"

namespace obidiff::nn {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Parameters that do not require a gradient
/// (frozen submodules) are skipped.
template <typename T>
class AdamW {
public:
    AdamW(ParamList<T> params, AdamWConfig config);

    void zero_grad();
    void step();
    std::int64_t steps() const { return step_; }
    const AdamWConfig& config() const { return config_; }
    void set_lr(double lr) { config_.lr = lr; }

    /// Moment buffers, parameter-aligned; used by checkpoints.
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    void set_steps(std::int64_t s) { step_ = s; }

private:
    ParamList<T> params_;
    AdamWConfig config_;
    std::vector<std::vector<T>> m_, v_;
    std::int64_t step_ = 0;
};

/// Exponential moving average of parameter values.
template <typename T>
class Ema {
public:
    Ema(const ParamList<T>& params, double decay);
    void update(const ParamList<T>& params);
    /// Swaps EMA values into the live parameters (call twice to restore).
    void swap_into(ParamList<T>& params);
    double decay() const { return decay_; }

private:
    std::vector<std::vector<T>> shadow_;
    double decay_;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before rescaling.
template <typename T>
double clip_grad_norm(const ParamList<T>& params, double max_norm);

/// Parameter blob: "OBDP" magic, version, then per tensor name + shape + float32 data.
void save_params(const std::filesystem::path& path, const ParamList<float>& params);
/// Loads by name; every parameter in `params` must be present with the same shape.
void load_params(const std::filesystem::path& path, ParamList<float>& params);

void save_moments(const std::filesystem::path& path, AdamW<float>& opt);
void load_moments(const std::filesystem::path& path, AdamW<float>& opt);

}  // namespace obidiff::nn
