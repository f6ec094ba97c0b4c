// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "obidiff/common/errors.hpp"
#include "obidiff/data/synth.hpp"
#include "obidiff/denoiser/denoiser.hpp"
#include "obidiff/nn/ops.hpp"
#include "support.hpp"

using namespace obidiff;
using namespace obidiff::denoiser;

namespace {

DenoiserConfig small() {
    DenoiserConfig c;
    c.resolution = 32;
    c.widths = {8, 16};
    return c;
}

std::vector<ImagePair> pairs(std::size_t n, std::uint64_t seed) {
    std::vector<ImagePair> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto g = data::synth_glyph(int(i % 3), seed + i, 32);
        out.push_back({data::synth_noise(g, data::NoiseType(i % 4), seed + 100 + i), g});
    }
    return out;
}

}  // namespace

TEST_CASE("denoiser output contract") {
    DenoiserConfig c;
    c.resolution = 8;
    c.widths = {4, 8};
    DenoiserNet<double> net(c, 1);
    std::mt19937_64 rng(1);
    const auto x = nn::Var<double>::constant({3, 1, 8, 8}, testing::random_values<double>(192, rng, 0.0, 1.0));
    const auto y = net.forward(x);
    CHECK(y.shape() == x.shape());
    for (double v : y.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    CHECK_THROWS_AS(net.forward(nn::Var<double>::zeros({1, 1, 16, 16})), std::invalid_argument);

    std::vector<nn::Var<double>> vars;
    for (const auto& p : net.parameters()) vars.push_back(p.var);
    const auto target = nn::Var<double>::constant({3, 1, 8, 8}, testing::random_values<double>(192, rng, 0.0, 1.0));
    // Smooth loss so central differences are well defined.
    CHECK(testing::gradcheck([&] { return nn::mse_loss(net.forward(x), target); }, vars, 1e-6, 10) <= 1e-3);
}

TEST_CASE("denoiser training is deterministic and reduces L1") {
    const auto data = pairs(8, 3);
    DenoiserTrainConfig tc;
    tc.epochs = 80;
    tc.batch = 4;
    tc.seed = 9;
    const auto a = train_denoiser(data, small(), tc);
    const auto b = train_denoiser(data, small(), tc);
    CHECK(a.epoch_losses == b.epoch_losses);
    CHECK(a.epoch_losses.size() == 80);
    CHECK(a.epoch_losses.back() < 0.5 * a.epoch_losses.front());

    double identity_l1 = 0.0;
    for (const auto& p : data)
        for (std::size_t i = 0; i < p.input.size(); ++i)
            identity_l1 += std::abs(double(p.input.pixels[i]) - double(p.target.pixels[i])) / double(p.input.size());
    identity_l1 /= double(data.size());
    CHECK(evaluate_l1(a.model, data) < identity_l1);

    const auto out = denoise(a.model, data[0].input);
    CHECK(out.same_dims(data[0].input));
    CHECK(denoise_batch(a.model, {data[1].input, data[0].input})[1] == out);

    testing::TempDir dir("denoiser");
    save_denoiser(dir.path(), a.model, 9, a.epoch_losses.back());
    const auto loaded = load_denoiser(dir.path());
    CHECK(denoise(loaded, data[0].input) == out);
    CHECK_THROWS_AS(load_denoiser(dir / "nope"), ModelStateError);
}

TEST_CASE("untrained denoiser is rejected") {
    DenoiserNet<float> net(small(), 0);
    CHECK_THROWS_AS(denoise(net, pairs(1, 1)[0].input), ModelStateError);
    CHECK_THROWS_AS(train_denoiser(std::vector<ImagePair>{}, small(), {}), std::invalid_argument);
}
