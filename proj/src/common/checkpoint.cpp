// SPDX-License-Identifier: Apache-2.0
#include "obidiff/common/checkpoint.hpp"

#include <fstream>

#include "obidiff/common/errors.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/nn/optim.hpp"

namespace obidiff {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& dir, const nn::ParamList<float>& params, const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    auto tmp = dir / (std::string(kParamsFile) + ".tmp");
    nn::save_params(tmp, params);
    std::filesystem::rename(tmp, dir / kParamsFile);
    json doc = {{"kind", meta.kind},
                {"step", meta.step},
                {"seed", meta.seed},
                {"loss_ema", meta.loss_ema},
                {"config", meta.config}};
    if (!meta.schedule.is_null()) doc["schedule"] = meta.schedule;
    data::write_file_atomic(dir / kSidecarFile, doc.dump(2) + "\n");
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir, const std::string& expected_kind) {
    std::ifstream in(dir / kSidecarFile);
    if (!in) throw ModelStateError("no checkpoint at " + dir.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ModelStateError("unreadable checkpoint sidecar in " + dir.string() + ": " + e.what());
    }
    CheckpointMeta m;
    try {
        m.kind = doc.at("kind").get<std::string>();
        m.step = doc.at("step").get<std::int64_t>();
        m.seed = doc.at("seed").get<std::uint64_t>();
        m.loss_ema = doc.at("loss_ema").get<double>();
        m.config = doc.at("config");
        if (doc.contains("schedule")) m.schedule = doc["schedule"];
    } catch (const json::exception& e) {
        throw ModelStateError("malformed checkpoint sidecar in " + dir.string() + ": " + e.what());
    }
    if (m.kind != expected_kind)
        throw ModelStateError("checkpoint in " + dir.string() + " is a " + m.kind + ", expected " + expected_kind);
    return m;
}

void load_checkpoint_params(const std::filesystem::path& dir, nn::ParamList<float>& params) {
    if (!std::filesystem::exists(dir / kParamsFile)) throw ModelStateError("missing parameter blob in " + dir.string());
    nn::load_params(dir / kParamsFile, params);
}

}  // namespace obidiff
