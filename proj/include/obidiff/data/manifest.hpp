// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "obidiff/data/image.hpp"
#include "obidiff/data/synth.hpp"

namespace obidiff::data {

struct PairRecord {
    std::string pair_id;
    int class_id = 0;
    std::string glyph_path;  // relative to the manifest directory
    std::string style_path;
    NoiseType noise_type = NoiseType::StrokeBroken;
    std::optional<double> iou;  // unset until the quality gate has run

    bool operator==(const PairRecord&) const = default;
};

struct ManifestStats {
    std::map<int, std::size_t> per_class;
    std::size_t scored = 0;
    std::optional<double> mean_iou;  // over scored pairs
};

struct DatasetManifest {
    int version = 1;
    std::size_t resolution = 128;
    std::uint64_t seed = 0;
    double mask_threshold = kDefaultMaskThreshold;
    double iou_gate = kDefaultIouGate;
    // Glyph files on disk may be black-on-white handprints; they are inverted on load.
    bool glyph_black_on_white = false;
    std::vector<PairRecord> pairs;
    std::map<std::string, std::vector<std::string>> splits;
    std::filesystem::path root;  // directory holding the manifest; not serialized

    std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
    const PairRecord& find(const std::string& pair_id) const;
    /// Records of a split in split order; empty vector for an unknown split.
    std::vector<PairRecord> split(const std::string& name) const;
    bool rejected(const PairRecord& p) const { return p.iou && *p.iou < iou_gate; }
};

nlohmann::json to_json(const DatasetManifest& m);
/// Throws SchemaError carrying the JSON pointer of the first offending value.
DatasetManifest manifest_from_json(const nlohmann::json& doc, const std::filesystem::path& root);
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Atomic: readers observe either the previous or the complete new file.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

ManifestStats compute_stats(const DatasetManifest& m);

struct LoadedPair {
    GrayImage glyph;  // white strokes on black
    GrayImage style;
};
LoadedPair load_pair(const DatasetManifest& m, const PairRecord& p);

struct GateResult {
    bool accepted = false;
    double iou = 0.0;
};

GateResult quality_gate(const GrayImage& glyph, const GrayImage& style, double threshold = kDefaultIouGate,
                        double mask_threshold = kDefaultMaskThreshold);
/// Loads the pair's images, scores it and records the IoU on `pair`.
GateResult quality_gate(PairRecord& pair, const DatasetManifest& m);

struct QcSummary {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    double mean_iou_accepted = 0.0;
};

/// Gates every pair, records IoUs in `m`, and writes CSV rows
/// pair_id,class_id,iou,decision (with header) to `csv`.
QcSummary run_quality_gate(DatasetManifest& m, std::ostream& csv);

/// Stratified per class over pairs not rejected by the gate: floor(n * train_ratio)
/// to "train", the remainder to "val". Pairs of `test_classes` go to "test".
DatasetManifest split_dataset(const DatasetManifest& m, double train_ratio, std::uint64_t seed,
                              const std::vector<int>& test_classes = {});

inline constexpr std::size_t kMinPairsPerClass = 5;

struct SynthConfig {
    int classes = 8;
    int per_class = 60;
    int first_class = 0;
    std::size_t resolution = 64;
    std::uint64_t seed = 0;
};

std::string synth_pair_id(int class_id, int index);
/// Writes glyphs/ and styles/ PNGs plus manifest.json under `out_dir`.
DatasetManifest build_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace obidiff::data
