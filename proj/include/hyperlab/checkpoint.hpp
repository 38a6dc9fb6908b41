#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hyperlab/ad.hpp"

namespace hyperlab::ckpt {

using json = nlohmann::json;

// Checkpoint file layout: [u64 LE manifest length][UTF-8 JSON manifest]
// [float32 LE blob]. The manifest carries tensor names/shapes/offsets plus
// stage tag, config, seed and parent hash, so any stage can be audited and
// lineage-checked without reading the blob.

// `extra` supplies stage/config/seed/flags/metrics fields; tensor entries and
// format_version are filled in here. Values are persisted as float32.
void save(const std::string& path, json extra, const std::vector<const ad::Param*>& tensors);

struct Loaded {
    json manifest;
    std::vector<std::pair<std::string, ad::Mat>> tensors;

    const ad::Mat& tensor(const std::string& name) const;
    std::string stage() const { return manifest.value("stage", ""); }
};

Loaded load(const std::string& path);
json read_manifest(const std::string& path);

// Copies loaded tensors into same-named params (shapes must match).
void load_into(const Loaded& src, ad::ParamStore& dst);

// FNV-1a over the whole file; the identity used for lineage links.
std::string file_hash_hex(const std::string& path);

// Stage graph: target and teacher are roots; draft <- target;
// cfg <- teacher; tscd <- cfg; dmdo <- tscd; adp <- dmdo; refl <- adp.
std::string required_parent_stage(const std::string& stage);

// Throws LineageError unless `parent_path` has the stage required by `stage`.
// Returns the parent's file hash for embedding into the child manifest.
std::string check_parent(const std::string& stage, const std::string& parent_path);

}  // namespace hyperlab::ckpt
