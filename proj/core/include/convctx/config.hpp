#pragma once

#include <cstdint>
#include <string>

#include "convctx/audio.hpp"
#include "convctx/model.hpp"

namespace convctx {

struct TrainConfig {
    int epochs = 80;
    int batch_size = 8;
    bool shuffle = true;
    double rho = 0.95;
    double eps = 1e-6;
    double lr = 1.0;    // fixed for the whole run; there is no schedule
    double clip = 10.0;
    std::string checkpoint_dir = "checkpoints";
    int checkpoint_retention = 30;  // 0 keeps everything
    std::string metrics_log;        // empty: <checkpoint_dir>/metrics.log

    bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
    std::string kind = "synthetic";  // synthetic | features | pcm
    std::string path;                // container file (features) or manifest (pcm)
    std::string vocab;               // vocab file; unused for synthetic
    SyntheticTask synthetic;
    int synthetic_utts = 50;
    std::uint64_t synthetic_seed = 1234;

    bool operator==(const DataConfig&) const = default;
};

struct DecodeConfig {
    int beam = 5;
    int max_len = 0;  // 0: 2 x encoder output length + 10

    bool operator==(const DecodeConfig&) const = default;
};

// Everything a run needs; (RunConfig, data) reproduces a run exactly.
struct RunConfig {
    Precision precision = Precision::f32;
    std::uint64_t seed = 1;
    ModelConfig model;
    FeatureConfig features;
    TrainConfig train;
    DataConfig data;
    DecodeConfig decode;

    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

// Flat dotted key=value text: one pair per line, '#' comments. model.preset
// expands in place, so later keys override preset fields. Unknown keys are
// config errors naming the key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_override(RunConfig& cfg, const std::string& key_equals_value);

// Full expanded key set, sorted; parse(serialize(x)) == x.
std::string serialize_config(const RunConfig& cfg);

}  // namespace convctx
