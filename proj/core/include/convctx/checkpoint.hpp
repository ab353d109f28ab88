#pragma once

#include <string>
#include <vector>

#include "convctx/model.hpp"

namespace convctx {

// On-disk parameter container. Values are 32-bit floats, little-endian;
// the header carries a config echo and free-form provenance (which epoch,
// or which files an average was built from). Write -> read -> write is
// byte-identical.
struct Checkpoint {
    std::string config_text;
    std::string provenance;
    std::vector<NamedParam> params;
};

Checkpoint snapshot(const Model& model, std::string config_text, std::string provenance);

// Strict structural match against the model; the first mismatched parameter
// is named in the error.
void apply_checkpoint(const Checkpoint& ckpt, Model& model);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace convctx
