#pragma once

#include <json.hpp>

#include "osvit/dataset.hpp"
#include "osvit/model.hpp"
#include "osvit/preprocess.hpp"
#include "osvit/volume_io.hpp"

// JSON forms of the configuration structs, used by checkpoints and run
// manifests. Field names match the struct members.
namespace osvit {

using Json = nlohmann::ordered_json;

void to_json(Json& j, const Dims& d);
void from_json(const Json& j, Dims& d);

void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);

void to_json(Json& j, const PreprocessConfig& c);
void to_json(Json& j, const SynthConfig& c);

}  // namespace osvit
