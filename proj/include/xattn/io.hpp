#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "xattn/model.hpp"
#include "xattn/toy_task.hpp"

namespace xattn {

using Json = nlohmann::json;

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& j);

// Checkpoint container: {"format": "xattn-model", "version": 1, "config",
// "params": [{"name", "rows", "cols", "data"}]}. Doubles are written in
// shortest round-trip form, so save/load is bit-exact.
Json to_json(const Model& model);
Model model_from_json(const Json& j);

Json to_json(const ToyTaskSpec& spec);
ToyTaskSpec toy_spec_from_json(const Json& j);
Json to_json(const ToyDataset& dataset);
ToyDataset dataset_from_json(const Json& j);

Json to_json(const Tensor& t);  // array of rows
Tensor tensor_from_json(const Json& j);

std::string read_text(const std::filesystem::path& path);
Json read_json(const std::filesystem::path& path);
// Writes a new file; throws ContractError when the path already exists.
void write_text_once(const std::filesystem::path& path, const std::string& text);
void write_json_once(const std::filesystem::path& path, const Json& j);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace xattn
