#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "circuitedit/editor.hpp"
#include "circuitedit/model.hpp"

namespace circuitedit {

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Writes to a sibling temporary file and renames it over path. Missing parent
// directories are created. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);
// Pretty-printed with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Container layout:
//   "circuitedit-container 1\n"
//   <header byte count>"\n"
//   <JSON header>"\n"
//   raw little-endian float64 blocks, in the order listed by header["blocks"].
// A model checkpoint ("checkpoint/1") stores blocks in ParamLayout order.
struct LoadedCheckpoint {
  Parameters params;
  nlohmann::json header;
};
void save_checkpoint(const std::filesystem::path& path, const Parameters& params, const nlohmann::json& extra = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// "adapters/1": per adapter an A block then a B block, with plan metadata.
struct LoadedAdapters {
  AdapterSet adapters;
  EditPlan plan;
  ModelConfig model;
  nlohmann::json header;
};
void save_adapters(const std::filesystem::path& path, const ModelConfig& model, const AdapterSet& adapters,
                   const EditPlan& plan, const nlohmann::json& extra = {});
LoadedAdapters load_adapters(const std::filesystem::path& path);

}  // namespace circuitedit
