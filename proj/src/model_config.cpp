#include "circuitedit/model_config.hpp"

#include "circuitedit/errors.hpp"

namespace circuitedit {

std::string to_string(ModelVariant v) { return v == ModelVariant::Standard ? "standard" : "linear"; }

ModelVariant model_variant_from_string(const std::string& s) {
  if (s == "standard") return ModelVariant::Standard;
  if (s == "linear") return ModelVariant::Linear;
  throw ConfigError("unknown model variant '" + s + "'");
}

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || d_model < 1 || d_ff < 1 || vocab < 1 || max_seq_len < 1) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
  }
}

}  // namespace circuitedit
