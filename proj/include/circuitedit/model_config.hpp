#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace circuitedit {

// Standard is the pre-LayerNorm GPT-2 style block. Linear replaces LayerNorm
// and gelu with identities and uses a fixed uniform causal attention pattern;
// it exists as a test fixture where first-order attribution is exact.
enum class ModelVariant { Standard, Linear };

std::string to_string(ModelVariant v);
ModelVariant model_variant_from_string(const std::string& s);

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int d_model = 32;
  int d_ff = 128;
  int vocab = 64;
  int max_seq_len = 16;
  std::uint64_t seed = 0;
  ModelVariant variant = ModelVariant::Standard;

  int head_dim() const { return d_model / heads; }
  // Throws ConfigError when a dimension is non-positive or d_model % heads != 0.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace circuitedit
