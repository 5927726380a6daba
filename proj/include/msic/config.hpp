#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace msic {

// Channel bookkeeping of one latent scale for a 3-channel input.
struct ScaleLayout {
  int channels = 0;   // channels of y_i
  int hidden = 0;     // channels of the sibling hidden h_i (0 for the last scale)
  int downscale = 0;  // spatial extent is input / downscale
};

struct ModelConfig {
  int blocks = 4;
  int units = 4;
  // Fraction of each block's channels sent to y_i; the rest continue as h_i.
  std::vector<double> split_ratios{0.25, 0.25, 0.25, 0.5};
  std::vector<int> coupling_widths{32, 32, 32, 32};
  int channel_context_width = 32;
  int spatial_context_width = 32;
  int param_width = 32;
  int lrp_width = 32;
  int postprocess_width = 8;
  int q_max = 11;
  std::vector<double> lambdas{0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483,
                              0.0932, 0.1800, 0.320,  0.569,  1.012,  1.8};
  // "multi" (1 mask-A + 3 mask-B 3x3 layers), "single" (one k x k
  // checkerboard layer) or "none".
  std::string spatial_context = "multi";
  int single_kernel = 5;
  bool use_lrp = true;
  bool use_postprocess = true;
  // "mixed": noisy residual for the rate, straight-through rounding for the
  // reconstruction. "noise": noisy residual for both.
  std::string surrogate = "mixed";

  static ModelConfig tiny();
  static ModelConfig full();

  int scales() const { return blocks + 1; }
  int alignment() const { return 1 << blocks; }
  std::vector<ScaleLayout> layout() const;
  // Channels entering block b after its squeeze.
  int block_channels(int b) const;

  // Throws FormatError describing the first inconsistency.
  void validate() const;

  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct TrainConfig {
  int steps = 2000;
  int batch = 8;
  int patch = 64;
  int dataset_size = 8;
  double lr = 1e-4;
  std::uint64_t seed = 1;
  int log_every = 50;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Reads {"model": {...}, "train": {...}}; both sections are optional.
void load_config_file(const std::string& path, ModelConfig& model, TrainConfig& train);

}  // namespace msic
