#pragma once

#include <string>
#include <vector>

#include "msic/codec.hpp"
#include "msic/config.hpp"
#include "msic/image.hpp"

namespace msic {

struct TrainStats {
  int step = 0;  // index of the step just taken
  double loss = 0.0;
  double bpp = 0.0;
  double mse = 0.0;
  double lambda = 0.0;
  bool restored = false;  // the step was rejected and the weights rolled back
  std::string diagnostic;
};

// Rate-distortion training of a 32-bit model on crops of a fixed image set.
// Step k draws its crops, qualities and noise from Rng(seed).split("step").split(k),
// so a resumed run continues exactly where a checkpoint left off.
class Trainer {
 public:
  Trainer(CodecModel<float>& model, const TrainConfig& config, std::vector<Image> data);

  TrainStats step();
  int steps_done() const { return step_; }

  // Model weights plus optimizer moments and the step counter.
  WeightsFile checkpoint();
  // Loads a checkpoint written for the same model configuration.
  void resume(const WeightsFile& file);

 private:
  CodecModel<float>& model_;
  TrainConfig config_;
  std::vector<Image> data_;
  int step_ = 0;
};

}  // namespace msic
