#include "msic/trainer.hpp"

#include <cmath>

#include "msic/data.hpp"
#include "msic/errors.hpp"
#include "msic/optim.hpp"

namespace msic {

namespace {

struct Snapshot {
  std::vector<Tensor<float>> value, m, v;
  std::vector<std::int64_t> t;
};

Snapshot take(const ParamList<float>& params) {
  Snapshot s;
  for (const Parameter<float>* p : params) {
    s.value.push_back(p->value);
    s.m.push_back(p->adam_m);
    s.v.push_back(p->adam_v);
    s.t.push_back(p->adam_step);
  }
  return s;
}

void restore(const ParamList<float>& params, Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->value = std::move(s.value[i]);
    params[i]->adam_m = std::move(s.m[i]);
    params[i]->adam_v = std::move(s.v[i]);
    params[i]->adam_step = s.t[i];
    params[i]->zero_grad();
  }
}

// Empty when the weights are usable, otherwise a description of the problem.
std::string weight_problem(CodecModel<float>& model) {
  for (const Parameter<float>* p : model.parameters())
    for (float v : p->value.values())
      if (!std::isfinite(v)) return "non-finite value in " + p->name;
  for (const Inv1x1<float>* w : model.transform.mixings()) {
    const double d = w->log_abs_det();
    if (!(d > std::log(1e-6))) {
      return w->weight.name + " is near singular (log|det| = " + std::to_string(d) + ")";
    }
  }
  return {};
}

}  // namespace

Trainer::Trainer(CodecModel<float>& model, const TrainConfig& config, std::vector<Image> data)
    : model_(model), config_(config), data_(std::move(data)) {
  if (data_.empty()) throw ShapeError("training needs at least one image");
  if (config_.batch < 1 || config_.patch < model.config.alignment() || config_.patch % model.config.alignment() != 0) {
    throw ShapeError("patch size must be a positive multiple of " + std::to_string(model.config.alignment()));
  }
}

TrainStats Trainer::step() {
  TrainStats stats;
  stats.step = step_;
  Rng rng = Rng(config_.seed).split("step").split(static_cast<std::uint64_t>(step_));
  Rng crop_rng = rng.split("crop");
  Rng q_rng = rng.split("quality");
  Rng noise = rng.split("noise");
  const Tensor<float> batch = random_crops<float>(data_, config_.batch, config_.patch, crop_rng);
  for (const ActNorm<float>* a : model_.transform.actnorms()) {
    if (!a->initialized()) {
      model_.transform.initialize(batch);
      break;
    }
  }
  std::vector<double> qualities;
  for (int n = 0; n < config_.batch; ++n) qualities.push_back(q_rng.uniform_int(0, model_.config.q_max));

  const ParamList<float> params = model_.parameters();
  Snapshot snapshot = take(params);
  try {
    Tape<float> tape;
    const TrainForward<float> f = training_forward(model_, tape, batch, qualities, noise);
    stats.loss = f.loss.value()[0];
    stats.bpp = f.bpp;
    stats.mse = f.mse;
    stats.lambda = f.lambda;
    tape.backward(f.loss);
    adam_step(params, AdamOptions{.lr = config_.lr});
    stats.diagnostic = weight_problem(model_);
  } catch (const NumericError& e) {
    stats.diagnostic = e.what();
  }
  if (!stats.diagnostic.empty()) {
    restore(params, snapshot);
    stats.restored = true;
  }
  ++step_;
  return stats;
}

WeightsFile Trainer::checkpoint() {
  WeightsFile f = model_.to_weights();
  f.add_text("__trainer__", nlohmann::json{{"step", step_}, {"train", config_.to_json()}}.dump());
  for (const Parameter<float>* p : model_.parameters()) {
    if (!p->trainable) continue;
    f.add("adam.m/" + p->name, p->adam_m);
    f.add("adam.v/" + p->name, p->adam_v);
    Tensor<double> t(Shape{1, 1, 1, 1});
    t[0] = static_cast<double>(p->adam_step);
    f.add("adam.t/" + p->name, t);
  }
  return f;
}

void Trainer::resume(const WeightsFile& file) {
  CodecModel<float> loaded = CodecModel<float>::from_weights(file);
  if (loaded.config.hash() != model_.config.hash()) throw ConfigMismatchError("checkpoint has a different model config");
  model_.copy_from(loaded);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(file.text("__trainer__"));
    step_ = j.at("step").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint trainer state is malformed: ") + e.what());
  }
  for (Parameter<float>* p : model_.parameters()) {
    if (!p->trainable) continue;
    p->adam_m = file.tensor<float>("adam.m/" + p->name);
    p->adam_v = file.tensor<float>("adam.v/" + p->name);
    p->adam_step = static_cast<std::int64_t>(file.tensor<double>("adam.t/" + p->name)[0]);
  }
}

}  // namespace msic
