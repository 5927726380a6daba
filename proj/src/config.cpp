#include "msic/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "msic/errors.hpp"
#include "msic/rng.hpp"

namespace msic {
namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw FormatError(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw FormatError(std::string("unknown ") + what + " key '" + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.coupling_widths = {128, 128, 128, 192};
  c.channel_context_width = 128;
  c.spatial_context_width = 128;
  c.param_width = 128;
  c.lrp_width = 128;
  c.postprocess_width = 59;
  return c;
}

int ModelConfig::block_channels(int b) const {
  int c = 3;
  for (int i = 0; i < b; ++i) {
    const int squeezed = 4 * c;
    c = squeezed - static_cast<int>(std::lround(squeezed * split_ratios[i]));
  }
  return 4 * c;
}

std::vector<ScaleLayout> ModelConfig::layout() const {
  std::vector<ScaleLayout> out;
  for (int b = 0; b < blocks; ++b) {
    const int c = block_channels(b);
    const int y = static_cast<int>(std::lround(c * split_ratios[b]));
    out.push_back(ScaleLayout{y, c - y, 2 << b});
  }
  out.push_back(ScaleLayout{out.back().hidden, 0, out.back().downscale});
  return out;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw FormatError("invalid model config: " + m); };
  if (blocks < 1 || blocks > 6) fail("blocks must be in [1, 6]");
  if (units < 1) fail("units must be positive");
  if (static_cast<int>(split_ratios.size()) != blocks) fail("need one split ratio per block");
  if (static_cast<int>(coupling_widths.size()) != blocks) fail("need one coupling width per block");
  for (int w : coupling_widths)
    if (w < 1) fail("coupling widths must be positive");
  for (int b = 0; b < blocks; ++b) {
    const int c = block_channels(b);
    const double exact = c * split_ratios[b];
    if (std::abs(exact - std::round(exact)) > 1e-9) {
      fail("split ratio of block " + std::to_string(b + 1) + " does not divide " +
           std::to_string(c) + " channels");
    }
    const int y = static_cast<int>(std::lround(exact));
    if (y < 1 || y >= c) fail("split of block " + std::to_string(b + 1) + " leaves an empty part");
  }
  if (channel_context_width < 1 || spatial_context_width < 1 || param_width < 1 || lrp_width < 1 ||
      postprocess_width < 1) {
    fail("network widths must be positive");
  }
  if (q_max < 0) fail("q_max must be non-negative");
  if (static_cast<int>(lambdas.size()) != q_max + 1) fail("need q_max + 1 lambda values");
  if (spatial_context != "multi" && spatial_context != "single" && spatial_context != "none") {
    fail("spatial_context must be multi, single or none");
  }
  if (spatial_context == "single" && (single_kernel < 3 || single_kernel % 2 == 0)) {
    fail("single_kernel must be odd and at least 3");
  }
  if (surrogate != "mixed" && surrogate != "noise") fail("surrogate must be mixed or noise");
}

nlohmann::json ModelConfig::to_json() const {
  return json{{"blocks", blocks},
              {"units", units},
              {"split_ratios", split_ratios},
              {"coupling_widths", coupling_widths},
              {"channel_context_width", channel_context_width},
              {"spatial_context_width", spatial_context_width},
              {"param_width", param_width},
              {"lrp_width", lrp_width},
              {"postprocess_width", postprocess_width},
              {"q_max", q_max},
              {"lambdas", lambdas},
              {"spatial_context", spatial_context},
              {"single_kernel", single_kernel},
              {"use_lrp", use_lrp},
              {"use_postprocess", use_postprocess},
              {"surrogate", surrogate}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"blocks", "units", "split_ratios", "coupling_widths", "channel_context_width",
                  "spatial_context_width", "param_width", "lrp_width", "postprocess_width",
                  "q_max", "lambdas", "spatial_context", "single_kernel", "use_lrp",
                  "use_postprocess", "surrogate"},
                 "model config");
  ModelConfig c;
  read(j, "blocks", c.blocks);
  read(j, "units", c.units);
  read(j, "split_ratios", c.split_ratios);
  read(j, "coupling_widths", c.coupling_widths);
  read(j, "channel_context_width", c.channel_context_width);
  read(j, "spatial_context_width", c.spatial_context_width);
  read(j, "param_width", c.param_width);
  read(j, "lrp_width", c.lrp_width);
  read(j, "postprocess_width", c.postprocess_width);
  read(j, "q_max", c.q_max);
  read(j, "lambdas", c.lambdas);
  read(j, "spatial_context", c.spatial_context);
  read(j, "single_kernel", c.single_kernel);
  read(j, "use_lrp", c.use_lrp);
  read(j, "use_postprocess", c.use_postprocess);
  read(j, "surrogate", c.surrogate);
  c.validate();
  return c;
}

std::string ModelConfig::canonical() const { return to_json().dump(); }

std::uint64_t ModelConfig::hash() const { return fnv1a64(canonical()); }

nlohmann::json TrainConfig::to_json() const {
  return json{{"steps", steps},     {"batch", batch},
              {"patch", patch},     {"dataset_size", dataset_size},
              {"lr", lr},           {"seed", seed},
              {"log_every", log_every}, {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"steps", "batch", "patch", "dataset_size", "lr", "seed", "log_every",
                  "checkpoint_every"},
                 "train config");
  TrainConfig t;
  read(j, "steps", t.steps);
  read(j, "batch", t.batch);
  read(j, "patch", t.patch);
  read(j, "dataset_size", t.dataset_size);
  read(j, "lr", t.lr);
  read(j, "seed", t.seed);
  read(j, "log_every", t.log_every);
  read(j, "checkpoint_every", t.checkpoint_every);
  if (t.steps < 0 || t.batch < 1 || t.patch < 16 || t.patch % 16 != 0 || t.dataset_size < 1 ||
      !(t.lr >= 0.0)) {
    throw FormatError("invalid train config");
  }
  return t;
}

void load_config_file(const std::string& path, ModelConfig& model, TrainConfig& train) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
  reject_unknown(j, {"model", "train"}, "config file");
  if (j.contains("model")) model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) train = TrainConfig::from_json(j.at("train"));
}

}  // namespace msic
