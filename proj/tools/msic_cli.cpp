#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "msic/codec.hpp"
#include "msic/data.hpp"
#include "msic/errors.hpp"
#include "msic/evaluate.hpp"
#include "msic/selftest.hpp"
#include "msic/trainer.hpp"

using namespace msic;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kVerification = 3 };

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  return out;
}

std::vector<double> parse_quality_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double q = 0.0;
    try {
      q = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw RangeError("cannot parse quality '" + item + "'");
    out.push_back(q);
  }
  if (out.empty()) throw RangeError("empty quality list");
  return out;
}

void check_quality_flag(const CodecModel<float>& model, double q) {
  if (!(q >= 0.0 && q <= model.config.q_max)) {
    throw RangeError("--q " + std::to_string(q) + " is outside [0, " + std::to_string(model.config.q_max) + "]");
  }
}

int cmd_encode(const std::string& model_path, const std::string& input, double q, const std::string& output) {
  const CodecModel<float> model = CodecModel<float>::load(model_path);
  check_quality_flag(model, q);
  const Image img = read_ppm(input);
  const EncodeResult r = encode(model, img, q);
  write_file(output, r.bytes);
  std::cout << std::fixed << std::setprecision(6) << "bpp " << r.bpp << "\n"
            << "header_bits " << r.header_bits << "\n";
  for (std::size_t i = 0; i < r.chunk_bits.size(); ++i) {
    std::cout << "scale" << i + 1 << "_bits " << std::setprecision(0) << r.chunk_bits[i] << " estimated "
              << std::setprecision(1) << r.estimated_bits[i] << "\n";
  }
  return kOk;
}

int cmd_decode(const std::string& model_path, const std::string& input, const std::string& output) {
  const CodecModel<float> model = CodecModel<float>::load(model_path);
  const Image img = decode(model, read_file(input));
  write_ppm(output, img);
  std::cout << "decoded " << img.width << "x" << img.height << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data_dir;
  bool synthetic = false;
  int steps = -1;
  long long seed = -1;
  std::string out_model;
  std::string checkpoint;
};

int cmd_train(const TrainArgs& a) {
  ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc;
  if (!a.config.empty()) load_config_file(a.config, mc, tc);
  if (a.steps >= 0) tc.steps = a.steps;
  if (a.seed >= 0) tc.seed = static_cast<std::uint64_t>(a.seed);

  std::vector<Image> data;
  if (a.synthetic) {
    data = synthetic_set(tc.dataset_size, tc.patch, tc.seed);
  } else {
    std::vector<std::string> errors;
    for (NamedImage& n : load_folder(a.data_dir, &errors)) data.push_back(std::move(n.image));
    for (const std::string& e : errors) std::cerr << "skipping " << e << "\n";
    if (data.empty()) throw std::ios_base::failure("no readable .ppm images in " + a.data_dir);
  }

  CodecModel<float> model(mc, tc.seed);
  Trainer trainer(model, tc, std::move(data));
  if (!a.checkpoint.empty() && std::filesystem::exists(a.checkpoint)) {
    trainer.resume(WeightsFile::load(a.checkpoint));
    std::cout << "resumed from " << a.checkpoint << " at step " << trainer.steps_done() << "\n";
  }
  std::cout << "parameters " << model.parameter_count() << "\n";
  std::cout << "step,loss,rate_bits,bpp,mse,lambda\n";
  const double pixels = static_cast<double>(tc.patch) * tc.patch;
  int rejected = 0;
  while (trainer.steps_done() < tc.steps) {
    const TrainStats s = trainer.step();
    if (s.restored) {
      ++rejected;
      std::cerr << "step " << s.step << " rejected, weights restored: " << s.diagnostic << "\n";
    }
    if (tc.log_every > 0 && (s.step % tc.log_every == 0 || s.step + 1 == tc.steps)) {
      std::cout << s.step << ',' << s.loss << ',' << s.bpp * pixels << ',' << s.bpp << ',' << s.mse << ','
                << s.lambda << std::endl;
    }
    if (!a.checkpoint.empty() && tc.checkpoint_every > 0 && trainer.steps_done() % tc.checkpoint_every == 0) {
      trainer.checkpoint().save(a.checkpoint);
    }
  }
  model.save(a.out_model);
  if (!a.checkpoint.empty()) trainer.checkpoint().save(a.checkpoint);
  std::cout << "wrote " << a.out_model << " (" << rejected << " rejected steps)\n";
  return kOk;
}

int cmd_evaluate(const std::string& model_path, const std::string& dir, const std::string& qualities,
                 const std::string& csv) {
  const CodecModel<float> model = CodecModel<float>::load(model_path);
  const std::vector<double> qs = parse_quality_list(qualities);
  for (double q : qs) check_quality_flag(model, q);
  std::vector<std::string> errors;
  std::vector<NamedImage> images = load_folder(dir, &errors);
  std::vector<EvalRow> rows = evaluate_images(model, images, qs);
  for (const std::string& e : errors) {
    const std::string name = e.substr(0, e.find(':'));
    for (double q : qs) rows.push_back({name, q, 0.0, 0.0, "error: " + e.substr(name.size() + 2)});
  }
  std::ofstream out = open_output(csv);
  write_eval_csv(out, rows);
  int failed = 0;
  for (const EvalRow& r : rows) failed += r.status != "ok";
  std::cout << rows.size() << " rows, " << failed << " errors\n";
  return failed ? kIo : kOk;
}

int cmd_reencode(const std::string& model_path, const std::string& input, double q, int n, const std::string& csv) {
  const CodecModel<float> model = CodecModel<float>::load(model_path);
  check_quality_flag(model, q);
  const auto rows = reencode_loop(model, read_ppm(input), q, n);
  std::ofstream out = open_output(csv);
  write_reencode_csv(out, rows);
  write_reencode_csv(std::cout, rows);
  return kOk;
}

int cmd_rf_map(const std::string& output, int size) {
  std::ofstream out = open_output(output);
  write_grid_csv(out, receptive_field_map(size));
  return kOk;
}

int cmd_selftest(const std::string& level, bool corrupt_mask) {
  SelftestOptions options;
  options.full = level == "full";
  options.corrupt_mask = corrupt_mask;
  const std::vector<SelftestResult> results = run_selftest(options, std::cout);
  int failed = 0;
  for (const SelftestResult& r : results) failed += !r.passed;
  std::cout << (results.size() - failed) << "/" << results.size() << " checks passed\n";
  return failed ? kVerification : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale invertible learned image codec"};
  app.require_subcommand(1);

  std::string model, input, output, csv, data_dir, qualities = "0,3.5,7,11", level = "fast";
  double q = 0.0;
  int n = 10, grid = 15;
  bool corrupt_mask = false;
  TrainArgs train;

  CLI::App* enc = app.add_subcommand("encode", "Compress a P6 image");
  enc->add_option("--model", model, "Model file")->required();
  enc->add_option("--input", input, "Input P6 image")->required();
  enc->add_option("--q", q, "Quality in [0, q_max], fractional values allowed")->required();
  enc->add_option("--output", output, "Output bitstream")->required();

  CLI::App* dec = app.add_subcommand("decode", "Decompress a bitstream to P6");
  dec->add_option("--model", model, "Model file")->required();
  dec->add_option("--input", input, "Input bitstream")->required();
  dec->add_option("--output", output, "Output P6 image")->required();

  CLI::App* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", train.config, "JSON config with optional \"model\" and \"train\" sections");
  auto* dd = tr->add_option("--data-dir", train.data_dir, "Directory of P6 training images");
  auto* syn = tr->add_flag("--synthetic", train.synthetic, "Use the built-in synthetic patch set");
  dd->excludes(syn);
  tr->add_option("--steps", train.steps, "Training steps (overrides the config)")->check(CLI::NonNegativeNumber);
  tr->add_option("--seed", train.seed, "Seed (overrides the config)")->check(CLI::NonNegativeNumber);
  tr->add_option("--out-model", train.out_model, "Output model file")->required();
  tr->add_option("--checkpoint", train.checkpoint, "Checkpoint file; resumed from when it exists");

  CLI::App* ev = app.add_subcommand("evaluate", "Encode and decode every P6 image of a folder");
  ev->add_option("--model", model, "Model file")->required();
  ev->add_option("--data-dir", data_dir, "Directory of P6 images")->required();
  ev->add_option("--q", qualities, "Comma-separated qualities");
  ev->add_option("--csv", csv, "Output CSV (file,q,bpp,psnr,status)")->required();

  CLI::App* st = app.add_subcommand("selftest", "Run the invariant suites");
  st->add_option("--level", level, "fast or full")->check(CLI::IsMember({"fast", "full"}));
  st->add_flag("--corrupt-mask", corrupt_mask, "")->group("");

  CLI::App* rf = app.add_subcommand("rf-map", "Receptive field of the spatial context stack as CSV");
  rf->add_option("--output", output, "Output CSV")->required();
  rf->add_option("--size", grid, "Odd grid size")->check(CLI::Range(3, 101));

  CLI::App* re = app.add_subcommand("reencode", "Repeated decode and re-encode at a fixed quality");
  re->add_option("--model", model, "Model file")->required();
  re->add_option("--input", input, "Input P6 image")->required();
  re->add_option("--q", q, "Quality")->required();
  re->add_option("--n", n, "Iterations")->check(CLI::PositiveNumber);
  re->add_option("--csv", csv, "Output CSV (iteration,bpp,psnr)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (tr->parsed() && !train.synthetic && train.data_dir.empty()) {
    std::cerr << "train: one of --data-dir or --synthetic is required\n";
    return kUsage;
  }

  try {
    if (enc->parsed()) return cmd_encode(model, input, q, output);
    if (dec->parsed()) return cmd_decode(model, input, output);
    if (tr->parsed()) return cmd_train(train);
    if (ev->parsed()) return cmd_evaluate(model, data_dir, qualities, csv);
    if (st->parsed()) return cmd_selftest(level, corrupt_mask);
    if (rf->parsed()) return cmd_rf_map(output, grid);
    if (re->parsed()) return cmd_reencode(model, input, q, n, csv);
  } catch (const RangeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kVerification;
  }
  return kUsage;
}
