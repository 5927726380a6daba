// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if
// all pass. Trains the toy model once and reuses it for the criteria that
// need a trained model.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "msic/codec.hpp"
#include "msic/data.hpp"
#include "msic/evaluate.hpp"
#include "msic/range_coder.hpp"
#include "msic/selftest.hpp"
#include "msic/trainer.hpp"

using namespace msic;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// Tolerances.
constexpr double kBijectivityF32 = 1e-4;
constexpr double kBijectivityF64 = 1e-8;
constexpr double kBijectivitySeconds = 30.0;
constexpr double kEstimateRel = 0.01;
constexpr double kEstimateSlackBits = 64.0;
constexpr double kContinuity = 0.02;
constexpr double kLossDecrease = 0.30;
constexpr double kPsnrGap = 3.0;
constexpr double kTrainMinutes = 30.0;
constexpr double kParamTarget = 12.34e6;
constexpr double kParamTolerance = 0.15;
constexpr double kReencodeSlack = 0.05;
constexpr double kReencodeQuality = 7.0;

struct ToyModel {
  CodecModel<float> model;
  std::vector<double> losses;  // per step
  double train_seconds = 0.0;
};

ToyModel train_toy(std::uint64_t seed, int steps, const std::string& cache) {
  TrainConfig tc;
  tc.seed = seed;
  tc.steps = steps;
  namespace fs = std::filesystem;
  const fs::path model_path = fs::path(cache) / "model.msiw";
  const fs::path log_path = fs::path(cache) / "losses.txt";
  if (!cache.empty() && fs::exists(model_path) && fs::exists(log_path)) {
    ToyModel t{CodecModel<float>::load(model_path.string())};
    std::ifstream in(log_path);
    in >> t.train_seconds;
    for (double v; in >> v;) t.losses.push_back(v);
    if (static_cast<int>(t.losses.size()) == steps) {
      std::cout << "using cached toy model from " << cache << "\n";
      return t;
    }
  }
  ToyModel t{CodecModel<float>(ModelConfig::tiny(), tc.seed)};
  Trainer trainer(t.model, tc, synthetic_set(tc.dataset_size, tc.patch, tc.seed));
  const auto t0 = Clock::now();
  int restored = 0;
  for (int i = 0; i < steps; ++i) {
    const TrainStats s = trainer.step();
    restored += s.restored;
    t.losses.push_back(s.loss);
    if (i % 250 == 0 || i + 1 == steps) {
      std::cout << "  train step " << i << " loss " << fmt(s.loss) << " bpp " << fmt(s.bpp) << " ("
                << fmt(seconds_since(t0), 3) << " s)" << std::endl;
    }
  }
  t.train_seconds = seconds_since(t0);
  std::cout << "  " << restored << " rejected steps\n";
  if (!cache.empty()) {
    fs::create_directories(cache);
    t.model.save(model_path.string());
    std::ofstream out(log_path);
    out << std::setprecision(17) << t.train_seconds << '\n';
    for (double v : t.losses) out << v << '\n';
  }
  return t;
}

template <typename T>
double bijectivity_error(const CodecModel<T>& model, const Image& img) {
  const Tensor<T> x = image_to_tensor<T>(img, model.config.alignment());
  const Latents<T> lat = model.transform.forward(nullptr, Var<T>::constant(x), PassMode::kInference);
  return max_abs_diff(model.transform.reverse(nullptr, lat.y).value(), x);
}

// Timed on the trained toy model at both precisions, then repeated untimed on
// randomly perturbed untrained transforms.
Verdict criterion1(CodecModel<float>& trained, std::uint64_t seed) {
  Rng rng = Rng(seed).split("c1");
  std::vector<Image> inputs;
  for (int i = 0; i < 20; ++i) {
    const int w = 16 * rng.uniform_int(4, 16);
    const int h = 16 * rng.uniform_int(4, 16);
    inputs.push_back(synthetic_image(w, h, rng));
  }
  const double c0 = cpu_seconds();
  CodecModel<double> wide(trained.config, seed);
  wide.copy_from(trained);
  double worst32 = 0.0, worst64 = 0.0;
  for (const Image& img : inputs) {
    worst32 = std::max(worst32, bijectivity_error(trained, img));
    worst64 = std::max(worst64, bijectivity_error(wide, img));
  }
  const double cpu = cpu_seconds() - c0;

  double random32 = 0.0, random64 = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Image& img = inputs[i];
    CodecModel<float> f(ModelConfig::tiny(), seed + i);
    f.transform.initialize(image_to_tensor<float>(img, 16));
    perturb_parameters(f, rng.split("perturb").split(i), 0.02);
    CodecModel<double> d(ModelConfig::tiny(), seed + i);
    d.copy_from(f);
    random32 = std::max(random32, bijectivity_error(f, img));
    random64 = std::max(random64, bijectivity_error(d, img));
  }
  const bool ok = std::max(worst32, random32) <= kBijectivityF32 && std::max(worst64, random64) <= kBijectivityF64 &&
                  cpu < kBijectivitySeconds;
  return {ok, "20 inputs 64..256 on the trained model: max err f32 " + fmt(worst32, 3) + ", f64 " + fmt(worst64, 3) +
                  ", " + fmt(cpu, 3) + " s CPU; 4 perturbed random transforms: f32 " + fmt(random32, 3) + ", f64 " +
                  fmt(random64, 3)};
}

Verdict criterion2() {
  const std::vector<std::vector<double>> splits{
      {0.25, 0.25, 0.25, 0.5}, {0.5, 0.5, 0.5, 0.5}, {0.25, 0.5, 0.25, 0.75}, {0.75, 0.5, 0.25, 0.5}};
  bool ok = true;
  std::string detail;
  for (const auto& r : splits) {
    ModelConfig c = ModelConfig::tiny();
    c.split_ratios = r;
    CodecModel<float> model(c, 1);
    const Tensor<float> x(Shape{1, 3, 256, 256}, 0.5f);
    const Latents<float> lat = model.transform.forward(nullptr, Var<float>::constant(x), PassMode::kInference);
    std::size_t total = 0;
    std::string parts;
    for (const auto& y : lat.y) {
      total += y.value().numel();
      parts += (parts.empty() ? "" : "+") + std::to_string(y.value().numel());
    }
    ok = ok && total == 3u * 256 * 256;
    detail += (detail.empty() ? "" : "; ") + parts + "=" + std::to_string(total);
  }
  return {ok, detail};
}

std::vector<Image> codec_images(std::uint64_t seed) {
  Rng rng = Rng(seed).split("c3");
  const std::vector<std::pair<int, int>> sizes{{64, 64}, {80, 48}, {37, 53}, {128, 96}, {100, 100}};
  std::vector<Image> out;
  for (auto [w, h] : sizes) out.push_back(synthetic_image(w, h, rng));
  return out;
}

Verdict criterion3(const CodecModel<float>& model, std::uint64_t seed) {
  // Coder alone: a million symbols over a pool of random tables.
  Rng rng = Rng(seed).split("c3coder");
  std::vector<CdfTable> tables;
  for (int i = 0; i < 2000; ++i) tables.push_back(CdfTable::gaussian(std::exp(rng.uniform(std::log(0.04), std::log(256.0)))));
  const int n = 1000000;
  std::vector<std::uint16_t> which(n);
  std::vector<std::int32_t> symbols(n);
  RangeEncoder enc;
  for (int i = 0; i < n; ++i) {
    which[i] = static_cast<std::uint16_t>(rng.uniform_int(0, 1999));
    double v = tables[which[i]].sigma() * rng.normal();
    if (rng.uniform() < 0.005) v = rng.uniform(-1e6, 1e6);
    symbols[i] = static_cast<std::int32_t>(std::round(v));
    enc.encode_symbol(tables[which[i]], symbols[i]);
  }
  const std::vector<std::uint8_t> bytes = enc.finish();
  RangeDecoder dec(bytes);
  int mismatches = 0;
  for (int i = 0; i < n; ++i) mismatches += dec.decode_symbol(tables[which[i]]) != symbols[i];

  // Full images.
  int image_failures = 0;
  for (const Image& img : codec_images(seed)) {
    for (double q : {0.0, 3.5, 7.0, 11.0}) {
      CodingTrace<float> et, dt;
      const EncodeResult r = encode(model, img, q, &et);
      const Image a = decode(model, r.bytes, &dt);
      const Image b = decode(model, r.bytes);
      bool ok = a == b && a.width == img.width && a.height == img.height && encode(model, img, q).bytes == r.bytes;
      for (std::size_t s = 0; s < et.scales.size(); ++s) {
        ok = ok && et.scales[s].symbols == dt.scales[s].symbols &&
             std::ranges::equal(et.scales[s].y_final.values(), dt.scales[s].y_final.values());
      }
      image_failures += !ok;
    }
  }
  return {mismatches == 0 && image_failures == 0,
          std::to_string(n) + " symbols in " + std::to_string(bytes.size()) + " bytes, " +
              std::to_string(mismatches) + " mismatches; 5 images x 4 q: " + std::to_string(image_failures) +
              " failures"};
}

Verdict criterion4(const CodecModel<float>& model, std::uint64_t seed) {
  Rng rng = Rng(seed).split("c4");
  double worst = 0.0;  // |gap| / allowance
  std::string worst_at;
  auto consider = [&](double actual, double est, const std::string& where) {
    const double ratio = std::abs(actual - est) / (kEstimateRel * est + kEstimateSlackBits);
    if (ratio > worst) {
      worst = ratio;
      worst_at = where + " actual " + fmt(actual, 7) + " est " + fmt(est, 7);
    }
  };
  // Toy latents: one chunk per sigma regime, sized like scales of a 256x256 image.
  const std::vector<std::pair<double, int>> regimes{{0.05, 49152}, {0.5, 36864}, {3.0, 27648}, {40.0, 41472}, {200.0, 41472}};
  for (auto [scale, count] : regimes) {
    RangeEncoder enc;
    double est = 0.0;
    for (int i = 0; i < count; ++i) {
      const double sigma = std::clamp(scale * std::exp(0.5 * rng.normal()), 0.04, 256.0);
      const auto sym = static_cast<std::int32_t>(std::round(sigma * rng.normal() + rng.uniform(-0.5, 0.5)));
      enc.encode_symbol(CdfTable::gaussian(sigma), sym);
      est += gaussian_symbol_bits(sym, sigma);
    }
    consider(8.0 * static_cast<double>(enc.finish().size()), est, "toy sigma~" + fmt(scale, 3));
  }
  for (const Image& img : codec_images(seed)) {
    for (double q : {0.0, 3.5, 7.0, 11.0}) {
      const EncodeResult r = encode(model, img, q);
      for (std::size_t s = 0; s < r.chunk_bits.size(); ++s) {
        consider(r.chunk_bits[s], r.estimated_bits[s],
                 std::to_string(img.width) + "x" + std::to_string(img.height) + " q" + fmt(q, 3) + " scale " +
                     std::to_string(s + 1));
      }
    }
  }
  return {worst <= 1.0, "worst |actual-est| / (1% + 64) = " + fmt(worst, 3) + " at " + worst_at};
}

Verdict selftest_checks(const std::vector<std::string>& names, bool full) {
  SelftestOptions o;
  o.full = full;
  o.only = names;
  std::ostringstream sink;
  const auto results = run_selftest(o, sink);
  bool ok = results.size() == names.size();
  std::string detail;
  for (const auto& r : results) {
    ok = ok && r.passed;
    detail += (detail.empty() ? "" : " | ") + r.name + ": " + r.detail;
  }
  return {ok, detail};
}

std::vector<double> mean_bpp(const CodecModel<float>& model, const std::vector<Image>& images,
                             const std::vector<double>& qs) {
  std::vector<double> out;
  for (double q : qs) {
    double total = 0.0;
    for (const Image& img : images) total += encode(model, img, q).bpp;
    out.push_back(total / static_cast<double>(images.size()));
  }
  return out;
}

// Strict monotonicity over integer q and 2% continuity for q +- 0.1.
Verdict rate_control(const CodecModel<float>& model, const std::vector<Image>& images, const std::string& label) {
  std::vector<double> qs;
  for (int q = 0; q <= 11; ++q) qs.push_back(q);
  const std::vector<double> bpp = mean_bpp(model, images, qs);
  bool increasing = true;
  for (std::size_t i = 1; i < bpp.size(); ++i) increasing = increasing && bpp[i] > bpp[i - 1];
  double worst = 0.0;
  std::string worst_at;
  for (int q = 0; q <= 11; ++q) {
    for (double d : {-0.1, 0.1}) {
      const double qq = q + d;
      if (qq < 0.0 || qq > 11.0) continue;
      const double b = mean_bpp(model, images, {qq})[0];
      const double rel = std::abs(b - bpp[q]) / bpp[q];
      if (rel > worst) {
        worst = rel;
        worst_at = "q" + fmt(qq, 3);
      }
    }
  }
  std::string curve;
  for (double b : bpp) curve += (curve.empty() ? "" : " ") + fmt(b, 3);
  return {increasing && worst <= kContinuity, label + ": bpp(q=0..11) " + curve + (increasing ? "" : " NOT increasing") +
                                                 "; worst q+-0.1 change " + fmt(100 * worst, 3) + "% at " + worst_at};
}

Verdict criterion7(const CodecModel<float>& trained, std::uint64_t seed) {
  const TrainConfig tc;
  const std::vector<Image> images = synthetic_set(tc.dataset_size, tc.patch, seed);
  const CodecModel<float> fresh(ModelConfig::tiny(), seed);
  const Verdict a = rate_control(fresh, images, "untrained");
  const Verdict b = rate_control(trained, images, "trained");
  return {a.passed && b.passed, a.detail + " | " + b.detail};
}

Image holdout(std::uint64_t seed) { return synthetic_holdout(96, 64, seed); }

double psnr_at(const CodecModel<float>& model, const Image& img, double q) {
  return psnr(img, decode(model, encode(model, img, q).bytes));
}

Verdict criterion8(const ToyModel& toy, std::uint64_t seed) {
  const auto& l = toy.losses;
  if (l.size() < 100) return {false, "too few steps"};
  const double ma50 = std::accumulate(l.begin(), l.begin() + 50, 0.0) / 50.0;
  const double final_ma = std::accumulate(l.end() - 50, l.end(), 0.0) / 50.0;
  const double decrease = 1.0 - final_ma / ma50;
  const Image img = holdout(seed);
  const double p0 = psnr_at(toy.model, img, 0.0);
  const double p11 = psnr_at(toy.model, img, 11.0);
  const double minutes = toy.train_seconds / 60.0;
  return {decrease >= kLossDecrease && p11 - p0 >= kPsnrGap && minutes < kTrainMinutes,
          "loss MA(steps 0-49) " + fmt(ma50) + " -> MA(last 50) " + fmt(final_ma) + " (" + fmt(100 * decrease, 3) +
              "% lower); held-out PSNR q0 " + fmt(p0) + " dB, q11 " + fmt(p11) + " dB; training " + fmt(minutes, 3) +
              " min"};
}

Verdict criterion9(CodecModel<float>& model, std::uint64_t seed) {
  const TrainConfig tc;
  std::vector<Image> images = synthetic_set(tc.dataset_size, tc.patch, seed);
  images.push_back(holdout(seed));
  CodecModel<double> wide(model.config, seed);
  wide.copy_from(model);

  const std::vector<std::pair<std::string, CodingOptions>> ablations{
      {"w/o LRP", {.lrp = false, .postprocess = true}},
      {"w/o post-processing", {.lrp = true, .postprocess = false}},
      {"w/o both", {.lrp = false, .postprocess = false}}};
  int violations = 0, points = 0;
  std::vector<double> gain(ablations.size(), 0.0);
  std::string first_violation;
  double bound = 0.0;
  for (const Image& img : images) {
    const Shape padded = image_to_tensor<float>(img, model.config.alignment()).shape();
    for (double q : {0.0, 3.5, 7.0, 11.0}) {
      CodingTrace<float> full;
      encode(model, img, q, &full);
      std::vector<std::vector<std::int32_t>> symbols;
      for (const auto& s : full.scales) symbols.push_back(s.symbols);
      const double p_full = psnr(img, tensor_to_image(full.x_hat, img.width, img.height));
      for (std::size_t a = 0; a < ablations.size(); ++a) {
        const CodingTrace<float> r = replay(model, symbols, padded, q, ablations[a].second);
        const double p = psnr(img, tensor_to_image(r.x_hat, img.width, img.height));
        gain[a] += p_full - p;
        ++points;
        if (p > p_full) {
          ++violations;
          if (first_violation.empty()) {
            first_violation = ablations[a].first + " at q" + fmt(q, 3) + ": " + fmt(p, 6) + " > " + fmt(p_full, 6);
          }
        }
      }
      // Residual prediction bound at 64-bit precision.
      CodingTrace<double> wt;
      encode(wide, img, q, &wt);
      const std::vector<double> qs{q};
      for (std::size_t s = 0; s < wt.scales.size(); ++s) {
        const Tensor<double> g = wide.entropy[s].gains(nullptr, qs).value();
        const Tensor<double>& yh = wt.scales[s].y_hat;
        const Tensor<double>& yf = wt.scales[s].y_final;
        const Shape sh = yh.shape();
        for (int c = 0; c < sh.c; ++c)
          for (std::size_t i = 0; i < sh.plane(); ++i) {
            const std::size_t k = c * sh.plane() + i;
            bound = std::max(bound, std::abs(yf[k] - yh[k]) / (0.5 / g[c]));
          }
      }
    }
  }
  const Verdict probe = selftest_checks({"residual prediction bound"}, false);
  std::string mean_gain;
  for (std::size_t a = 0; a < ablations.size(); ++a) {
    mean_gain += (a ? ", " : "") + ablations[a].first + " " + fmt(gain[a] / (points / 3.0), 3) + " dB";
  }
  return {violations == 0 && bound < 1.0 && probe.passed,
          std::to_string(violations) + "/" + std::to_string(points) + " ablated decodes beat the full decoder" +
              (first_violation.empty() ? "" : " (first: " + first_violation + ")") + "; mean PSNR loss " + mean_gain +
              "; trained max |r|/(0.5 IG) " + fmt(bound, 6) + "; " + probe.detail};
}

Verdict criterion10() {
  CodecModel<float> model(ModelConfig::full(), 1);
  const double count = static_cast<double>(model.parameter_count());
  const double rel = count / kParamTarget - 1.0;
  std::size_t post = 0;
  ParamList<float> pp;
  model.post.collect(pp);
  for (auto* p : pp) post += p->value.numel();
  return {std::abs(rel) <= kParamTolerance, "full config " + std::to_string(static_cast<long long>(count)) +
                                                " parameters (" + fmt(100 * rel, 3) + "% vs 12.34M; post-processing " +
                                                std::to_string(post) + ")"};
}

Verdict criterion11(const CodecModel<float>& model, std::uint64_t seed) {
  const auto rows = reencode_loop(model, holdout(seed), kReencodeQuality, 10);
  bool non_increasing = true;
  std::string traj;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) non_increasing = non_increasing && rows[i].psnr <= rows[i - 1].psnr + kReencodeSlack;
    traj += (traj.empty() ? "" : " ") + fmt(rows[i].psnr, 5);
  }
  const double drop12 = rows[0].psnr - rows[1].psnr;
  const double drop210 = rows[1].psnr - rows[9].psnr;
  return {non_increasing && drop210 < drop12,
          "q" + fmt(kReencodeQuality, 3) + " PSNR " + traj + "; drop 1->2 " + fmt(drop12, 3) + " dB, 2->10 " +
              fmt(drop210, 3) + " dB"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::uint64_t seed = 1;
  int steps = 2000;
  std::string cache;
  app.add_option("--seed", seed, "Seed for training and probes");
  app.add_option("--steps", steps, "Toy training steps")->check(CLI::PositiveNumber);
  app.add_option("--cache", cache, "Directory to store and reuse the trained toy model");
  CLI11_PARSE(app, argc, argv);

  std::cout << std::unitbuf;
  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Verdict()>& fn) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.passed;
    std::cout << (v.passed ? "PASS" : "FAIL") << "  " << std::setw(2) << id << " " << name << " [" << fmt(seconds_since(t0), 3)
              << " s]: " << v.detail << std::endl;
  };

  report(2, "element conservation", [] { return criterion2(); });
  report(5, "context causality", [] {
    return selftest_checks({"context causality (multi)", "context causality (single)", "receptive field"}, false);
  });
  report(6, "gradient checks", [] { return selftest_checks({"gradient checks"}, true); });
  report(10, "parameter accounting", [] { return criterion10(); });

  std::cout << "training toy model (" << steps << " steps, seed " << seed << ")" << std::endl;
  ToyModel toy = train_toy(seed, steps, cache);
  report(1, "bijectivity", [&] { return criterion1(toy.model, seed); });
  report(3, "coder round trip", [&] { return criterion3(toy.model, seed); });
  report(4, "rate-estimate fidelity", [&] { return criterion4(toy.model, seed); });
  report(7, "rate control", [&] { return criterion7(toy.model, seed); });
  report(8, "toy training", [&] { return criterion8(toy, seed); });
  report(9, "ablation switches", [&] { return criterion9(toy.model, seed); });
  report(11, "re-encoding fidelity", [&] { return criterion11(toy.model, seed); });

  std::cout << (11 - failed) << "/11 criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
