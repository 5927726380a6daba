#include "msic/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "msic/codec.hpp"
#include "msic/data.hpp"
#include "msic/entropy_model.hpp"
#include "msic/errors.hpp"
#include "msic/evaluate.hpp"
#include "msic/gradcheck.hpp"
#include "msic/range_coder.hpp"

namespace msic {

namespace {

struct Outcome {
  bool passed;
  std::string detail;
};

template <typename T>
Tensor<T> normal_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(s);
  for (T& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
Tensor<T> image_batch(int n, int size, Rng& rng) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(synthetic_image(size, size, rng));
  return random_crops<T>(imgs, n, size, rng);
}

template <typename T>
double bijectivity_error(const ModelConfig& config, int size, std::uint64_t seed) {
  CodecModel<T> model(config, seed);
  Rng rng(seed);
  const Tensor<T> x = image_batch<T>(1, size, rng);
  model.transform.initialize(x);
  perturb_parameters(model, rng.split("perturb"), 0.02);
  const Latents<T> lat = model.transform.forward(nullptr, Var<T>::constant(x), PassMode::kInference);
  return max_abs_diff(model.transform.reverse(nullptr, lat.y).value(), x);
}

Outcome check_bijectivity(const SelftestOptions& o) {
  const ModelConfig config = ModelConfig::tiny();
  const int size = o.full ? 128 : 64;
  const double ef = bijectivity_error<float>(config, size, o.seed);
  const double ed = bijectivity_error<double>(config, size, o.seed);
  std::ostringstream s;
  s << "float " << ef << ", double " << ed;
  return {ef <= 1e-4 && ed <= 1e-8, s.str()};
}

Outcome check_conservation(const SelftestOptions&) {
  const std::vector<std::vector<double>> splits{
      {0.25, 0.25, 0.25, 0.5}, {0.5, 0.5, 0.5, 0.5}, {0.25, 0.5, 0.25, 0.75}, {0.75, 0.5, 0.25, 0.5}};
  std::ostringstream s;
  bool ok = true;
  for (const auto& r : splits) {
    ModelConfig c = ModelConfig::tiny();
    c.split_ratios = r;
    c.coupling_widths = {4, 4, 4, 4};
    CodecModel<float> model(c, 1);
    const Tensor<float> x(Shape{1, 3, 256, 256});
    const Latents<float> lat = model.transform.forward(nullptr, Var<float>::constant(x), PassMode::kInference);
    std::size_t total = 0;
    for (const auto& y : lat.y) total += y.value().numel();
    ok = ok && total == 3u * 256 * 256;
    s << total << ' ';
  }
  return {ok, s.str()};
}

// Scale-1 entropy model probed with arbitrary latent grids.
Outcome check_causality(const SelftestOptions& o, const std::string& kind) {
  ModelConfig config = ModelConfig::tiny();
  config.spatial_context = kind;
  Rng rng(o.seed);
  CodecModel<double> model(config, o.seed);
  perturb_parameters(model, rng.split("perturb"), 0.1);
  ScaleEntropyModel<double>& em = model.entropy[0];
  if (o.corrupt_mask) {
    Conv2d<double>& first = em.spatial.layers.front();
    const int k = first.weight.value.shape().h;
    first.mask = KernelMask::ones(k);
    for (int a = 0; a < first.weight.value.shape().n; ++a)
      for (int c = 0; c < first.weight.value.shape().c; ++c)
        first.weight.value.at(a, c, k / 2, k / 2) = rng.normal();
  }
  const auto layout = config.layout();
  const int h = 24, w = 24;
  const Shape ys{1, layout[0].channels, h, w};
  const Var<double> hidden =
      Var<double>::constant(normal_tensor<double>(Shape{1, layout[0].hidden, h, w}, rng));
  const Var<double> ch = em.channel_features(nullptr, hidden, ys);
  const auto params = [&](const Tensor<double>& y) {
    const GaussianParams<double> p = em.params(nullptr, ch, em.spatial_features(nullptr, Var<double>::constant(y)));
    return std::make_pair(p.mu.value(), p.sigma.value());
  };
  const GaussianParams<double> anchor_pass = em.params(nullptr, ch, Var<double>());
  const Tensor<double> y0 = normal_tensor<double>(ys, rng, 3.0);
  const auto [mu0, sigma0] = params(y0);

  // Randomize every non-anchor position.
  Tensor<double> y1 = y0;
  for (int c = 0; c < ys.c; ++c)
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col)
        if ((r + col) % 2 == 1) y1.at(0, c, r, col) = 3.0 * rng.normal();
  const auto [mu1, sigma1] = params(y1);

  int anchor_diff = 0, nonanchor_diff = 0;
  for (int c = 0; c < ys.c; ++c)
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col) {
        const std::size_t i = y0.index(0, c, r, col);
        if ((r + col) % 2 == 0) {
          anchor_diff += mu0[i] != anchor_pass.mu.value()[i] || sigma0[i] != anchor_pass.sigma.value()[i];
          anchor_diff += mu1[i] != anchor_pass.mu.value()[i] || sigma1[i] != anchor_pass.sigma.value()[i];
        } else {
          nonanchor_diff += mu0[i] != mu1[i] || sigma0[i] != sigma1[i];
        }
      }

  // Perturb one anchor far from a probed non-anchor position, then one inside the window.
  const int pr = 11, pc = 12;
  const int radius = kind == "single" ? config.single_kernel / 2 : 4;
  Tensor<double> y2 = y0;
  for (int c = 0; c < ys.c; ++c) y2.at(0, c, pr + radius + 1, pc + radius + 1) += 5.0;
  const auto [mu2, sigma2] = params(y2);
  Tensor<double> y3 = y0;
  for (int c = 0; c < ys.c; ++c) y3.at(0, c, pr, pc - 1) += 5.0;
  const auto [mu3, sigma3] = params(y3);
  int outside_diff = 0, inside_same = 0;
  for (int c = 0; c < ys.c; ++c) {
    const std::size_t i = y0.index(0, c, pr, pc);
    outside_diff += mu2[i] != mu0[i] || sigma2[i] != sigma0[i];
    inside_same += mu3[i] == mu0[i] && sigma3[i] == sigma0[i];
  }
  std::ostringstream s;
  s << kind << ": anchor changes " << anchor_diff << ", non-anchor changes " << nonanchor_diff
    << ", outside-window changes " << outside_diff << ", inside-window unchanged " << inside_same << "/" << ys.c;
  const bool ok = anchor_diff == 0 && nonanchor_diff == 0 && outside_diff == 0 && inside_same < ys.c;
  return {ok, s.str()};
}

Outcome check_receptive_field(const SelftestOptions&) {
  const auto g = receptive_field_map(15);
  const int c = 7;
  bool ok = g[c][c] == 0.0;
  int nonzero = 0;
  for (int y = 0; y < 15; ++y)
    for (int x = 0; x < 15; ++x) {
      const bool inside = std::abs(y - c) <= 4 && std::abs(x - c) <= 4;
      if (!inside && g[y][x] != 0.0) ok = false;
      if (g[y][x] != g[x][14 - y]) ok = false;
      nonzero += g[y][x] != 0.0;
    }
  return {ok && nonzero > 0, std::to_string(nonzero) + " nonzero cells inside 9x9"};
}

Outcome check_coder(const SelftestOptions& o) {
  const int n = o.full ? 100000 : 20000;
  Rng rng(o.seed);
  std::vector<double> sigmas(n);
  std::vector<std::int32_t> symbols(n);
  RangeEncoder enc;
  for (int i = 0; i < n; ++i) {
    sigmas[i] = std::exp(rng.uniform(std::log(kSigmaMin), std::log(kSigmaMax)));
    double v = sigmas[i] * rng.normal();
    if (rng.uniform() < 0.01) v = rng.uniform(-5000.0, 5000.0);
    symbols[i] = static_cast<std::int32_t>(std::round(v));
    enc.encode_symbol(CdfTable::gaussian(sigmas[i]), symbols[i]);
  }
  const std::vector<std::uint8_t> bytes = enc.finish();
  RangeDecoder dec(bytes);
  int mismatches = 0;
  for (int i = 0; i < n; ++i) mismatches += dec.decode_symbol(CdfTable::gaussian(sigmas[i])) != symbols[i];
  return {mismatches == 0, std::to_string(n) + " symbols, " + std::to_string(bytes.size()) + " bytes, " +
                               std::to_string(mismatches) + " mismatches"};
}

Outcome check_estimate(const SelftestOptions& o) {
  Rng rng(o.seed);
  bool ok = true;
  std::ostringstream s;
  for (double scale : {0.3, 2.0, 20.0}) {
    RangeEncoder enc;
    double est = 0.0;
    for (int i = 0; i < 20000; ++i) {
      const double sigma = std::clamp(scale * std::exp(0.3 * rng.normal()), kSigmaMin, kSigmaMax);
      const auto sym = static_cast<std::int32_t>(std::round(sigma * rng.normal()));
      enc.encode_symbol(CdfTable::gaussian(sigma), sym);
      est += gaussian_symbol_bits(sym, sigma);
    }
    const double actual = 8.0 * static_cast<double>(enc.finish().size());
    const double gap = actual - est;
    ok = ok && std::abs(gap) <= 0.01 * est + 64.0;
    s << "sigma~" << scale << ": " << std::fixed << std::setprecision(0) << actual << " vs " << est << "; "
      << std::defaultfloat;
  }
  return {ok, s.str()};
}

Outcome check_codec(const SelftestOptions& o) {
  CodecModel<float> model(ModelConfig::tiny(), o.seed);
  Rng rng(o.seed);
  perturb_parameters(model, rng.split("perturb"), 0.02);
  const Image img = synthetic_image(40, 24, rng);
  std::ostringstream s;
  bool ok = true;
  for (double q : {0.0, 5.5, 11.0}) {
    CodingTrace<float> et, dt;
    const EncodeResult r = encode(model, img, q, &et);
    const Image a = decode(model, r.bytes, &dt);
    const Image b = decode(model, r.bytes);
    double total = static_cast<double>(r.header_bits);
    for (double bits : r.chunk_bits) total += bits;
    ok = ok && a == b && a.width == img.width && a.height == img.height && total == 8.0 * r.bytes.size();
    for (std::size_t i = 0; i < et.scales.size(); ++i) {
      ok = ok && et.scales[i].symbols == dt.scales[i].symbols &&
           std::ranges::equal(et.scales[i].y_final.values(), dt.scales[i].y_final.values());
    }
    s << "q" << q << ' ' << std::setprecision(3) << r.bpp << "bpp ";
  }
  return {ok, s.str()};
}

Outcome check_lrp_bound(const SelftestOptions& o) {
  CodecModel<double> model(ModelConfig::tiny(), o.seed);
  Rng rng(o.seed);
  perturb_parameters(model, rng.split("perturb"), 1.0);
  const auto layout = model.config.layout();
  double worst = 0.0;
  for (int s = 1; s <= model.config.scales(); ++s) {
    const ScaleEntropyModel<double>& em = model.entropy[s - 1];
    const int hc = s == model.config.scales() ? 0 : (s == model.config.scales() - 1 ? layout.back().channels : layout[s - 1].hidden);
    const Shape ys{1, layout[s - 1].channels, 4, 4};
    const Var<double> hidden = hc ? Var<double>::constant(normal_tensor<double>(Shape{1, hc, 4, 4}, rng, 100.0))
                                  : Var<double>();
    const Var<double> y = Var<double>::constant(normal_tensor<double>(ys, rng, 100.0));
    for (double q : {0.0, 4.3, 11.0}) {
      const std::vector<double> qs{q};
      const Var<double> ig = reciprocal(em.gains(nullptr, qs));
      const Tensor<double> r = em.lrp_correction(nullptr, hidden, y, ig).value();
      for (int c = 0; c < ys.c; ++c)
        for (int i = 0; i < 16; ++i) worst = std::max(worst, std::abs(r[c * 16 + i]) / (0.5 * ig.value()[c]));
    }
  }
  return {worst < 1.0, "max |r| / (0.5 ig) = " + (std::ostringstream() << std::setprecision(10) << worst).str()};
}

Outcome check_weights_roundtrip(const SelftestOptions& o) {
  CodecModel<float> model(ModelConfig::tiny(), o.seed);
  perturb_parameters(model, Rng(o.seed), 0.02);
  const WeightsFile f = model.to_weights();
  CodecModel<float> back = CodecModel<float>::from_weights(WeightsFile::parse(f.serialize()));
  bool same = back.config.hash() == model.config.hash();
  const auto a = model.parameters();
  const auto b = back.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i]->value.storage() == b[i]->value.storage();
  return {same, std::to_string(a.size()) + " tensors"};
}

// 64-bit finite differences through each layer type of a small model.
Outcome check_gradients(const SelftestOptions& o) {
  ModelConfig c = ModelConfig::tiny();
  c.blocks = 2;
  c.units = 2;
  c.split_ratios = {0.25, 0.5};
  c.coupling_widths = {6, 6};
  c.channel_context_width = c.spatial_context_width = c.param_width = c.lrp_width = 6;
  c.postprocess_width = 4;
  c.lambdas.assign(12, 0.05);
  if (!o.full) c.use_postprocess = false;
  CodecModel<double> model(c, o.seed);
  Rng rng(o.seed);
  const Tensor<double> x = image_batch<double>(2, 8, rng);
  model.transform.initialize(x);
  perturb_parameters(model, rng.split("perturb"), 0.1);
  const ParamList<double> params = model.parameters();
  GradCheckOptions gopt;
  gopt.probes = o.full ? 6 : 2;
  Rng probe = rng.split("probe");

  std::ostringstream s;
  bool ok = true;
  const auto run = [&](const std::string& name, const LossFn& loss) {
    const GradCheckResult r = grad_check(params, loss, probe, gopt);
    ok = ok && r.passed;
    s << name << ' ' << std::scientific << std::setprecision(1) << r.max_rel_error << std::defaultfloat << "; ";
    if (!r.passed) s << "(" << r.worst << ") ";
  };

  const std::vector<double> qs{1.0, 7.5};
  run("transform", [&](Tape<double>& t) {
    const Latents<double> lat = model.transform.forward(&t, Var<double>::constant(x), PassMode::kTraining);
    return add(random_projection(lat.y[0], Rng(1)), random_projection(lat.y[2], Rng(2)));
  });
  const Latents<double> fixed = model.transform.forward(nullptr, Var<double>::constant(x), PassMode::kInference);
  run("reverse", [&](Tape<double>& t) { return random_projection(model.transform.reverse(&t, fixed.y), Rng(3)); });
  for (int s_i = 1; s_i <= c.scales(); ++s_i) {
    const ScaleEntropyModel<double>& em = model.entropy[s_i - 1];
    const Var<double> y = fixed.y[s_i - 1];
    const Var<double> hidden = s_i == c.scales() ? Var<double>() : (s_i == c.scales() - 1 ? fixed.y.back() : fixed.hidden[s_i - 1]);
    run("entropy" + std::to_string(s_i), [&](Tape<double>& t) {
      const Var<double> ch = em.channel_features(&t, hidden, y.shape());
      const Var<double> sp = em.spatial_features(&t, mul(y, Var<double>::constant(anchor_mask<double>(y.shape().h, y.shape().w))));
      const GaussianParams<double> p = em.params(&t, ch, sp);
      const Var<double> g = em.gains(&t, qs);
      const Var<double> bits = sum(gaussian_bits(mul(sub(y, p.mu), g), gained_sigma(p.sigma, g)));
      const Var<double> r = em.lrp_correction(&t, hidden, y, reciprocal(g));
      return add(bits, random_projection(r, Rng(4)));
    });
  }
  if (o.full) {
    run("postprocess", [&](Tape<double>& t) { return random_projection(model.post(&t, Var<double>::constant(x)), Rng(5)); });
    // The whole rate-distortion objective with the straight-through surrogate
    // swapped for noise, which is differentiable everywhere.
    model.config.surrogate = "noise";
    run("objective", [&](Tape<double>& t) {
      Rng noise(9);
      return training_forward(model, t, x, qs, noise).loss;
    });
  }
  return {ok, s.str()};
}

}  // namespace

std::vector<SelftestResult> run_selftest(const SelftestOptions& options, std::ostream& out) {
  const std::vector<std::pair<std::string, std::function<Outcome(const SelftestOptions&)>>> checks{
      {"transform bijectivity", check_bijectivity},
      {"element conservation", check_conservation},
      {"context causality (multi)", [](const SelftestOptions& o) { return check_causality(o, "multi"); }},
      {"context causality (single)", [](const SelftestOptions& o) { return check_causality(o, "single"); }},
      {"receptive field", check_receptive_field},
      {"range coder round trip", check_coder},
      {"estimate fidelity", check_estimate},
      {"codec round trip", check_codec},
      {"residual prediction bound", check_lrp_bound},
      {"weights round trip", check_weights_roundtrip},
      {"gradient checks", check_gradients},
  };
  std::vector<SelftestResult> results;
  out << std::left << std::setw(30) << "check" << std::setw(8) << "result" << std::setw(9) << "seconds"
      << "detail\n";
  for (const auto& [name, fn] : checks) {
    if (!options.only.empty() && std::ranges::find(options.only, name) == options.only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    SelftestResult r{name, false, {}, 0.0};
    try {
      const Outcome o = fn(options);
      r.passed = o.passed;
      r.detail = o.detail;
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << std::left << std::setw(30) << r.name << std::setw(8) << (r.passed ? "PASS" : "FAIL") << std::setw(9)
        << std::fixed << std::setprecision(2) << r.seconds << std::defaultfloat << r.detail << std::endl;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace msic
