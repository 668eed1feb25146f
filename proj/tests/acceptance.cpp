// Acceptance checks 1-12. One PASS/FAIL line per criterion; exit code 1 if
// any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "advdiff/aege.hpp"
#include "advdiff/attack.hpp"
#include "advdiff/dataset.hpp"
#include "advdiff/defenses.hpp"
#include "advdiff/experiment.hpp"
#include "advdiff/gcmg.hpp"
#include "advdiff/metrics.hpp"

using namespace advdiff;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kWeightIdentityTol = 1e-6;
constexpr double kGradTol64 = 1e-4;
constexpr double kGradTol32 = 5e-3;
constexpr double kMomentTol = 0.10;
constexpr double kIdentityRmsThreshold = 1e-6;
// Half the mean gain measured by the seeded calibration run (0.0526).
constexpr double kGuidanceMargin = 0.026;
constexpr double kTransferFraction = 0.70;
constexpr double kMaskTvTol = 0.02;
constexpr double kDelta = 0.0025;
constexpr double kBudget = 16.0 / 255.0 + 1e-6;
constexpr double kJpegTol = 0.02;
constexpr double kSsimTol = 1e-6;
constexpr double kAttackSeconds = 60.0;

// Runtime limits in seconds.
constexpr double kLimit1 = 1.0;
constexpr double kLimit2 = 30.0;
constexpr double kLimit3 = 30.0;
constexpr double kLimit5 = 300.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return da * db > 0 ? num / std::sqrt(da * db) : 0.0;
}

std::pair<double, double> moments(const Tensor<Real>& x) {
  double m = 0.0, v = 0.0;
  for (Real xi : x.data()) m += xi;
  m /= static_cast<double>(x.numel());
  for (Real xi : x.data()) v += (xi - m) * (xi - m);
  return {m, v / static_cast<double>(x.numel() - 1)};
}

// Shared toy setup for criteria 5, 6, 8 and 12: 32x32, T = 50, t* = 10.
struct Toy {
  ExperimentConfig cfg;
  ToyDataset data;
  ExperimentModels models;
  std::vector<ExperimentItem> items;
  std::vector<double> trace_linf;  // every linf_g seen in any attack trace

  Toy() : cfg(make_cfg()), data(gen_toy_dataset(cfg.dataset, cfg.dataset_seed)), models(prepare_models(cfg, data)),
          items(make_items(cfg, data)) {}

  static ExperimentConfig make_cfg() {
    ExperimentConfig c;
    c.seed = 0;
    c.attack.T = 50;
    c.attack.N = 4;
    c.dataset = DatasetSpec{32, 32, 0.25};
    c.save_images = false;
    return c;
  }

  AttackResult attack(std::size_t i, int n_outer) {
    AttackConfig a = cfg.attack;
    a.N = n_outer;
    a.seed = i;
    a.label = items[i].source_class;
    Rng rng(derive_seed(i, 0));
    AttackResult res = advdiffvlm_attack(items[i].load_source(), items[i].target, models.ensemble, *models.classifier,
                                         *models.eps_source, models.sched, a, rng);
    for (const auto& r : res.trace) trace_linf.push_back(r.linf_g);
    return res;
  }
};

Toy& toy() {
  static Toy t;
  return t;
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::size_t{2} << (trial % 3);
    std::vector<double> p1(n), p2(n);
    for (std::size_t i = 0; i < n; ++i) {
      p1[i] = rng.uniform(-1, 1);
      p2[i] = rng.uniform(-1, 1);
    }
    const auto w = update_weights(p1, p2, rng.uniform(0.1, 4.0), AegeParams{}.ratio_clip);
    double acc = 0.0;
    for (double v : w) acc += 1.0 / v;
    worst = std::max(worst, std::abs(acc - static_cast<double>(n)));
  }
  bool exact = true;
  for (std::size_t n : {2, 4, 8})
    for (double v : update_weights(std::vector<double>(n, 0.7), std::vector<double>(n, 0.4), 2.0)) exact &= v == 1.0;
  const double secs = seconds_since(t0);
  return {worst <= kWeightIdentityTol && exact && secs < kLimit1,
          "max |sum 1/w - N_m| = " + fmt("%.2e", worst) + ", equal ratios exact: " + (exact ? "yes" : "no") + ", " +
              fmt("%.3f s", secs)};
}

// One set of binary64 central differences per input serves as the reference
// for both the binary64 and the binary32 gradients. Differences taken in
// binary32 itself cannot resolve 5e-3 per element.
Outcome criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto e64 = build_default_ensemble<double>(100);
  const auto e32 = e64.cast<float>();
  const std::vector<double> w{0.7, 1.3, 0.9, 1.1};
  const double h = 1e-6;
  double err64 = 0.0, err32 = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(200 + seed);
    const auto x32 = Tensor<float>::uniform({1, 3, 8, 8}, rng, 0.2, 0.8);
    const auto tar32 = Tensor<float>::uniform({1, 3, 8, 8}, rng, 0, 1);
    const auto x64 = x32.cast<double>();
    const auto t64 = target_embeddings(e64, tar32.cast<double>());

    const auto leaf64 = x64.leaf();
    const auto g64 = backward(ensemble_objective<double>(e64, w, leaf64, t64), {leaf64})[0];
    const auto leaf32 = x32.leaf();
    const auto g32 = backward(ensemble_objective<float>(e32, w, leaf32, target_embeddings(e32, tar32)), {leaf32})[0];

    const auto base = x64.data();
    for (std::size_t i = 0; i < x64.numel(); ++i) {
      std::vector<double> up(base.begin(), base.end()), down = up;
      up[i] += h;
      down[i] -= h;
      const double fu = ensemble_objective<double>(e64, w, Tensor<double>(x64.shape(), std::move(up)), t64).item();
      const double fd = ensemble_objective<double>(e64, w, Tensor<double>(x64.shape(), std::move(down)), t64).item();
      const double numeric = (fu - fd) / (2 * h);
      const double denom = std::abs(numeric) + 1e-8;
      err64 = std::max(err64, std::abs(g64[i] - numeric) / denom);
      err32 = std::max(err32, std::abs(static_cast<double>(g32[i]) - numeric) / denom);
    }
  }
  const double secs = seconds_since(t0);
  return {err64 < kGradTol64 && err32 < kGradTol32 && secs < kLimit2,
          "max rel err binary64 " + fmt("%.2e", err64) + ", binary32 " + fmt("%.2e", err32) + ", " + fmt("%.2f s", secs)};
}

// Ancestral chain (sigma_t^2 = beta_t) with the exact Gaussian score.
Outcome criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  const double mu0 = 0.5, var0 = 0.25;
  const std::size_t n = 10000;
  const auto sched = make_default_schedule(100);
  const auto oracle = GaussianOracle::constant({1, n}, mu0, var0);
  Rng rng(3);
  ReverseOptions opts;
  opts.stochastic = true;
  const auto x0 = reverse_sample(Tensor<Real>::randn({1, n}, rng), 100, oracle, sched, opts, rng);
  const auto [m, v] = moments(x0);
  const double mean_tol = 4 * std::sqrt(var0) / std::sqrt(static_cast<double>(n));
  const double secs = seconds_since(t0);
  return {std::abs(m - mu0) <= mean_tol && std::abs(v / var0 - 1) <= kMomentTol && secs < kLimit3,
          "mean " + fmt("%.4f", m) + " (tol " + fmt("%.4f", mean_tol) + "), var ratio " + fmt("%.4f", v / var0) + ", " +
              fmt("%.2f s", secs)};
}

Outcome criterion4() {
  const auto sched = make_default_schedule(50);
  Rng rng(4);
  bool identical = true;
  for (int t = 1; t <= 50; t += 7) {
    const auto eps = Tensor<Real>::randn({1, 3, 16, 16}, rng);
    const auto g = Tensor<Real>::uniform(eps.shape(), rng, -kDelta, kDelta);
    const auto a = compose_score(eps, g, t, sched, 0.0);
    const auto b = score_from_eps(eps, t, sched);
    for (std::size_t i = 0; i < a.numel(); ++i) identical &= a[i] == b[i];
  }

  // m = 1 everywhere, s = 0: the output is the posterior mean of x given the
  // final latent x_1 ~ q(x_1 | x), clamped. Replay the draws to rebuild it.
  auto& ty = toy();
  AttackConfig cfg = ty.cfg.attack;
  cfg.s = 0.0;
  cfg.full_mask = true;
  cfg.N = 1;
  const auto& x = ty.data.images[2];
  const double mu0 = 0.5, var0 = 0.05;
  const auto oracle = GaussianOracle::constant(x.shape(), mu0, var0);
  Rng attack_rng(44);
  const auto res =
      advdiffvlm_attack(x, ty.data.images[6], ty.models.ensemble, *ty.models.classifier, oracle, ty.models.sched, cfg, attack_rng);
  Rng replay(44);
  Tensor<Real> eps;
  for (int i = 0; i <= cfg.t_star(); ++i) eps = Tensor<Real>::randn(x.shape(), replay);
  const double ab = ty.models.sched.alpha_bar(1);
  double sq = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double x1 = std::sqrt(ab) * x[i] + std::sqrt(1 - ab) * eps[i];
    const double post = (x1 - (1 - ab) * (x1 - std::sqrt(ab) * mu0) / (ab * var0 + 1 - ab)) / std::sqrt(ab);
    const double d = res.x_adv[i] - std::clamp(post, 0.0, 1.0);
    sq += d * d;
  }
  const double rms = std::sqrt(sq / static_cast<double>(x.numel()));
  return {identical && rms < kIdentityRmsThreshold,
          std::string("s=0 score bit-identical: ") + (identical ? "yes" : "no") + ", round-trip RMS " + fmt("%.2e", rms) +
              " (threshold " + fmt("%.0e", kIdentityRmsThreshold) + ")"};
}

Outcome criterion5() {
  const auto t0 = std::chrono::steady_clock::now();
  auto& ty = toy();
  const std::size_t seeds = 16;
  double gain = 0.0;
  std::size_t improved = 0;
  for (std::size_t i = 0; i < seeds; ++i) {
    const auto res = ty.attack(i, 4);
    const auto x = ty.items[i].load_source();
    const auto& tar = ty.items[i].target;
    gain += ensemble_similarity(ty.models.ensemble, res.x_adv, tar) - ensemble_similarity(ty.models.ensemble, x, tar);
    improved += transfer_similarity(ty.models.ensemble.victim, res.x_adv, tar) >
                transfer_similarity(ty.models.ensemble.victim, x, tar);
  }
  gain /= static_cast<double>(seeds);
  const double frac = static_cast<double>(improved) / static_cast<double>(seeds);
  const double secs = seconds_since(t0);
  return {gain > kGuidanceMargin && frac >= kTransferFraction && secs < kLimit5,
          "mean objective gain " + fmt("%.4f", gain) + " (margin " + fmt("%.4f", kGuidanceMargin) + "), victim improved on " +
              std::to_string(improved) + "/16 seeds (need " + fmt("%.0f%%", 100 * kTransferFraction) + "), " +
              fmt("%.1f s", secs)};
}

Outcome criterion6() {
  auto& ty = toy();
  const std::vector<int> ns{1, 2, 4, 8};
  std::vector<double> means;
  for (int n : ns) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
      acc += ensemble_similarity(ty.models.ensemble, ty.attack(i, n).x_adv, ty.items[i].target);
    means.push_back(acc / 8.0);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < means.size(); ++i) monotone &= means[i] >= means[i - 1];
  const double rho = spearman(std::vector<double>(ns.begin(), ns.end()), means);
  std::string detail = "mean objective";
  for (std::size_t i = 0; i < ns.size(); ++i) detail += " N=" + std::to_string(ns[i]) + ":" + fmt("%.4f", means[i]);
  return {monotone && rho > 0.0, detail + ", spearman " + fmt("%.2f", rho)};
}

Outcome criterion7() {
  const std::size_t h = 8, w = 8, k = 3;
  Rng cam_rng(7);
  Cam cam{h, w, std::vector<double>(h * w)};
  for (auto& v : cam.values) v = cam_rng.uniform();
  const auto p = cam_to_prob(cam, 0.3, 0.7);
  Rng rng(70);
  std::vector<double> counts(h * w, 0.0);
  const int draws = 100000;
  bool binary = true, interior_ok = true;
  std::size_t interior = 0;
  for (int d = 0; d < draws; ++d) {
    const auto m = sample_mask(p, k, rng);
    const auto [r, c] = m.centers.front();
    counts[r * w + c] += 1.0;
    for (auto b : m.bits) binary &= b == 0 || b == 1;
    if (r >= k / 2 && r - k / 2 + k <= h && c >= k / 2 && c - k / 2 + k <= w) {
      ++interior;
      interior_ok &= m.ones() == k * k;
    }
  }
  double tv = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) tv += std::abs(counts[i] / draws - p.values[i]);
  tv *= 0.5;
  return {tv <= kMaskTvTol && binary && interior_ok && interior > 0,
          "TV " + fmt("%.4f", tv) + " over 8x8 P, binary: " + (binary ? "yes" : "no") + ", interior k^2: " +
              (interior_ok ? "yes" : "no") + " (" + std::to_string(interior) + " interior draws)"};
}

Outcome criterion8() {
  const auto& seen = toy().trace_linf;
  const double mx = seen.empty() ? 0.0 : *std::max_element(seen.begin(), seen.end());
  return {!seen.empty() && mx <= kDelta,
          "max linf_g " + fmt("%.6g", mx) + " over " + std::to_string(seen.size()) + " trace records"};
}

Outcome criterion9() {
  auto& ty = toy();
  const MifgsmConfig cfg;
  double worst = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto x = ty.items[i].load_source();
    const auto adv = mifgsm_ens_attack(x, ty.items[i].target, ty.models.ensemble, cfg);
    worst = std::max(worst, static_cast<double>(max_abs(sub(adv, x))));
  }
  return {worst <= kBudget, "max linf " + fmt("%.7f", worst) + " (budget " + fmt("%.7f", kBudget) + ") over 8 images"};
}

Outcome criterion10() {
  Rng rng(10);
  bool idempotent = true;
  for (int bits = 1; bits <= 8; ++bits) {
    const auto x = Tensor<Real>::uniform({1, 3, 32, 32}, rng, 0, 1);
    const auto once = bit_reduction(x, bits), twice = bit_reduction(once, bits);
    for (std::size_t i = 0; i < x.numel(); ++i) idempotent &= once[i] == twice[i];
  }

  double jpeg_err = 0.0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng srng(100 + seed);
    const double fx = srng.uniform(0.5, 1.5), fy = srng.uniform(0.5, 1.5), ph = srng.uniform(0, 6.28);
    std::vector<Real> v(3 * 32 * 32);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t q = 0; q < 32; ++q)
          v[(c * 32 + r) * 32 + q] = static_cast<Real>(0.5 + 0.3 * std::sin(fx * 2 * M_PI * r / 32 + ph + c) *
                                                                 std::cos(fy * 2 * M_PI * q / 32));
    const Tensor<Real> x({1, 3, 32, 32}, std::move(v));
    jpeg_err = std::max(jpeg_err, static_cast<double>(max_abs(sub(jpeg_compress(x, 100), x))));
  }

  // DiffPure at the default attack resolution T = 200.
  const double mu0 = 0.5, var0 = 0.04;
  const auto sched = make_default_schedule(200);
  const auto oracle = GaussianOracle::constant({1, 1, 100, 100}, mu0, var0);
  const auto clean = oracle.sample<Real>(rng);
  const auto [m, v] = moments(diffpure(clean, 0.15, oracle, sched, rng));
  const bool moments_ok = std::abs(m / mu0 - 1) <= kMomentTol && std::abs(v / var0 - 1) <= kMomentTol;
  return {idempotent && jpeg_err <= kJpegTol && moments_ok,
          std::string("bit_reduction idempotent: ") + (idempotent ? "yes" : "no") + ", jpeg q100 max err " +
              fmt("%.4f", jpeg_err) + ", diffpure mean " + fmt("%.4f", m) + " var ratio " + fmt("%.4f", v / var0)};
}

Outcome criterion11() {
  auto& ty = toy();
  double self_err = 0.0, transfer_err = 0.0;
  bool monotone = true;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& x = ty.data.images[i];
    self_err = std::max(self_err, std::abs(ssim(x, x) - 1.0));
    transfer_err = std::max(transfer_err, std::abs(transfer_similarity(ty.models.ensemble.victim, x, x) - 1.0));
    Rng rng(110 + i);
    const auto noise = Tensor<Real>::randn(x.shape(), rng);
    double prev = 1.0;
    for (double amp : {0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4}) {
      const double s = ssim(x, add(x, scale(noise, static_cast<Real>(amp))));
      monotone &= s <= prev + 1e-12;
      prev = s;
    }
  }
  return {self_err <= kSsimTol && monotone && transfer_err <= kSsimTol,
          "|ssim(x,x)-1| " + fmt("%.1e", self_err) + ", non-increasing: " + (monotone ? "yes" : "no") +
              ", |transfer(x,x)-1| " + fmt("%.1e", transfer_err)};
}

void strip_wall_time(nlohmann::json& j) {
  if (j.is_object()) {
    j.erase("wall_time");
    for (auto it = j.begin(); it != j.end();) {
      if (it.key().find("wall_time") != std::string::npos) {
        it = j.erase(it);
      } else {
        strip_wall_time(*it);
        ++it;
      }
    }
  } else if (j.is_array()) {
    for (auto& v : j) strip_wall_time(v);
  }
}

Outcome criterion12() {
  ExperimentConfig cfg = Toy::make_cfg();
  cfg.dataset = DatasetSpec{8, 32, 0.25};
  cfg.attack.N = 1;
  cfg.baseline.steps = 10;
  cfg.defenses = {DefenseConfig{}, DefenseConfig{}, DefenseConfig{}};
  cfg.defenses[1].kind = DefenseKind::kJpeg;
  cfg.defenses[2].kind = DefenseKind::kDiffPure;
  const fs::path dir = fs::temp_directory_path() / "advdiff_acceptance_det";
  std::vector<std::string> dumps;
  for (int run = 0; run < 2; ++run) {
    cfg.output_dir = dir / std::to_string(run);
    fs::remove_all(cfg.output_dir);
    run_experiment(cfg);
    std::ifstream in(cfg.output_dir / "report.json");
    auto j = nlohmann::json::parse(in);
    strip_wall_time(j);
    j.erase("config");  // output_dir differs between the two runs
    dumps.push_back(j.dump());
  }
  fs::remove_all(dir);
  const bool same = dumps[0] == dumps[1];

  auto& ty = toy();
  const auto t0 = std::chrono::steady_clock::now();
  ty.attack(0, 4);
  const double secs = seconds_since(t0);
  return {same && secs < kAttackSeconds, std::string("report identical: ") + (same ? "yes" : "no") +
                                             ", default attack " + fmt("%.2f s", secs) + " (limit 60 s)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"AEGE weight identity", criterion1},      {"autodiff correctness", criterion2},
      {"sampler correctness", criterion3},       {"identity configuration", criterion4},
      {"guidance effectiveness", criterion5},    {"outer-iteration trend", criterion6},
      {"GCMG distribution", criterion7},         {"gradient clipping", criterion8},
      {"baseline budget", criterion9},           {"defense suite", criterion10},
      {"metrics", criterion11},                  {"determinism and performance", criterion12},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
