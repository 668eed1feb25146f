#include "advdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace advdiff {

namespace {

void require_same(const Tensor<Real>& x, const Tensor<Real>& y, const char* what) {
  if (x.shape() != y.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(y.shape()));
}

}  // namespace

double transfer_similarity(const Encoder<Real>& victim, const Tensor<Real>& x_adv, const Tensor<Real>& x_tar) {
  require_same(x_adv, x_tar, "transfer_similarity");
  return static_cast<double>(cosine(victim.embed(x_adv.detach()), victim.embed(x_tar.detach())).item());
}

void check_victim_held_out(const EncoderEnsemble<Real>& ensemble) {
  for (const auto& m : ensemble.members)
    if (m.seed() == ensemble.victim.seed() || m.arch() == ensemble.victim.arch())
      throw ConfigError("victim encoder overlaps the attack ensemble");
}

ClassPrototypes build_prototypes(const Encoder<Real>& victim, const std::vector<Tensor<Real>>& images,
                                 const std::vector<std::size_t>& labels) {
  if (images.size() != labels.size()) throw ConfigError("build_prototypes: one label per image required");
  std::map<std::size_t, std::vector<double>> sums;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor<Real> e = victim.embed(images[i].detach());
    auto& acc = sums[labels[i]];
    acc.resize(e.numel(), 0.0);
    for (std::size_t j = 0; j < e.numel(); ++j) acc[j] += static_cast<double>(e[j]);
  }
  ClassPrototypes out;
  for (auto& [cls, acc] : sums) {
    const std::size_t dim = acc.size();
    out.classes.push_back(cls);
    out.embeddings.push_back(l2_normalize(Tensor<Real>({1, dim}, std::vector<Real>(acc.begin(), acc.end()))));
  }
  return out;
}

std::size_t nearest_prototype(const Encoder<Real>& victim, const Tensor<Real>& x, const ClassPrototypes& prototypes) {
  if (prototypes.embeddings.empty()) throw ConfigError("embed_asr: empty prototype set");
  const Tensor<Real> e = victim.embed(x.detach());
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < prototypes.embeddings.size(); ++i) {
    const double s = static_cast<double>(cosine(e, prototypes.embeddings[i]).item());
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return prototypes.classes[best];
}

bool embed_asr(const Encoder<Real>& victim, const Tensor<Real>& x_adv, const ClassPrototypes& prototypes,
               std::size_t target_class) {
  return nearest_prototype(victim, x_adv, prototypes) == target_class;
}

double ssim(const Tensor<Real>& x, const Tensor<Real>& y) {
  require_same(x, y, "ssim");
  if (x.rank() != 4 || x.dim(2) < kSsimWindow || x.dim(3) < kSsimWindow)
    throw ShapeError("ssim expects N x C x H x W with H, W >= 8");
  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const double n = static_cast<double>(kSsimWindow * kSsimWindow);
  auto xv = x.data();
  auto yv = y.data();
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* a = xv.data() + p * h * w;
    const Real* b = yv.data() + p * h * w;
    for (std::size_t r = 0; r + kSsimWindow <= h; ++r)
      for (std::size_t c = 0; c + kSsimWindow <= w; ++c) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < kSsimWindow; ++i)
          for (std::size_t j = 0; j < kSsimWindow; ++j) {
            const double u = a[(r + i) * w + c + j], v = b[(r + i) * w + c + j];
            sa += u;
            sb += v;
            saa += u * u;
            sbb += v * v;
            sab += u * v;
          }
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
  }
  return total / static_cast<double>(windows);
}

double psnr(const Tensor<Real>& x, const Tensor<Real>& y) {
  require_same(x, y, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(x.numel())));
}

LpNorms lp_norms(const Tensor<Real>& x, const Tensor<Real>& y) {
  require_same(x, y, "lp_norms");
  LpNorms out;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = std::abs(static_cast<double>(x[i]) - static_cast<double>(y[i]));
    out.linf = std::max(out.linf, d);
    ss += d * d;
  }
  out.l2 = std::sqrt(ss);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

double finite_or_sentinel(double v) { return std::isinf(v) && v > 0 ? kPsnrSentinel : v; }

}  // namespace

void EvalReport::aggregate() {
  std::map<std::string, std::vector<double>> series;
  for (const auto& r : records) {
    if (r.error) continue;
    const std::string key = r.method + "/" + r.defense + "/";
    series[key + "transfer_sim"].push_back(r.transfer_sim);
    series[key + "transfer_floor"].push_back(r.transfer_floor);
    series[key + "ensemble_objective"].push_back(r.ensemble_objective);
    series[key + "embed_asr"].push_back(r.embed_asr ? 1.0 : 0.0);
    series[key + "ssim"].push_back(r.ssim);
    series[key + "psnr"].push_back(finite_or_sentinel(r.psnr));
    series[key + "linf"].push_back(r.linf);
    series[key + "l2"].push_back(r.l2);
  }
  aggregates.clear();
  for (const auto& [key, values] : series) {
    Aggregate a;
    a.count = values.size();
    for (double v : values) a.mean += v;
    a.mean /= static_cast<double>(a.count);
    for (double v : values) a.stddev += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(a.stddev / static_cast<double>(a.count));
    aggregates.emplace_back(key, a);
  }
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json doc;
  doc["metric_notes"] = {
      {"ssim", "uniform 8x8 window, stride 1, K1=0.01, K2=0.03, per-channel mean"},
      {"psnr", "peak 1.0; identical images reported as " + std::to_string(static_cast<int>(kPsnrSentinel)) + " dB"},
      {"embed_asr", "success iff the victim embedding's nearest class prototype is the target class"},
      {"transfer_sim", "cosine similarity of held-out victim embeddings of x_adv and x_tar"}};
  doc["config"] = config;
  doc["records"] = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json j = {{"index", r.index},           {"method", r.method},
                        {"defense", r.defense},       {"source_class", r.source_class},
                        {"target_class", r.target_class}};
    if (r.error) {
      j["error"] = *r.error;
    } else {
      j.update({{"transfer_sim", r.transfer_sim},
                {"transfer_floor", r.transfer_floor},
                {"ensemble_objective", r.ensemble_objective},
                {"embed_asr", r.embed_asr},
                {"ssim", r.ssim},
                {"psnr", finite_or_sentinel(r.psnr)},
                {"linf", r.linf},
                {"l2", r.l2},
                {"wall_time", r.wall_time}});
    }
    doc["records"].push_back(j);
  }
  doc["aggregates"] = nlohmann::json::object();
  for (const auto& [key, a] : aggregates)
    doc["aggregates"][key] = {{"count", a.count}, {"mean", a.mean}, {"std", a.stddev}};
  return doc;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "index,method,defense,source_class,target_class,transfer_sim,transfer_floor,ensemble_objective,embed_asr,"
        "ssim,psnr,linf,l2,wall_time,error\n";
  for (const auto& r : records) {
    os << r.index << ',' << r.method << ',' << r.defense << ',' << r.source_class << ',' << r.target_class << ',';
    if (r.error) {
      std::string quoted;
      for (char c : *r.error) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
      os << ",,,,,,,,," << '"' << quoted << '"' << '\n';
      continue;
    }
    os << r.transfer_sim << ',' << r.transfer_floor << ',' << r.ensemble_objective << ',' << (r.embed_asr ? 1 : 0)
       << ',' << r.ssim << ',' << finite_or_sentinel(r.psnr) << ',' << r.linf << ',' << r.l2 << ',' << r.wall_time
       << ",\n";
  }
  return os.str();
}

}  // namespace advdiff
