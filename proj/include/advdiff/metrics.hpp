#pragma once

// Victim-side transfer measurements and image quality metrics.

#include <optional>
#include <string>
#include <vector>

#include "advdiff/encoders.hpp"
#include "json.hpp"

namespace advdiff {

inline constexpr std::size_t kSsimWindow = 8;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;
// PSNR of identical images is +inf; reports write this value instead.
inline constexpr double kPsnrSentinel = 100.0;

// cosine(victim(x_adv), victim(x_tar)), computed untraced.
double transfer_similarity(const Encoder<Real>& victim, const Tensor<Real>& x_adv, const Tensor<Real>& x_tar);

// Throws ConfigError if the victim shares architecture and seed with a member.
void check_victim_held_out(const EncoderEnsemble<Real>& ensemble);

struct ClassPrototypes {
  std::vector<std::size_t> classes;
  std::vector<Tensor<Real>> embeddings;  // unit-norm mean victim embedding per class
};

ClassPrototypes build_prototypes(const Encoder<Real>& victim, const std::vector<Tensor<Real>>& images,
                                 const std::vector<std::size_t>& labels);

// Class of the prototype nearest (by cosine) to the victim embedding of x.
std::size_t nearest_prototype(const Encoder<Real>& victim, const Tensor<Real>& x, const ClassPrototypes& prototypes);

bool embed_asr(const Encoder<Real>& victim, const Tensor<Real>& x_adv, const ClassPrototypes& prototypes,
               std::size_t target_class);

// Mean SSIM over all 8x8 windows (stride 1) of every channel; K1 = 0.01,
// K2 = 0.03, dynamic range 1.
double ssim(const Tensor<Real>& x, const Tensor<Real>& y);
// Peak 1.0; +inf for identical inputs.
double psnr(const Tensor<Real>& x, const Tensor<Real>& y);

struct LpNorms {
  double linf = 0.0;
  double l2 = 0.0;
};
LpNorms lp_norms(const Tensor<Real>& x, const Tensor<Real>& y);

struct EvalRecord {
  std::size_t index = 0;
  std::string method;
  std::string defense;  // "none" when undefended
  std::size_t source_class = 0;
  std::size_t target_class = 0;
  double transfer_sim = 0.0;
  double transfer_floor = 0.0;  // transfer similarity of the clean source
  double ensemble_objective = 0.0;
  bool embed_asr = false;
  double ssim = 0.0;
  double psnr = 0.0;
  double linf = 0.0;
  double l2 = 0.0;
  double wall_time = 0.0;
  std::optional<std::string> error;
};

struct Aggregate {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  // Keyed by "<method>/<defense>/<field>".
  std::vector<std::pair<std::string, Aggregate>> aggregates;
  nlohmann::json config;

  // Recomputes the aggregates from the successful records.
  void aggregate();
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

}  // namespace advdiff
