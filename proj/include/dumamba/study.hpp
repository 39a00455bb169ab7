#pragma once

// Experiment protocols shared by the command-line tool and the test suite:
// built-in checks, the feature-noise grid, latent-space analysis and the
// paired small-data comparison.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dumamba/data.hpp"
#include "dumamba/eval.hpp"
#include "dumamba/network.hpp"
#include "dumamba/train.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace study {

/// One verified property. `measured` is an error, compared as
/// measured <= tolerance (or == 0 for exact checks with tolerance 0).
struct Check {
  std::string name;
  double tolerance = 0.0;
  double measured = 0.0;
  bool passed = false;
  std::string detail;
};

nlohmann::json to_json(const std::vector<Check>& checks);

using Progress = std::function<void(const std::string&)>;

inline double gradient_tolerance() { return kDoublePrecision ? 1e-6 : 1e-3; }

/// Every gradient case at `seeds_per_case` seeds, analytic in this build
/// against finite differences in double precision.
std::vector<Check> gradient_suite(std::uint64_t seed, int seeds_per_case = 3);

/// Max-abs disagreement between the recurrent scan and the convolution
/// kernel over `seeds` random LTI systems with lengths up to `max_length`.
Check scan_kernel_agreement(std::uint64_t seed, int seeds = 50, std::size_t max_length = 64);
/// a = 0, b = c = 1, delta = 1 on x = [1, 1, 1] must give exactly [1, 2, 3].
Check scan_worked_case();

/// Zero lambdas and an M2 without biases against the same weights with the
/// NRM removed, on `inputs` random volumes.
Check nrm_off_equivalence(const ModelConfig& cfg, std::uint64_t seed, int inputs = 10);

/// Fast metrics against brute-force definitions: every mask pair on 2x2x2
/// plus `random_pairs` random pairs on extents up to 8^3.
std::vector<Check> metric_oracles(std::uint64_t seed, int random_pairs = 400);

/// All of the above at their default sizes.
std::vector<Check> selfcheck(std::uint64_t seed, const Progress& progress = {});

// ---------------------------------------------------------------------------

struct PerturbCell {
  data::NoiseFamily family = data::NoiseFamily::kGaussian;
  int level = 1;
  double parameter = 0.0;
  double dsc = 0.0;
  double magnitude = 0.0;  // mean |noisy - clean| over the perturbed features
};

struct PerturbTable {
  double clean_dsc = 0.0;
  std::vector<PerturbCell> cells;  // family-major, levels 1..6

  const PerturbCell& at(data::NoiseFamily family, int level) const;
  nlohmann::json to_json() const;
  /// "family,level,parameter,dsc,magnitude"
  std::string csv() const;
};

/// Mean foreground DSC with each noise family and level injected after the
/// first residual block. Noise draws depend on the sample and `seed` only,
/// so all levels of a family share their random numbers.
PerturbTable perturbation_grid(const Model& model, const std::vector<data::VolumeSample>& samples,
                               std::uint64_t seed,
                               const std::vector<data::NoiseFamily>& families = {
                                   data::kNoiseFamilies.begin(), data::kNoiseFamilies.end()});

// ---------------------------------------------------------------------------

inline constexpr int kMinClusters = 2;
inline constexpr int kMaxClusters = 8;

struct LatentAnalysis {
  std::size_t samples = 0;
  eval::SilhouetteResult m1;
  std::optional<eval::SilhouetteResult> m2;
  /// Mean over channels of Pearson(m1[c], m2[c]); channels with zero
  /// variance are skipped.
  std::optional<double> mean_pearson;
  std::size_t pearson_channels = 0;
  std::vector<double> lambdas;

  nlohmann::json to_json() const;
};

/// Channel tokens are bottleneck channels flattened over space and
/// concatenated over samples. Without an NRM only m1 is analysed.
LatentAnalysis analyze_latents(const Model& model, const std::vector<data::VolumeSample>& samples,
                               std::uint64_t seed, int k_lo = kMinClusters, int k_hi = kMaxClusters,
                               NamedTensors* dump = nullptr);

// ---------------------------------------------------------------------------

struct ComparisonRun {
  std::uint64_t seed = 0;
  bool nrm = true;
  double train_dsc = 0.0;
  double test_dsc = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
};

struct ComparisonReport {
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  std::vector<ComparisonRun> runs;
  eval::Stats with_nrm;
  eval::Stats baseline;
  std::vector<double> gaps;  // per seed: with_nrm - baseline
  double mean_gap = 0.0;
  int wins = 0;
  double margin = 0.02;
  bool gate_passed = false;  // mean with_nrm >= mean baseline - margin

  nlohmann::json to_json() const;
  std::string text() const;
};

/// Trains both variants for every seed on the same phantom split and
/// compares their test-set DSC. Both variants of a seed share all weights
/// outside the NRM at initialisation and see batches in the same order.
ComparisonReport compare_variants(const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                  std::size_t train_samples, std::size_t test_samples,
                                  std::uint64_t data_seed, const Progress& progress = {});

}  // namespace study

DUMAMBA_END_NAMESPACE
