#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace dumamba::eval {

using Mask = std::span<const std::uint8_t>;  // nonzero = foreground
using Extent = std::array<std::int64_t, 3>;
using Spacing = std::array<double, 3>;

struct Overlap {
  double dsc = 0.0;
  double iou = 0.0;
};

/// Both masks empty counts as perfect agreement.
Overlap dsc_iou(Mask pred, Mask gt);

/// Foreground voxels with at least one 6-neighbour outside the mask. The
/// volume border counts as background.
std::vector<std::int64_t> surface_voxels(Mask mask, Extent extent);

/// Squared Euclidean distance (in mm^2) from every voxel to the nearest
/// voxel with `feature != 0`; +inf everywhere if there is none.
std::vector<double> squared_edt(Mask feature, Extent extent, Spacing spacing);

/// Linear-interpolated percentile of unsorted values, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// 95th percentile of the pooled surface distances pred->gt and gt->pred.
/// Empty when either mask is empty.
std::optional<double> hd95(Mask pred, Mask gt, Extent extent, Spacing spacing);

namespace reference {
/// All-pairs surface distances; the O(n^2) definition of hd95.
std::optional<double> hd95(Mask pred, Mask gt, Extent extent, Spacing spacing);
}  // namespace reference

/// Sample correlation; empty when either input has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Clustering

using Points = std::vector<std::vector<double>>;

struct KMeansResult {
  std::vector<int> labels;
  Points centroids;
  std::vector<double> objective;  // sum of squared distances after each Lloyd step
  int reseeds = 0;
};

inline constexpr int kMaxReseeds = 10;
inline constexpr int kMaxLloydIterations = 100;

/// Lloyd iterations from k-means++ seeds. An empty cluster is reseeded with
/// the point farthest from its centroid, at most kMaxReseeds times.
KMeansResult kmeans(const Points& points, int k, std::uint64_t seed);

/// s_i = (b_i - a_i) / max(a_i, b_i); 0 for members of singleton clusters.
std::vector<double> silhouette(const Points& points, const std::vector<int>& labels);

struct SilhouetteResult {
  int best_k = 0;
  std::vector<int> labels;
  double mean_s = 0.0;
  std::vector<std::pair<int, double>> scores;  // (k, mean silhouette)
};

/// Best mean silhouette over k in [k_lo, k_hi]; ties go to the smaller k.
/// The range is clipped to k <= n - 1.
SilhouetteResult kmeans_silhouette(const Points& points, int k_lo, int k_hi, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Lambda traces

struct LambdaReport {
  std::size_t steps = 0;
  std::vector<double> final_values;
  /// Per lambda: first step after which no update exceeds the threshold.
  std::vector<std::size_t> stabilization_step;
  std::size_t overall_stabilization = 0;
  /// Largest |step-to-step change| in the window that follows stabilization.
  std::vector<double> tail_max_change;
};

inline constexpr double kStabilizationThreshold = 1e-3;
inline constexpr std::size_t kStabilizationWindow = 10;

/// `trace[t][i]` is lambda_i after step t.
LambdaReport lambda_report(const std::vector<std::vector<double>>& trace,
                           double threshold = kStabilizationThreshold,
                           std::size_t window = kStabilizationWindow);

/// "step,lambda_1,...,lambda_l" rows.
std::string lambda_trace_csv(const std::vector<std::vector<double>>& trace);

// ---------------------------------------------------------------------------
// Reports

struct SampleMetrics {
  std::string id;
  int cls = 1;
  double dsc = 0.0;
  double iou = 0.0;
  std::optional<double> hd95;
};

struct MetricsReport {
  std::vector<SampleMetrics> rows;

  double mean_dsc(int cls = 1) const;
  nlohmann::json summary() const;
  /// "id,class,dsc,iou,hd95"; undefined hd95 is written as "nan".
  std::string csv() const;
};

/// Evaluates every foreground class of one prediction.
std::vector<SampleMetrics> evaluate_sample(const std::string& id,
                                           std::span<const std::uint8_t> pred,
                                           std::span<const std::uint8_t> gt, Extent extent,
                                           Spacing spacing, int classes);

struct Stats {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n = 0;
};
Stats stats(std::span<const double> v);

}  // namespace dumamba::eval
