#include "dumamba/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dumamba/error.hpp"
#include "dumamba/rng.hpp"

namespace dumamba::eval {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::int64_t volume(Extent e) { return e[0] * e[1] * e[2]; }

void check_mask(Mask m, Extent e, const char* what) {
  if (static_cast<std::int64_t>(m.size()) != volume(e)) {
    throw ShapeError(std::string(what) + ": mask has " + std::to_string(m.size()) +
                     " voxels, extent needs " + std::to_string(volume(e)));
  }
}

// Squared distances along one line: out[q] = min_p (s (q - p))^2 + f[p].
void edt_1d(const double* f, double* out, std::int64_t n, std::int64_t stride, double s,
            std::vector<std::int64_t>& v, std::vector<double>& z) {
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  const double s2 = s * s;
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kInf) continue;
    while (k >= 0) {
      const std::int64_t p = v[k];
      const double fp = f[p * stride];
      const double inter = ((fq + s2 * q * q) - (fp + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (inter <= z[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        z[k] = inter;
        z[k + 1] = kInf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
    }
  }
  if (k < 0) {
    for (std::int64_t q = 0; q < n; ++q) out[q * stride] = kInf;
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = s * static_cast<double>(q - v[j]);
    out[q * stride] = d * d + f[v[j] * stride];
  }
}

std::vector<double> directed_bruteforce(const std::vector<std::int64_t>& from,
                                        const std::vector<std::int64_t>& to, Extent e,
                                        Spacing sp) {
  std::vector<double> out;
  out.reserve(from.size());
  for (auto a : from) {
    const double az = static_cast<double>(a / (e[1] * e[2]));
    const double ay = static_cast<double>((a / e[2]) % e[1]);
    const double ax = static_cast<double>(a % e[2]);
    double best = kInf;
    for (auto b : to) {
      const double dz = (az - static_cast<double>(b / (e[1] * e[2]))) * sp[0];
      const double dy = (ay - static_cast<double>((b / e[2]) % e[1])) * sp[1];
      const double dx = (ax - static_cast<double>(b % e[2])) * sp[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

bool any(Mask m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

Overlap dsc_iou(Mask pred, Mask gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("dsc_iou: masks have " + std::to_string(pred.size()) + " and " +
                     std::to_string(gt.size()) + " voxels");
  }
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return {1.0, 1.0};
  const double inter = static_cast<double>(both);
  return {2.0 * inter / static_cast<double>(a + b), inter / static_cast<double>(a + b - both)};
}

std::vector<std::int64_t> surface_voxels(Mask mask, Extent e) {
  check_mask(mask, e, "surface_voxels");
  std::vector<std::int64_t> out;
  auto fg = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= e[0] || y >= e[1] || x >= e[2]) return false;
    return mask[(z * e[1] + y) * e[2] + x] != 0;
  };
  for (std::int64_t z = 0; z < e[0]; ++z) {
    for (std::int64_t y = 0; y < e[1]; ++y) {
      for (std::int64_t x = 0; x < e[2]; ++x) {
        if (!fg(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) ||
            !fg(z, y, x - 1) || !fg(z, y, x + 1)) {
          out.push_back((z * e[1] + y) * e[2] + x);
        }
      }
    }
  }
  return out;
}

std::vector<double> squared_edt(Mask feature, Extent e, Spacing sp) {
  check_mask(feature, e, "squared_edt");
  std::vector<double> d(feature.size());
  for (std::size_t i = 0; i < feature.size(); ++i) d[i] = feature[i] ? 0.0 : kInf;
  std::vector<double> tmp(d.size());
  std::vector<std::int64_t> v;
  std::vector<double> z;
  const std::int64_t sz = e[1] * e[2], sy = e[2];
  // Along x, then y, then z.
  for (std::int64_t a = 0; a < e[0] * e[1]; ++a) {
    edt_1d(d.data() + a * sy, tmp.data() + a * sy, e[2], 1, sp[2], v, z);
  }
  for (std::int64_t zz = 0; zz < e[0]; ++zz) {
    for (std::int64_t x = 0; x < e[2]; ++x) {
      edt_1d(tmp.data() + zz * sz + x, d.data() + zz * sz + x, e[1], sy, sp[1], v, z);
    }
  }
  for (std::int64_t r = 0; r < sz; ++r) {
    edt_1d(d.data() + r, tmp.data() + r, e[0], sz, sp[0], v, z);
  }
  return tmp;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValueError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::optional<double> hd95(Mask pred, Mask gt, Extent e, Spacing sp) {
  check_mask(pred, e, "hd95");
  check_mask(gt, e, "hd95");
  if (!any(pred) || !any(gt)) return std::nullopt;
  const auto sp_pred = surface_voxels(pred, e);
  const auto sg = surface_voxels(gt, e);
  std::vector<std::uint8_t> surf_pred(pred.size(), 0), surf_gt(gt.size(), 0);
  for (auto i : sp_pred) surf_pred[i] = 1;
  for (auto i : sg) surf_gt[i] = 1;
  const auto to_gt = squared_edt(surf_gt, e, sp);
  const auto to_pred = squared_edt(surf_pred, e, sp);
  std::vector<double> dist;
  dist.reserve(sp_pred.size() + sg.size());
  for (auto i : sp_pred) dist.push_back(std::sqrt(to_gt[i]));
  for (auto i : sg) dist.push_back(std::sqrt(to_pred[i]));
  return percentile(std::move(dist), 95.0);
}

namespace reference {

std::optional<double> hd95(Mask pred, Mask gt, Extent e, Spacing sp) {
  check_mask(pred, e, "hd95");
  check_mask(gt, e, "hd95");
  if (!any(pred) || !any(gt)) return std::nullopt;
  const auto a = surface_voxels(pred, e);
  const auto b = surface_voxels(gt, e);
  auto dist = directed_bruteforce(a, b, e, sp);
  const auto back = directed_bruteforce(b, a, e, sp);
  dist.insert(dist.end(), back.begin(), back.end());
  return percentile(std::move(dist), 95.0);
}

}  // namespace reference

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("pearson: inputs differ in length");
  if (x.size() < 2) throw ValueError("pearson needs at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Clustering

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

void check_points(const Points& points) {
  if (points.size() < 2) throw ValueError("clustering needs at least two points");
  for (const auto& p : points) {
    if (p.size() != points[0].size()) throw ShapeError("points differ in dimension");
  }
}

}  // namespace

KMeansResult kmeans(const Points& points, int k, std::uint64_t seed) {
  check_points(points);
  const std::size_t n = points.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) {
    throw ValueError("kmeans: k=" + std::to_string(k) + " with " + std::to_string(n) + " points");
  }
  Philox rng = Philox(seed).fork(static_cast<std::uint64_t>(k));
  KMeansResult r;

  // k-means++ seeding.
  r.centroids.push_back(points[rng.below(n)]);
  std::vector<double> d2(n);
  while (r.centroids.size() < static_cast<std::size_t>(k)) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = kInf;
      for (const auto& c : r.centroids) best = std::min(best, sq_dist(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = rng.below(n);
    }
    r.centroids.push_back(points[pick]);
  }

  r.labels.assign(n, -1);
  for (int it = 0; it < kMaxLloydIterations; ++it) {
    bool changed = false;
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = kInf;
      for (int c = 0; c < k; ++c) {
        const double d = sq_dist(points[i], r.centroids[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      changed |= r.labels[i] != best;
      r.labels[i] = best;
      objective += bd;
    }
    r.objective.push_back(objective);

    std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
    Points sums(static_cast<std::size_t>(k), std::vector<double>(points[0].size(), 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      ++count[r.labels[i]];
      for (std::size_t j = 0; j < points[i].size(); ++j) sums[r.labels[i]][j] += points[i][j];
    }
    bool reseeded = false;
    for (int c = 0; c < k; ++c) {
      if (count[c] == 0) {
        if (r.reseeds >= kMaxReseeds) {
          throw ValueError("kmeans: cluster stayed empty after " + std::to_string(kMaxReseeds) +
                           " reseeds");
        }
        // Move the empty centroid onto the point worst served by its own.
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(points[i], r.centroids[r.labels[i]]);
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        r.centroids[c] = points[far];
        ++r.reseeds;
        reseeded = true;
        continue;
      }
      for (auto& v : sums[c]) v /= static_cast<double>(count[c]);
      r.centroids[c] = sums[c];
    }
    if (!changed && !reseeded && it > 0) break;
  }
  return r;
}

std::vector<double> silhouette(const Points& points, const std::vector<int>& labels) {
  check_points(points);
  if (labels.size() != points.size()) throw ShapeError("silhouette: one label per point");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> size(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++size[l];
  std::vector<double> s(points.size(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (size[labels[i]] <= 1) continue;
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (j != i) sum[labels[j]] += std::sqrt(sq_dist(points[i], points[j]));
    }
    const double a = sum[labels[i]] / static_cast<double>(size[labels[i]] - 1);
    double b = kInf;
    for (int c = 0; c < k; ++c) {
      if (c != labels[i] && size[c] > 0) b = std::min(b, sum[c] / static_cast<double>(size[c]));
    }
    if (b == kInf) continue;
    const double m = std::max(a, b);
    s[i] = m > 0.0 ? (b - a) / m : 0.0;
  }
  return s;
}

SilhouetteResult kmeans_silhouette(const Points& points, int k_lo, int k_hi, std::uint64_t seed) {
  check_points(points);
  const int n = static_cast<int>(points.size());
  k_hi = std::min(k_hi, n - 1);
  if (k_lo < 2 || k_lo > k_hi) {
    throw ValueError("kmeans_silhouette: empty k range for " + std::to_string(n) + " points");
  }
  SilhouetteResult best;
  best.mean_s = -kInf;
  for (int k = k_lo; k <= k_hi; ++k) {
    const KMeansResult km = kmeans(points, k, seed);
    const auto s = silhouette(points, km.labels);
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n);
    best.scores.emplace_back(k, mean);
    if (mean > best.mean_s) {
      best.mean_s = mean;
      best.best_k = k;
      best.labels = km.labels;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Lambda traces

LambdaReport lambda_report(const std::vector<std::vector<double>>& trace, double threshold,
                           std::size_t window) {
  if (trace.empty()) throw ValueError("lambda_report needs a nonempty trace");
  const std::size_t l = trace[0].size();
  LambdaReport r;
  r.steps = trace.size();
  r.final_values = trace.back();
  for (std::size_t i = 0; i < l; ++i) {
    // Last step whose update is at least the threshold; stable afterwards.
    std::size_t stable = 0;
    for (std::size_t t = 1; t < trace.size(); ++t) {
      if (std::abs(trace[t][i] - trace[t - 1][i]) >= threshold) stable = t;
    }
    double tail = 0.0;
    for (std::size_t t = stable + 1; t < trace.size() && t <= stable + window; ++t) {
      tail = std::max(tail, std::abs(trace[t][i] - trace[t - 1][i]));
    }
    r.stabilization_step.push_back(stable);
    r.tail_max_change.push_back(tail);
    r.overall_stabilization = std::max(r.overall_stabilization, stable);
  }
  return r;
}

std::string lambda_trace_csv(const std::vector<std::vector<double>>& trace) {
  std::ostringstream os;
  os.precision(9);
  os << "step";
  const std::size_t l = trace.empty() ? 0 : trace[0].size();
  for (std::size_t i = 0; i < l; ++i) os << ",lambda_" << i + 1;
  os << '\n';
  for (std::size_t t = 0; t < trace.size(); ++t) {
    os << t;
    for (double v : trace[t]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Reports

Stats stats(std::span<const double> v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

double MetricsReport::mean_dsc(int cls) const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.cls == cls) v.push_back(r.dsc);
  }
  return stats(v).mean;
}

nlohmann::json MetricsReport::summary() const {
  nlohmann::json j = nlohmann::json::object();
  int max_cls = 0;
  for (const auto& r : rows) max_cls = std::max(max_cls, r.cls);
  nlohmann::json classes = nlohmann::json::object();
  for (int c = 1; c <= max_cls; ++c) {
    std::vector<double> dsc, iou, hd;
    std::size_t undefined = 0;
    for (const auto& r : rows) {
      if (r.cls != c) continue;
      dsc.push_back(r.dsc);
      iou.push_back(r.iou);
      if (r.hd95) {
        hd.push_back(*r.hd95);
      } else {
        ++undefined;
      }
    }
    auto pack = [](const Stats& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; };
    classes[std::to_string(c)] = {{"dsc", pack(stats(dsc))},
                                  {"iou", pack(stats(iou))},
                                  {"hd95", pack(stats(hd))},
                                  {"hd95_undefined", undefined}};
  }
  j["mean_dsc"] = mean_dsc();
  j["classes"] = classes;
  std::vector<std::string> ids;
  for (const auto& r : rows) {
    if (std::find(ids.begin(), ids.end(), r.id) == ids.end()) ids.push_back(r.id);
  }
  j["samples"] = ids.size();
  j["ids"] = ids;
  return j;
}

std::string MetricsReport::csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "id,class,dsc,iou,hd95\n";
  for (const auto& r : rows) {
    os << r.id << ',' << r.cls << ',' << r.dsc << ',' << r.iou << ',';
    if (r.hd95) {
      os << *r.hd95;
    } else {
      os << "nan";
    }
    os << '\n';
  }
  return os.str();
}

std::vector<SampleMetrics> evaluate_sample(const std::string& id,
                                           std::span<const std::uint8_t> pred,
                                           std::span<const std::uint8_t> gt, Extent extent,
                                           Spacing spacing, int classes) {
  check_mask(pred, extent, "evaluate_sample");
  check_mask(gt, extent, "evaluate_sample");
  std::vector<SampleMetrics> out;
  std::vector<std::uint8_t> p(pred.size()), g(gt.size());
  for (int c = 1; c < classes; ++c) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      p[i] = pred[i] == c;
      g[i] = gt[i] == c;
    }
    const Overlap o = dsc_iou(p, g);
    out.push_back({id, c, o.dsc, o.iou, hd95(p, g, extent, spacing)});
  }
  return out;
}

}  // namespace dumamba::eval
