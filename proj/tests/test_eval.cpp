#include <cmath>
#include <limits>

#include "doctest.h"

#include "dumamba/eval.hpp"
#include "dumamba/rng.hpp"

using namespace dumamba;
using namespace dumamba::eval;

namespace {

std::vector<std::uint8_t> random_mask(std::size_t n, double density, Philox& rng) {
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = rng.uniform() < density;
  return m;
}

Points blobs(Philox& rng, std::size_t per, std::vector<std::array<double, 2>> centres, double sd) {
  Points p;
  for (const auto& c : centres) {
    for (std::size_t i = 0; i < per; ++i) p.push_back({c[0] + sd * rng.normal(), c[1] + sd * rng.normal()});
  }
  return p;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("overlap of half-agreeing masks") {
  const std::vector<std::uint8_t> p{1, 1, 0, 0}, g{0, 1, 1, 0};
  const auto o = dsc_iou(p, g);
  CHECK(o.dsc == doctest::Approx(0.5));
  CHECK(o.iou == doctest::Approx(1.0 / 3.0));
  const std::vector<std::uint8_t> z(4, 0);
  CHECK(dsc_iou(z, z).dsc == 1.0);
  CHECK(dsc_iou(z, g).dsc == 0.0);
}

TEST_CASE("dice and IoU satisfy dsc = 2 iou / (1 + iou)") {
  Philox rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_mask(64, rng.uniform(), rng), g = random_mask(64, rng.uniform(), rng);
    const auto o = dsc_iou(p, g);
    CHECK(o.dsc == doctest::Approx(2 * o.iou / (1 + o.iou)).epsilon(1e-12));
  }
}

TEST_CASE("hd95 of two single voxels is their distance") {
  const Extent e{1, 1, 8};
  std::vector<std::uint8_t> p(8, 0), g(8, 0);
  p[1] = 1;
  g[4] = 1;
  CHECK(*hd95(p, g, e, {1, 1, 1}) == doctest::Approx(3.0));
  CHECK(*hd95(p, g, e, {1, 1, 0.5}) == doctest::Approx(1.5));
  CHECK_FALSE(hd95(p, std::vector<std::uint8_t>(8, 0), e, {1, 1, 1}).has_value());
  CHECK(*hd95(p, p, e, {1, 1, 1}) == 0.0);
}

TEST_CASE("hd95 agrees with the all-pairs definition") {
  Philox rng(2);
  for (int i = 0; i < 150; ++i) {
    const Extent e{static_cast<std::int64_t>(1 + rng.below(8)), static_cast<std::int64_t>(1 + rng.below(8)),
                   static_cast<std::int64_t>(1 + rng.below(8))};
    const Spacing sp{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
    const auto n = static_cast<std::size_t>(e[0] * e[1] * e[2]);
    const auto p = random_mask(n, rng.uniform(), rng), g = random_mask(n, rng.uniform(), rng);
    const auto a = hd95(p, g, e, sp), b = reference::hd95(p, g, e, sp);
    REQUIRE(a.has_value() == b.has_value());
    if (a) CHECK(std::abs(*a - *b) < 1e-9);
  }
}

TEST_CASE("distance transform matches brute force") {
  Philox rng(3);
  const Extent e{5, 6, 7};
  const Spacing sp{1.5, 1.0, 0.7};
  const auto m = random_mask(210, 0.05, rng);
  const auto d = squared_edt(m, e, sp);
  for (std::int64_t z = 0; z < 5; ++z)
    for (std::int64_t y = 0; y < 6; ++y)
      for (std::int64_t x = 0; x < 7; ++x) {
        double best = std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < 210; ++j) {
          if (!m[j]) continue;
          const double dz = (z - j / 42) * sp[0], dy = (y - (j / 7) % 6) * sp[1], dx = (x - j % 7) * sp[2];
          best = std::min(best, dz * dz + dy * dy + dx * dx);
        }
        CHECK(d[(z * 6 + y) * 7 + x] == doctest::Approx(best).epsilon(1e-12));
      }
  for (double v : squared_edt(std::vector<std::uint8_t>(210, 0), e, sp)) CHECK(std::isinf(v));
}

TEST_CASE("surface voxels exclude the interior") {
  std::vector<std::uint8_t> cube(27, 1);
  const auto s = surface_voxels(cube, {3, 3, 3});
  CHECK(s.size() == 26);
  CHECK(std::find(s.begin(), s.end(), 13) == s.end());
}

TEST_CASE("percentile interpolates linearly") {
  CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3.0);
  CHECK(percentile({4, 1, 3, 2}, 95) == doctest::Approx(3.85));
  CHECK(percentile({7}, 95) == 7.0);
}

TEST_CASE("pearson hand case") {
  const std::vector<double> x{1, 2, 3}, y{1, 2, 4};
  CHECK(*pearson(x, y) == doctest::Approx(0.98198).epsilon(1e-5));
  const std::vector<double> flat{2, 2, 2};
  CHECK_FALSE(pearson(x, flat).has_value());
}

TEST_CASE("silhouette hand case") {
  const Points p{{0.0}, {0.1}, {10.0}, {10.1}};
  const auto s = silhouette(p, {0, 0, 1, 1});
  CHECK(s[0] == doctest::Approx((10.05 - 0.1) / 10.05).epsilon(1e-12));
  CHECK(s[0] == doctest::Approx(0.9900).epsilon(1e-4));
  const auto single = silhouette({{0.0}, {1.0}, {1.5}}, {0, 1, 1});
  CHECK(single[0] == 0.0);
}

TEST_CASE("two separated blobs select two clusters") {
  Philox rng(4);
  const Points p = blobs(rng, 20, {{0, 0}, {8, 8}}, 0.5);
  const auto r = kmeans_silhouette(p, 2, 5, 1);
  CHECK(r.best_k == 2);
  CHECK(r.mean_s > 0.8);
  CHECK(r.scores.size() == 4);
  for (std::size_t i = 1; i < 20; ++i) CHECK(r.labels[i] == r.labels[0]);
  CHECK(r.labels[20] != r.labels[0]);
}

TEST_CASE("three blobs select three clusters") {
  Philox rng(5);
  const Points p = blobs(rng, 15, {{0, 0}, {10, 0}, {0, 10}}, 0.4);
  CHECK(kmeans_silhouette(p, 2, 8, 3).best_k == 3);
}

TEST_CASE("k-means objective never increases") {
  Philox rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    Points p;
    for (int i = 0; i < 60; ++i) p.push_back({rng.normal(), rng.normal(), rng.normal()});
    const auto r = kmeans(p, 2 + trial % 5, trial);
    for (std::size_t i = 1; i < r.objective.size(); ++i) {
      CHECK(r.objective[i] <= r.objective[i - 1] + 1e-9);
    }
    CHECK(r.labels.size() == p.size());
  }
}

TEST_CASE("k-means is deterministic under a seed") {
  Philox rng(7);
  Points p;
  for (int i = 0; i < 40; ++i) p.push_back({rng.normal(), rng.normal()});
  CHECK(kmeans(p, 4, 9).labels == kmeans(p, 4, 9).labels);
}

TEST_CASE("k range is clipped to n - 1") {
  const Points p{{0.0}, {0.1}, {5.0}, {5.2}};
  const auto r = kmeans_silhouette(p, 2, 8, 0);
  CHECK(r.scores.back().first == 3);
  CHECK(r.best_k == 2);
}

TEST_CASE("lambda stabilisation of a ramp that turns flat") {
  // Ramps by 0.01 per step for 30 steps, then holds.
  std::vector<std::vector<double>> trace;
  for (int t = 0; t < 80; ++t) {
    const double v = 0.5 + 0.01 * std::min(t, 30);
    trace.push_back({v, 0.5});
  }
  const auto r = lambda_report(trace);
  CHECK(r.steps == 80);
  CHECK(r.stabilization_step[0] == 30);
  CHECK(r.stabilization_step[1] == 0);
  CHECK(r.overall_stabilization == 30);
  CHECK(r.tail_max_change[0] < 1e-3);
  CHECK(r.final_values[0] == doctest::Approx(0.8));
}

TEST_CASE("a constant trace is stable from the start") {
  const std::vector<std::vector<double>> trace(20, {0.5, 0.5, 0.5});
  const auto r = lambda_report(trace);
  CHECK(r.overall_stabilization == 0);
}

TEST_CASE("lambda trace csv has one row per step") {
  const std::vector<std::vector<double>> trace{{0.5, 0.5}, {0.6, 0.4}};
  const std::string csv = lambda_trace_csv(trace);
  CHECK(csv.rfind("step,lambda_1,lambda_2\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("metrics report rows and summary") {
  MetricsReport r;
  const std::vector<std::uint8_t> p{1, 1, 0, 0}, g{0, 1, 1, 0};
  for (auto& row : evaluate_sample("a", p, g, {1, 1, 4}, {1, 1, 1}, 2)) r.rows.push_back(row);
  for (auto& row : evaluate_sample("b", g, g, {1, 1, 4}, {1, 1, 1}, 2)) r.rows.push_back(row);
  CHECK(r.rows.size() == 2);
  CHECK(r.mean_dsc() == doctest::Approx(0.75));
  const std::string csv = r.csv();
  CHECK(csv.rfind("id,class,dsc,iou,hd95\n", 0) == 0);
  CHECK(r.summary().contains("mean_dsc"));
  const std::vector<std::uint8_t> none(4, 0);
  MetricsReport e;
  for (auto& row : evaluate_sample("c", none, g, {1, 1, 4}, {1, 1, 1}, 2)) e.rows.push_back(row);
  CHECK_FALSE(e.rows[0].hd95.has_value());
  CHECK(e.csv().find("nan") != std::string::npos);
}

TEST_CASE("population statistics") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto s = stats(v);
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(1.25)));
  CHECK(s.n == 4);
}

}  // TEST_SUITE

TEST_SUITE("rng") {

TEST_CASE("philox draws are reproducible and addressable") {
  Philox a(3), b(3);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  const Philox c(3);
  CHECK(c.uniform_at(5) == c.uniform_at(5));
  CHECK(c.fork(1).next_u64() != c.fork(2).next_u64());
}

TEST_CASE("uniform and normal moments") {
  Philox r(8);
  double su = 0, sn = 0, sn2 = 0;
  bool in_range = true;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    in_range &= u >= 0.0 && u < 1.0;
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(in_range);
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.02);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("below stays in range") {
  Philox r(9);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto k = r.below(7);
    REQUIRE(k < 7);
    ++hits[k];
  }
  for (int h : hits) CHECK(h > 800);
}

}  // TEST_SUITE
