#include "dumamba/probe.hpp"

#include "dumamba/gradcases.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace {

class Handle final : public check::CaseHandle {
 public:
  explicit Handle(GradCase c) : c_(std::move(c)) {}

  const std::string& name() const override { return c_.name; }

  std::vector<std::size_t> input_sizes() const override {
    std::vector<std::size_t> s;
    for (const auto& t : c_.inputs) s.push_back(static_cast<std::size_t>(t.numel()));
    return s;
  }

  std::vector<double> values() const override {
    std::vector<double> v;
    for (const auto* group : {&c_.inputs, &c_.constants}) {
      for (const auto& t : *group) {
        const auto d = t.data();
        v.insert(v.end(), d.begin(), d.end());
      }
    }
    return v;
  }

  void set_values(const std::vector<double>& v) override {
    std::size_t k = 0;
    for (auto* group : {&c_.inputs, &c_.constants}) {
      for (auto& t : *group) {
        for (auto& x : t.mutable_data()) {
          if (k >= v.size()) throw ShapeError("set_values: too few values");
          x = static_cast<Scalar>(v[k++]);
        }
      }
    }
    if (k != v.size()) throw ShapeError("set_values: too many values");
  }

  std::vector<check::Coordinate> sample(std::size_t per_input, Philox& rng) const override {
    return check::sample_coordinates(c_, per_input, rng);
  }

  std::vector<double> analytic(const std::vector<check::Coordinate>& coords) override {
    return check::analytic_gradient<Tape, TapeScope>(c_, coords);
  }

  std::vector<double> numeric(const std::vector<check::Coordinate>& coords, double h) override {
    return check::numeric_gradient(c_, coords, h);
  }

  double loss() override { return static_cast<double>(c_.loss().item()); }

 private:
  GradCase c_;
};

std::unique_ptr<check::CaseHandle> open(const std::string& name, std::uint64_t seed) {
  return std::make_unique<Handle>(make_grad_case(name, seed));
}

}  // namespace

DUMAMBA_END_NAMESPACE

namespace dumamba::check {

#if defined(DUMAMBA_SCALAR_F64)
std::unique_ptr<CaseHandle> open_grad_case_f64(const std::string& name, std::uint64_t seed) {
  return f64::open(name, seed);
}
std::vector<std::string> grad_case_names() { return f64::grad_case_names(); }
#else
std::unique_ptr<CaseHandle> open_grad_case_f32(const std::string& name, std::uint64_t seed) {
  return f32::open(name, seed);
}
#endif

}  // namespace dumamba::check
