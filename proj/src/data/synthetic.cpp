#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "sib/data/dataset.hpp"
#include "sib/errors.hpp"

namespace sib::data {

using ad::Tensor;

namespace {

// Point-in-shape tests in the unit frame (u right, v down), all supports within radius ~1.3.
bool inside(std::size_t family, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (family) {
    case 0:  // disk
      return u * u + v * v <= 1.0;
    case 1:  // square
      return au <= 0.8 && av <= 0.8;
    case 2:  // triangle, apex up
      return v <= 0.8 && v >= 2.0 * au - 1.0;
    case 3: {  // ring
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 4:  // plus-shaped cross
      return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 5:  // horizontal bar
      return au <= 1.0 && av <= 0.3;
    case 6:  // diamond
      return au + av <= 1.0;
    case 7: {  // diagonal cross
      const double a = std::abs(u + v) / std::sqrt(2.0), b = std::abs(u - v) / std::sqrt(2.0);
      return (a <= 0.25 && b <= 1.0) || (b <= 0.25 && a <= 1.0);
    }
    case 8:  // square frame
      return au <= 0.9 && av <= 0.9 && (au >= 0.55 || av >= 0.55);
    case 9:  // T
      return (au <= 1.0 && v >= -1.0 && v <= -0.6) || (au <= 0.25 && v >= -0.6 && v <= 1.0);
    default:
      return false;
  }
}

double quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return std::round(c * 255.0) / 255.0;
}

struct Rendered {
  LabeledSample sample;
  std::size_t band = 0;
};

Rendered render(const SyntheticRecipe& rc, bool train, std::size_t index) {
  std::mt19937_64 rng(mix_seed(mix_seed(rc.seed, train ? 1 : 2), index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t side = rc.side;
  const double s = static_cast<double>(side);

  Rendered out;
  LabeledSample& smp = out.sample;
  char id[32];
  std::snprintf(id, sizeof id, "%06zu", index);
  smp.id = id;
  smp.label = index % rc.classes;

  // Background band: tied to the class with probability rho on the train split.
  const bool tied = train && unit(rng) < rc.spurious;
  std::size_t band = std::uniform_int_distribution<std::size_t>(0, rc.classes - 1)(rng);
  if (tied) band = smp.label;
  out.band = band;
  const double level = 0.1 + 0.3 * static_cast<double>(band) / static_cast<double>(rc.classes - 1) +
                       0.04 * (unit(rng) - 0.5);

  double amp[3], fx[3], fy[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    amp[k] = 0.02 * unit(rng);
    fx[k] = 1.0 + 2.0 * unit(rng);
    fy[k] = 1.0 + 2.0 * unit(rng);
    ph[k] = 2.0 * M_PI * unit(rng);
  }

  const double r = s * (0.22 + 0.12 * unit(rng));
  const double margin = 1.3 * r;
  const double cx = margin + (s - 2 * margin) * unit(rng);
  const double cy = margin + (s - 2 * margin) * unit(rng);
  const double fg = 0.6 + 0.35 * unit(rng);
  const std::size_t family = smp.label;

  smp.image = Tensor({1, side, side});
  smp.gt_mask = Tensor({side, side});
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double px = static_cast<double>(j) + 0.5, py = static_cast<double>(i) + 0.5;
      const double noise = 0.08 * (unit(rng) - 0.5);
      const std::size_t at = i * side + j;
      if (inside(family, (px - cx) / r, (py - cy) / r)) {
        smp.gt_mask[at] = 1.0;
        smp.image[at] = quantize(fg + 0.6 * noise);
      } else {
        double tex = 0;
        for (int k = 0; k < 3; ++k) tex += amp[k] * std::sin(2.0 * M_PI * (fx[k] * px + fy[k] * py) / s + ph[k]);
        smp.image[at] = quantize(level + tex + noise);
      }
    }
  }
  return out;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const std::vector<std::string>& shape_families() {
  static const std::vector<std::string> names = {"disk",    "square", "triangle", "ring",  "cross",
                                                 "bar",     "diamond", "x",       "frame", "t"};
  return names;
}

void validate(const SyntheticRecipe& r) {
  std::string errors;
  auto fail = [&](const std::string& e) { errors += (errors.empty() ? "" : "; ") + e; };
  if (r.classes < 2) fail("classes must be >= 2");
  if (r.classes > shape_families().size()) {
    fail("classes must be <= " + std::to_string(shape_families().size()) + " (available shape families)");
  }
  if (r.side != 16 && r.side != 32 && r.side != 64) fail("side must be 16, 32 or 64");
  if (!(r.spurious >= 0.0 && r.spurious <= 1.0)) fail("spurious must lie in [0, 1]");
  if (!errors.empty()) throw ConfigError(errors);
}

std::map<std::string, std::string> to_map(const SyntheticRecipe& r) {
  char rho[32];
  std::snprintf(rho, sizeof rho, "%.17g", r.spurious);
  return {{"classes", std::to_string(r.classes)}, {"side", std::to_string(r.side)},
          {"n_train", std::to_string(r.n_train)}, {"n_test", std::to_string(r.n_test)},
          {"spurious", rho},                      {"seed", std::to_string(r.seed)}};
}

SplitDatasets generate_synthetic(const SyntheticRecipe& recipe) {
  validate(recipe);
  SplitDatasets out;
  auto fill = [&](Dataset& ds, bool train, std::size_t n) {
    ds.classes = recipe.classes;
    ds.split = train ? "train" : "test";
    ds.recipe = to_map(recipe);
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(render(recipe, train, i).sample);
  };
  fill(out.train, true, recipe.n_train);
  fill(out.test, false, recipe.n_test);
  return out;
}

std::size_t background_band(const SyntheticRecipe& recipe, bool train, std::size_t index) {
  validate(recipe);
  return render(recipe, train, index).band;
}

}  // namespace sib::data
