#include "squeeze10/synthetic.hpp"

#include <cmath>
#include <random>

namespace squeeze10 {

MatrixF correlated_activations(std::size_t tokens, std::size_t features, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  MatrixD mix(features, features);
  for (std::size_t a = 0; a < features; ++a) {
    for (std::size_t b = 0; b < features; ++b) mix(a, b) = (a == b ? 1.0 : 0.0) + 0.4 * normal(rng);
  }
  // A few channels carry much larger magnitudes.
  std::vector<double> gain(features);
  for (auto& g : gain) g = unit(rng) < 0.1 ? 8.0 : 0.5 + unit(rng);

  MatrixF x(tokens, features);
  std::vector<double> z(features);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (auto& v : z) v = normal(rng);
    for (std::size_t b = 0; b < features; ++b) {
      double acc = 0.0;
      for (std::size_t a = 0; a < features; ++a) acc += z[a] * mix(a, b);
      x(t, b) = static_cast<float>(acc * gain[b]);
    }
  }
  return x;
}

SyntheticStack make_synthetic_stack(const SyntheticStackSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::student_t_distribution<double> heavy(4.0);
  SyntheticStack out;
  out.spec.notes = "synthetic stack, seed " + std::to_string(spec.seed);
  const double gain = std::sqrt(2.0 / static_cast<double>(spec.width));
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string name = "w" + std::to_string(l);
    MatrixF w(spec.width, spec.width);
    for (auto& v : w.data()) v = static_cast<float>(gain * heavy(rng) / std::sqrt(2.0));
    const Nonlinearity nl = l + 1 < spec.layers ? Nonlinearity::relu : Nonlinearity::identity;
    out.spec.layers.push_back({name, nl});
    out.weights.put(name, w);
    out.model.layers.push_back({name, std::move(w), nl});
  }
  out.inputs = correlated_activations(spec.tokens, spec.width, spec.seed ^ 0x9e3779b97f4a7c15ULL);
  return out;
}

}  // namespace squeeze10
