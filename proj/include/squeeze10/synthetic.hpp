#pragma once

#include <cstdint>

#include "squeeze10/pipeline.hpp"
#include "squeeze10/tensor_store.hpp"

namespace squeeze10 {

// Seeded stand-in for a stack of LLM linear layers: square layers, ReLU
// between them, heavy-tailed weights and correlated inputs with a few
// high-magnitude feature channels.
struct SyntheticStackSpec {
  std::size_t layers = 12;
  std::size_t width = 20;
  std::size_t tokens = 128;
  std::uint64_t seed = 0;
};

struct SyntheticStack {
  ModelSpec spec;
  TensorContainer weights;
  Model model;
  MatrixF inputs;
};

SyntheticStack make_synthetic_stack(const SyntheticStackSpec& spec);

// N x d activations X = Z * A with a random mixing matrix A and per-channel gains.
MatrixF correlated_activations(std::size_t tokens, std::size_t features, std::uint64_t seed);

}  // namespace squeeze10
