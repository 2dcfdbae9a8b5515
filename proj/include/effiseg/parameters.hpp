#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "effiseg/autograd.hpp"
#include "effiseg/random.hpp"

namespace effiseg {

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Var<Scalar>* var;
};

template <typename Scalar>
struct NamedBuffer {
  std::string name;
  Tensor4<Scalar>* tensor;
};

/// Flat view over a module tree: trainable parameters and non-trainable
/// buffers (batch-norm running statistics), in registration order. Pointers
/// stay valid while the owning module is alive and not moved.
template <typename Scalar>
struct ParameterRegistry {
  std::vector<NamedParameter<Scalar>> parameters;
  std::vector<NamedBuffer<Scalar>> buffers;

  void add(std::string name, Var<Scalar>& var) { parameters.push_back({std::move(name), &var}); }
  void add_buffer(std::string name, Tensor4<Scalar>& t) { buffers.push_back({std::move(name), &t}); }

  Index parameter_count() const {
    Index total = 0;
    for (const auto& p : parameters) total += p.var->value().size();
    return total;
  }

  void zero_grad() {
    for (auto& p : parameters) p.var->zero_grad();
  }
};

/// He-uniform kernel: U(-b, b) with b = sqrt(6 / fan_in), fan_in = c_in * kh * kw.
template <typename Scalar>
Var<Scalar> init_kernel(const Shape4& shape, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(shape.c * shape.h * shape.w));
  Tensor4<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Var<Scalar>::parameter(std::move(t));
}

/// Bias: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename Scalar>
Var<Scalar> init_bias(Index channels, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor4<Scalar> t(Shape4{channels, 1, 1, 1});
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Var<Scalar>::parameter(std::move(t));
}

/// Order-sensitive FNV-1a over the raw bytes of every parameter and buffer.
template <typename Scalar>
std::uint64_t checksum(const ParameterRegistry<Scalar>& reg) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const Tensor4<Scalar>& t) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), sizeof(Scalar) * t.size()), h);
  };
  for (const auto& p : reg.parameters) mix(p.var->value());
  for (const auto& b : reg.buffers) mix(*b.tensor);
  return h;
}

}  // namespace effiseg
