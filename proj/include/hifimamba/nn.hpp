/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hifimamba/ops.hpp"

namespace hifi::nn {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Ordered registry of named learnable tensors.
///
/// Initial values are drawn from a generator keyed on (seed, name), so a
/// parameter that exists in two model variants starts from the same values in
/// both regardless of what else was created.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::mt19937_64 rng_for(const std::string& name) const {
    return std::mt19937_64(splitmix64(seed_ ^ fnv1a64(name)));
  }

  ag::Var add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, ag::Var(std::move(init), true));
    return entries_.back().second;
  }
  ag::Var zeros(const std::string& name, Shape s) { return add(name, Tensor(std::move(s))); }
  ag::Var constant(const std::string& name, Shape s, double v) { return add(name, Tensor(std::move(s), v)); }
  ag::Var uniform(const std::string& name, Shape s, double bound) {
    auto rng = rng_for(name);
    return add(name, rand_uniform(std::move(s), rng, -bound, bound));
  }
  ag::Var normal(const std::string& name, Shape s, double stddev) {
    auto rng = rng_for(name);
    return add(name, randn(std::move(s), rng, stddev));
  }

  const std::vector<std::pair<std::string, ag::Var>>& entries() const noexcept { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ag::Var& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, ag::Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  ag::Var weight, bias;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, bool with_bias = true) {
    weight = ps.uniform(name + ".weight", {out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
    if (with_bias) bias = ps.zeros(name + ".bias", {out});
  }
  ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

struct LayerNorm {
  ag::Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t c) {
    gamma = ps.constant(name + ".gamma", {c}, 1.0);
    beta = ps.zeros(name + ".beta", {c});
  }
  ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

struct DepthwiseConv2d {
  ag::Var weight, bias;
  std::size_t stride = 1;
  DepthwiseConv2d() = default;
  DepthwiseConv2d(ParamStore& ps, const std::string& name, std::size_t c, std::size_t k, std::size_t s = 1)
      : stride(s) {
    weight = ps.uniform(name + ".weight", {c, k, k}, 1.0 / static_cast<double>(k));
    bias = ps.zeros(name + ".bias", {c});
  }
  ag::Var operator()(const ag::Var& x) const { return ag::dwconv2d(x, weight, bias, stride); }
};

/// Depthwise conv along a sequence; starts near the identity kernel.
struct DepthwiseConv1d {
  ag::Var weight, bias;
  DepthwiseConv1d() = default;
  DepthwiseConv1d(ParamStore& ps, const std::string& name, std::size_t d, std::size_t k) {
    if (k % 2 == 0) throw ConfigError("conv kernel must be odd, got " + std::to_string(k));
    auto rng = ps.rng_for(name + ".weight");
    Tensor w = randn({d, k}, rng, 0.02);
    for (std::size_t c = 0; c < d; ++c) w[c * k + k / 2] += 1.0;
    weight = ps.add(name + ".weight", std::move(w));
    bias = ps.zeros(name + ".bias", {d});
  }
  ag::Var operator()(const ag::Var& x) const { return ag::dwconv1d(x, weight, bias); }
};

}  // namespace hifi::nn
