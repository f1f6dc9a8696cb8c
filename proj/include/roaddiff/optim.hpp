#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "roaddiff/errors.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// Named learnable tensors in insertion order, plus per-parameter Adam moments.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    AdamState adam;
  };

  Tensor& add(const std::string& name, const Matrix& init) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor::parameter(init), {}});
    auto& e = entries_.back();
    e.adam.m.assign(init.size(), 0.0);
    e.adam.v.assign(init.size(), 0.0);
    return e.value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].value;
  }
  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].value;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  // Gradient of each parameter after backward(); zeros if none reached it.
  std::map<std::string, std::vector<double>> gradients() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& e : entries_) {
      auto g = e.value.grad();
      out[e.name] = g.empty() ? std::vector<double>(e.value.size(), 0.0) : std::vector<double>(g.begin(), g.end());
    }
    return out;
  }

  // Copies values only (not moments) from a store with identical layout.
  void assign_values(const ParamStore& other) {
    if (other.entries_.size() != entries_.size()) throw CheckpointError("parameter layout mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& dst = entries_[i];
      const auto& src = other.entries_[i];
      if (dst.name != src.name || dst.value.shape() != src.value.shape())
        throw CheckpointError("parameter layout mismatch at " + dst.name);
      auto out = dst.value.mutable_values();
      std::copy(src.value.values().begin(), src.value.values().end(), out.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update using the gradients currently held by each
// parameter, multiplied by grad_scale (e.g. 1/batch). Parameters that received
// no gradient still advance their moments with g = 0.
inline void adam_step(ParamStore& store, const AdamConfig& cfg, double grad_scale = 1.0) {
  for (auto& e : store.entries()) {
    auto values = e.value.mutable_values();
    auto grad = e.value.grad();
    auto& st = e.adam;
    if (st.m.size() != values.size()) throw ShapeError("adam moment shape mismatch for " + e.name);
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i] * grad_scale;
      st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
      st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Learning rate for 0-based epoch index e: base until halving_start, then
// halved once at halving_start and again every `every` epochs.
inline double scheduled_lr(double base, std::size_t epoch, std::size_t halving_start = 20, std::size_t every = 10) {
  if (epoch < halving_start || every == 0) return base;
  const std::size_t halvings = (epoch - halving_start) / every + 1;
  return base * std::pow(2.0, -static_cast<double>(halvings));
}

// Glorot-uniform initialisation.
inline Matrix glorot(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (auto& x : m.data) x = dist(rng);
  return m;
}

}  // namespace roaddiff
