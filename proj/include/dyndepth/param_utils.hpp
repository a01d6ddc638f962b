#pragma once

#include <cstdint>
#include <cstring>

#include "dyndepth/random.hpp"
#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

// Generic helpers over any parameter struct exposing tensors(): a list of
// (name, Matrix*) pairs in a fixed order.

template <class Params>
Index flat_size(const Params& p) {
  Index n = 0;
  for (const auto& [name, m] : p.tensors()) n += m->size();
  return n;
}

template <class Params>
Vector flatten_tensors(const Params& p) {
  Vector out(flat_size(p));
  Index at = 0;
  for (const auto& [name, m] : p.tensors()) {
    out.segment(at, m->size()) = Eigen::Map<const Vector>(m->data(), m->size());
    at += m->size();
  }
  return out;
}

template <class Params>
void assign_flat(Params& p, const Vector& flat) {
  if (flat.size() != flat_size(p)) {
    throw DimensionError("assign_flat: vector has " + std::to_string(flat.size()) +
                         " entries, parameters " + std::to_string(flat_size(p)));
  }
  Index at = 0;
  for (auto& [name, m] : p.tensors()) {
    Eigen::Map<Vector>(m->data(), m->size()) = flat.segment(at, m->size());
    at += m->size();
  }
}

/// FNV-1a over the raw bytes of every tensor; used to assert that a training
/// stage left a component untouched.
template <class Params>
std::uint64_t parameter_hash(const Params& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, m] : p.tensors()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m->size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <class Params>
bool all_tensors_finite(const Params& p) {
  for (const auto& [name, m] : p.tensors()) {
    if (!all_finite(*m)) return false;
  }
  return true;
}

template <class Params>
void zero_tensors(Params& p) {
  for (auto& [name, m] : p.tensors()) m->setZero();
}

}  // namespace dyndepth
