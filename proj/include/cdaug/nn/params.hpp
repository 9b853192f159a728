#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cdaug/io.hpp"
#include "cdaug/nn/tape.hpp"

namespace cdaug::nn {

template <typename T>
struct ParamBlock {
  std::string name;
  int n = 1, c = 1, h = 1, w = 1;
  std::vector<T> values;
  // Part of the generative trunk (as opposed to a conditioning branch).
  bool trunk = true;

  std::size_t size() const { return values.size(); }
  Tensor<T> tensor() const {
    Tensor<T> t(n, c, h, w);
    t.data = values;
    return t;
  }
};

using BlockFilter = std::function<bool(const std::string& name, bool trunk)>;

// Ordered collection of named parameter blocks. Creation order is the
// serialization order and the index space used by network definitions.
template <typename T>
class ParamSet {
 public:
  int add(std::string name, int n, int c, int h, int w, bool trunk);

  std::size_t count() const { return blocks_.size(); }
  ParamBlock<T>& operator[](std::size_t i) { return blocks_[i]; }
  const ParamBlock<T>& operator[](std::size_t i) const { return blocks_[i]; }
  std::vector<ParamBlock<T>>& blocks() { return blocks_; }
  const std::vector<ParamBlock<T>>& blocks() const { return blocks_; }
  int index_of(const std::string& name) const;

  std::size_t total_size() const;
  std::vector<T> flatten() const;
  void assign(std::span<const T> flat);
  ParamSet zeros_like() const;

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& b : blocks_) {
      out.add(b.name, b.n, b.c, b.h, b.w, b.trunk);
      auto& dst = out[out.count() - 1].values;
      for (std::size_t i = 0; i < b.values.size(); ++i) dst[i] = static_cast<U>(b.values[i]);
    }
    return out;
  }

  // Places every block on the tape: as a variable where `trainable` accepts
  // it, otherwise as a constant.
  std::vector<Var> bind(Tape<T>& tape, const BlockFilter& trainable) const;
  // Reads gradients of bound blocks; blocks bound as constants get zeros.
  ParamSet gradients(const Tape<T>& tape, const std::vector<Var>& bound) const;

  // Float32 little-endian dump of all blocks in order.
  void write_values(ByteWriter& out) const;
  void read_values(ByteReader& in);

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.blocks_.size() != b.blocks_.size()) return false;
    for (std::size_t i = 0; i < a.blocks_.size(); ++i)
      if (a.blocks_[i].name != b.blocks_[i].name || a.blocks_[i].values != b.blocks_[i].values) return false;
    return true;
  }

 private:
  std::vector<ParamBlock<T>> blocks_;
};

BlockFilter all_blocks();
BlockFilter no_blocks();

// Adam with bias correction; moments are kept in double.
template <typename T>
class Adam {
 public:
  Adam(const ParamSet<T>& like, double learn_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamSet<T>& params, const ParamSet<T>& grads, const BlockFilter& trainable);
  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace cdaug::nn
