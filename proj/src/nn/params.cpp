#include "cdaug/nn/params.hpp"

#include <cmath>

namespace cdaug::nn {

template <typename T>
int ParamSet<T>::add(std::string name, int n, int c, int h, int w, bool trunk) {
  ParamBlock<T> b;
  b.name = std::move(name);
  b.n = n;
  b.c = c;
  b.h = h;
  b.w = w;
  b.trunk = trunk;
  b.values.assign(static_cast<std::size_t>(n) * c * h * w, T(0));
  blocks_.push_back(std::move(b));
  return static_cast<int>(blocks_.size()) - 1;
}

template <typename T>
int ParamSet<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].name == name) return static_cast<int>(i);
  return -1;
}

template <typename T>
std::size_t ParamSet<T>::total_size() const {
  std::size_t s = 0;
  for (const auto& b : blocks_) s += b.size();
  return s;
}

template <typename T>
std::vector<T> ParamSet<T>::flatten() const {
  std::vector<T> out;
  out.reserve(total_size());
  for (const auto& b : blocks_) out.insert(out.end(), b.values.begin(), b.values.end());
  return out;
}

template <typename T>
void ParamSet<T>::assign(std::span<const T> flat) {
  if (flat.size() != total_size()) throw ShapeError("ParamSet::assign: size mismatch");
  std::size_t off = 0;
  for (auto& b : blocks_) {
    std::copy(flat.begin() + off, flat.begin() + off + b.size(), b.values.begin());
    off += b.size();
  }
}

template <typename T>
ParamSet<T> ParamSet<T>::zeros_like() const {
  ParamSet out;
  for (const auto& b : blocks_) out.add(b.name, b.n, b.c, b.h, b.w, b.trunk);
  return out;
}

template <typename T>
std::vector<Var> ParamSet<T>::bind(Tape<T>& tape, const BlockFilter& trainable) const {
  std::vector<Var> vars;
  vars.reserve(blocks_.size());
  for (const auto& b : blocks_) {
    vars.push_back(trainable(b.name, b.trunk) ? tape.variable(b.tensor()) : tape.constant(b.tensor()));
  }
  return vars;
}

template <typename T>
ParamSet<T> ParamSet<T>::gradients(const Tape<T>& tape, const std::vector<Var>& bound) const {
  ParamSet out = zeros_like();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (tape.has_grad(bound[i])) out.blocks_[i].values = tape.grad(bound[i]).data;
  }
  return out;
}

template <typename T>
void ParamSet<T>::write_values(ByteWriter& out) const {
  for (const auto& b : blocks_)
    for (T v : b.values) out.f32(static_cast<float>(v));
}

template <typename T>
void ParamSet<T>::read_values(ByteReader& in) {
  in.require(total_size() * 4);
  for (auto& b : blocks_)
    for (T& v : b.values) v = static_cast<T>(in.f32());
}

BlockFilter all_blocks() {
  return [](const std::string&, bool) { return true; };
}

BlockFilter no_blocks() {
  return [](const std::string&, bool) { return false; };
}

template <typename T>
Adam<T>::Adam(const ParamSet<T>& like, double learn_rate, double beta1, double beta2, double eps)
    : lr_(learn_rate), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& b : like.blocks()) {
    m_.emplace_back(b.size(), 0.0);
    v_.emplace_back(b.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(ParamSet<T>& params, const ParamSet<T>& grads, const BlockFilter& trainable) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t bi = 0; bi < params.count(); ++bi) {
    auto& p = params[bi];
    if (!trainable(p.name, p.trunk)) continue;
    const auto& g = grads[bi].values;
    auto& m = m_[bi];
    auto& v = v_[bi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
      v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p.values[i] = static_cast<T>(p.values[i] - lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace cdaug::nn
