#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "osr/common.hpp"

namespace osr {

// Handle into a ParameterSet.
struct ParamId {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
};

enum class Init { zeros, ones, trunc_normal };

// Named, shaped parameter tensors with gradient accumulators of the same shape.
// Parameters are registered once at model construction and addressed by ParamId afterwards.
template <typename T>
class ParameterSet {
 public:
  ParamId add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init,
              std::mt19937_64& rng, double std = 0.02) {
    if (lookup_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Mat<T> value(rows, cols);
    switch (init) {
      case Init::zeros: value.setZero(); break;
      case Init::ones: value.setOnes(); break;
      case Init::trunc_normal: {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Eigen::Index i = 0; i < value.size(); ++i) {
          double z = normal(rng);
          while (std::abs(z) > 2.0) z = normal(rng);
          value.data()[i] = static_cast<T>(z * std);
        }
        break;
      }
    }
    ParamId id{values_.size()};
    lookup_[name] = id.index;
    names_.push_back(name);
    values_.push_back(std::move(value));
    grads_.push_back(Mat<T>::Zero(rows, cols));
    return id;
  }

  const Mat<T>& value(ParamId id) const { return values_[id.index]; }
  Mat<T>& value(ParamId id) { return values_[id.index]; }
  Mat<T>& grad(ParamId id) { return grads_[id.index]; }
  const Mat<T>& grad(ParamId id) const { return grads_[id.index]; }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Mat<T>& value_at(std::size_t i) { return values_[i]; }
  const Mat<T>& value_at(std::size_t i) const { return values_[i]; }
  Mat<T>& grad_at(std::size_t i) { return grads_[i]; }
  const Mat<T>& grad_at(std::size_t i) const { return grads_[i]; }

  bool contains(const std::string& name) const { return lookup_.count(name) != 0; }
  ParamId id(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw ConfigError("unknown parameter: " + name);
    return ParamId{it->second};
  }

  void zero_grad() {
    for (auto& g : grads_) g.setZero();
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  // Copy values into a set of another scalar type with identical layout.
  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      out.adopt(names_[i], values_[i].template cast<U>());
    }
    return out;
  }

  // Register a tensor with given contents (used by cast and checkpoint loading).
  ParamId adopt(const std::string& name, Mat<T> value) {
    if (lookup_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    ParamId id{values_.size()};
    lookup_[name] = id.index;
    names_.push_back(name);
    grads_.push_back(Mat<T>::Zero(value.rows(), value.cols()));
    values_.push_back(std::move(value));
    return id;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat<T>> values_;
  std::vector<Mat<T>> grads_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

}  // namespace osr
