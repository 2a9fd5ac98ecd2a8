#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "rfcl/error.hpp"

namespace rfcl {

/// Diagonal of the empirical Fisher information, one nonnegative array per
/// named parameter, tagged with the task whose data produced it.
class FisherDiagonal {
 public:
  FisherDiagonal() = default;
  explicit FisherDiagonal(std::size_t task) : task_(task) {}

  std::size_t task() const { return task_; }

  void set(const std::string& name, std::vector<double> values) {
    for (double v : values) {
      if (!(v >= 0.0)) throw DomainError("fisher entry for '" + name + "' is negative or NaN");
    }
    entries_[name] = std::move(values);
  }

  const std::vector<double>* find(const std::string& name) const {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, std::vector<double>>& entries() const { return entries_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.size();
    return n;
  }

 private:
  std::size_t task_ = 0;
  std::map<std::string, std::vector<double>> entries_;
};

}  // namespace rfcl
