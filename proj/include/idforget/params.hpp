#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "idforget/tensor.hpp"

namespace idf {

// Named parameter tensors. Iteration is lexicographic by name, which fixes the
// order used for serialization, digests, and flattening.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  ParamSet() = default;

  void set(const std::string& name, Tensor value);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.contains(name); }
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return tensors_.size(); }
  bool empty() const noexcept { return tensors_.empty(); }
  // Total scalar count across tensors.
  std::size_t numel() const;

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }
  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }

  // Same names and shapes, all entries set to `value`.
  ParamSet filled(double value) const;
  bool same_layout(const ParamSet& other) const;
  // Entries whose names start with `prefix`, with the prefix kept.
  ParamSet subset(const std::string& prefix) const;

  std::vector<double> flatten() const;
  void assign_flat(const std::vector<double>& flat);

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  Map tensors_;
};

// Throws ShapeError naming the first tensor whose name or shape differs.
void require_same_layout(const ParamSet& a, const ParamSet& b, const std::string& context);

// Text format: for every tensor (in name order) one header line
// `name ndim d1 d2 ...` followed by one line of whitespace-separated values
// printed with 17 significant digits, which round-trips doubles exactly.
void write_params(std::ostream& out, const ParamSet& params);
// Reads tensors until end of stream or a line equal to `stop_line`.
ParamSet read_params(std::istream& in, const std::string& stop_line = "");

std::string params_to_text(const ParamSet& params);
ParamSet params_from_text(const std::string& text);

// `%.17g` rendering; parses back to exactly `x`.
std::string format_double(double x);

}  // namespace idf
