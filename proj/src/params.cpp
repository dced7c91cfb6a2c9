#include "idforget/params.hpp"

#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "idforget/errors.hpp"

namespace idf {

void ParamSet::set(const std::string& name, Tensor value) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw ConfigError("invalid parameter name '" + name + "'");
  }
  tensors_.insert_or_assign(name, std::move(value));
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ShapeError("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ShapeError("missing parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

ParamSet ParamSet::filled(double value) const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) out.set(name, Tensor(t.shape(), value));
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto it = other.tensors_.begin();
  for (const auto& [name, t] : tensors_) {
    if (name != it->first || t.shape() != it->second.shape()) return false;
    ++it;
  }
  return true;
}

ParamSet ParamSet::subset(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) {
    if (name.starts_with(prefix)) out.set(name, t);
  }
  return out;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(numel());
  for (const auto& [_, t] : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

void ParamSet::assign_flat(const std::vector<double>& flat) {
  if (flat.size() != numel()) throw ShapeError("assign_flat: length mismatch");
  std::size_t k = 0;
  for (auto& [_, t] : tensors_) {
    for (double& x : t.values()) x = flat[k++];
  }
}

void require_same_layout(const ParamSet& a, const ParamSet& b, const std::string& context) {
  if (a.size() != b.size()) {
    throw ShapeError(context + ": parameter count " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  auto it = b.begin();
  for (const auto& [name, t] : a) {
    if (name != it->first) throw ShapeError(context + ": parameter '" + name + "' vs '" + it->first + "'");
    if (t.shape() != it->second.shape()) {
      throw ShapeError(context + ": parameter '" + name + "' shape " + shape_string(t.shape()) + " vs " +
                       shape_string(it->second.shape()));
    }
    ++it;
  }
}

std::string format_double(double x) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", x);
  return std::string(buf, static_cast<std::size_t>(n));
}

void write_params(std::ostream& out, const ParamSet& params) {
  for (const auto& [name, t] : params) {
    out << name << ' ' << t.ndim();
    for (std::size_t d : t.shape()) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (i > 0) out << ' ';
      out << format_double(t[i]);
    }
    out << '\n';
  }
}

namespace {

double parse_double(const std::string& token, const std::string& tensor) {
  double value = 0.0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ArtifactError("tensor '" + tensor + "': cannot parse value '" + token + "'");
  }
  return value;
}

}  // namespace

ParamSet read_params(std::istream& in, const std::string& stop_line) {
  ParamSet params;
  std::string line;
  while (std::getline(in, line)) {
    if (!stop_line.empty() && line == stop_line) break;
    if (line.empty()) continue;
    std::istringstream header(line);
    std::string name;
    std::size_t ndim = 0;
    if (!(header >> name >> ndim) || ndim == 0) throw ArtifactError("malformed tensor header: '" + line + "'");
    Shape shape(ndim);
    for (auto& d : shape) {
      if (!(header >> d)) throw ArtifactError("tensor '" + name + "': truncated shape");
    }
    std::string extra;
    if (header >> extra) throw ArtifactError("tensor '" + name + "': trailing header tokens");
    const std::size_t n = element_count(shape);
    std::vector<double> data;
    data.reserve(n);
    std::string token;
    while (data.size() < n && in >> token) data.push_back(parse_double(token, name));
    if (data.size() != n) throw ArtifactError("tensor '" + name + "': expected " + std::to_string(n) + " values");
    std::getline(in, line);  // rest of the value line
    try {
      params.set(name, Tensor(std::move(shape), std::move(data)));
    } catch (const ShapeError& e) {
      throw ArtifactError("tensor '" + name + "': " + e.what());
    }
  }
  return params;
}

std::string params_to_text(const ParamSet& params) {
  std::ostringstream out;
  write_params(out, params);
  return out.str();
}

ParamSet params_from_text(const std::string& text) {
  std::istringstream in(text);
  return read_params(in);
}

}  // namespace idf
