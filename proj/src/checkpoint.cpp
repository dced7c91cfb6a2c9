#include "idforget/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <sstream>

#include "idforget/errors.hpp"

namespace idf {

namespace {

constexpr std::array<std::pair<Role, std::string_view>, 6> kRoles{{
    {Role::generator, "generator"},
    {Role::encoder, "encoder"},
    {Role::embedder, "embedder"},
    {Role::perceptual, "perceptual"},
    {Role::deident, "deident"},
    {Role::fisher, "fisher"},
}};

}  // namespace

std::string_view role_name(Role role) {
  for (const auto& [r, name] : kRoles) {
    if (r == role) return name;
  }
  return "unknown";
}

Role parse_role(std::string_view text) {
  for (const auto& [r, name] : kRoles) {
    if (name == text) return r;
  }
  throw ArtifactError("unknown checkpoint role '" + std::string(text) + "'");
}

std::string checkpoint_text(Role role, const ParamSet& params) {
  return std::string(role_name(role)) + "\n" + params_to_text(params);
}

void save_checkpoint(const std::filesystem::path& path, Role role, const ParamSet& params) {
  write_text_file(path, checkpoint_text(role, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open checkpoint " + path.string());
  std::string tag;
  if (!std::getline(in, tag)) throw ArtifactError("empty checkpoint " + path.string());
  Checkpoint ck;
  ck.role = parse_role(tag);
  ck.params = read_params(in);
  if (ck.params.empty()) throw ArtifactError("checkpoint " + path.string() + " holds no tensors");
  return ck;
}

ParamSet load_checkpoint(const std::filesystem::path& path, Role expected) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.role != expected) {
    throw ArtifactError("checkpoint " + path.string() + " has role '" + std::string(role_name(ck.role)) +
                        "', expected '" + std::string(role_name(expected)) + "'");
  }
  return std::move(ck.params);
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

std::string params_digest(const ParamSet& params) { return sha256_hex(params_to_text(params)); }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
  if (!out) throw ArtifactError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace idf
