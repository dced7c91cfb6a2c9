#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "idforget/params.hpp"

namespace idf {

// Checkpoint files are the ParamSet text format preceded by a single line
// holding the role tag.
enum class Role { generator, encoder, embedder, perceptual, deident, fisher };

std::string_view role_name(Role role);
Role parse_role(std::string_view text);

struct Checkpoint {
  Role role = Role::generator;
  ParamSet params;
};

std::string checkpoint_text(Role role, const ParamSet& params);
void save_checkpoint(const std::filesystem::path& path, Role role, const ParamSet& params);
// Throws ArtifactError if the file is missing or malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Loads and checks the role tag.
ParamSet load_checkpoint(const std::filesystem::path& path, Role expected);

// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);
// Digest of the serialized parameters; identical tensors give identical digests.
std::string params_digest(const ParamSet& params);

// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace idf
