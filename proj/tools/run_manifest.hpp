#pragma once

// Run provenance: effective config echo, seed, and git-style content hashes.
//
// blob hash = SHA-256("blob <size>\0" + bytes)
// tree hash = SHA-256 over sorted lines "<relative path>\0<blob hash>\n"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace conslide::cli {

std::string sha256_hex(const std::string& bytes);
std::string blob_hash(const std::string& bytes);
std::string file_blob_hash(const std::filesystem::path& path);

/// Regular files under `root`, relative, sorted by generic path string.
std::vector<std::filesystem::path> list_tree(const std::filesystem::path& root);

struct TreeEntry {
  std::string name;  // stable label, usually a relative path
  std::string blob;  // blob hash
};
std::string tree_hash(std::vector<TreeEntry> entries);
/// Tree hash of every regular file under `root`; `skip` names are ignored.
std::string directory_hash(const std::filesystem::path& root, const std::vector<std::string>& skip = {});

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<TreeEntry> inputs;
  std::string output_dir;
  std::vector<std::string> outputs;  // paths relative to output_dir
  std::string output_tree_hash;      // empty when not computed

  std::string input_hash() const { return tree_hash(inputs); }
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace conslide::cli
