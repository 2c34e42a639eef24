#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <memory>
#include <sstream>

#include "conslide/errors.hpp"

namespace conslide::cli {

namespace fs = std::filesystem;

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw StateError("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string blob_hash(const std::string& bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed.push_back('\0');
  return sha256_hex(framed + bytes);
}

std::string file_blob_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return blob_hash(ss.str());
}

std::vector<fs::path> list_tree(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw FormatError(FormatErrorCode::kIo, "not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) { return a.generic_string() < b.generic_string(); });
  return out;
}

std::string tree_hash(std::vector<TreeEntry> entries) {
  std::sort(entries.begin(), entries.end(), [](const TreeEntry& a, const TreeEntry& b) { return a.name < b.name; });
  std::string body;
  for (const auto& e : entries) {
    body += e.name;
    body.push_back('\0');
    body += e.blob + "\n";
  }
  return sha256_hex(body);
}

std::string directory_hash(const fs::path& root, const std::vector<std::string>& skip) {
  std::vector<TreeEntry> entries;
  for (const auto& rel : list_tree(root)) {
    const auto name = rel.generic_string();
    if (std::find(skip.begin(), skip.end(), name) != skip.end()) continue;
    entries.push_back({name, file_blob_hash(root / rel)});
  }
  return tree_hash(std::move(entries));
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json in = nlohmann::json::array();
  for (const auto& e : inputs) in.push_back({{"name", e.name}, {"blob", e.blob}});
  nlohmann::json j{{"command", command},
                   {"config", config},
                   {"seed", seed},
                   {"input_hash", input_hash()},
                   {"inputs", in},
                   {"output_dir", output_dir},
                   {"outputs", outputs}};
  if (!output_tree_hash.empty()) j["output_tree_hash"] = output_tree_hash;
  return j;
}

void RunManifest::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError(FormatErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

}  // namespace conslide::cli
