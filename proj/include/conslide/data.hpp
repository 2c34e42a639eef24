#pragma once

// Feature bags: one slide as M region vectors and M*N patch vectors.
//
// CSFB files (little-endian):
//   "CSFB" | u16 version=1 | u32 task_id | u32 label | u32 M | u32 N | u32 C
//   | M*C f64 region features | M*N*C f64 patch features | u32 CRC32(payload)
// where payload is the two float blocks.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "conslide/tensor.hpp"

namespace conslide {

using Rng = std::mt19937_64;

struct FeatureBag {
  std::string sample_id;
  std::uint32_t task_id = 0;
  std::uint32_t label = 0;
  Tensor region_features;  // [M, C]
  Tensor patch_features;   // [M, N, C]

  std::size_t regions() const { return region_features.dim(0); }
  std::size_t patches() const { return patch_features.dim(1); }
  std::size_t channels() const { return region_features.dim(1); }

  /// Throws DimensionError / NumericalError on inconsistent or non-finite data.
  void validate() const;
};

inline constexpr std::uint16_t kBagFormatVersion = 1;

void write_bag(const FeatureBag& bag, const std::filesystem::path& path);
/// Throws FormatError (kBadMagic, kUnsupportedVersion, kTruncated,
/// kChecksumMismatch, kIo). Never returns a partial bag.
FeatureBag read_bag(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_bag(const FeatureBag& bag);
FeatureBag decode_bag(std::span<const std::uint8_t> bytes);

struct ManifestEntry {
  std::string sample_id;
  std::string path;  // relative to the manifest's directory
  std::uint32_t task_id = 0;
  std::uint32_t label = 0;
  std::uint32_t regions = 0;
  std::uint32_t patches = 0;
  std::uint32_t channels = 0;
};

struct Manifest {
  std::string dataset;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  /// Rejects duplicate sample ids and inconsistent channel counts.
  void validate() const;
};

/// One JSON object per line.
void write_manifest_jsonl(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest_jsonl(const std::filesystem::path& path);

struct TaskInfo {
  std::uint32_t task_id = 0;
  std::string name;
  std::uint32_t class_begin = 0;  // global class ids [class_begin, class_end)
  std::uint32_t class_end = 0;
};

struct SyntheticSpec {
  std::size_t tasks = 4;
  std::size_t classes_per_task = 2;
  std::size_t channels = 64;
  std::size_t min_regions = 4;
  std::size_t max_regions = 12;
  std::size_t patches = 8;
  double sigma_between = 4.0;
  double sigma_patch = 0.5;
  /// Bags per (task, class). Empty per-class lists fall back to the scalars.
  std::size_t train_per_class = 50;
  std::size_t test_per_class = 20;
  std::vector<std::size_t> train_counts;  // one per global class, optional
  std::vector<std::size_t> test_counts;
  std::vector<std::string> task_names;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t total_classes() const { return tasks * classes_per_task; }
};

/// Four 2-class tasks named after the TCGA subtypes, case counts scaled 10x down.
SyntheticSpec tcga_mirror_spec();

struct Dataset {
  std::string name;
  std::vector<TaskInfo> tasks;
  std::vector<std::string> class_names;
  std::vector<FeatureBag> train;
  std::vector<FeatureBag> test;
};

/// Deterministic under spec.seed.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Writes bags/, train.jsonl, test.jsonl and dataset.json under `dir`.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
/// Throws FormatError(kIo) when files are missing.
Dataset load_dataset(const std::filesystem::path& dir);
std::vector<TaskInfo> read_task_info(const std::filesystem::path& dir);
std::vector<FeatureBag> load_bags(const std::vector<ManifestEntry>& entries,
                                  const std::filesystem::path& base_dir);

struct TilingGeometry {
  std::size_t regions = 0;
  std::size_t patches_per_region = 0;
};

/// Counts full non-overlapping tiles; partial edge tiles are dropped.
TilingGeometry mock_tiling_geometry(std::size_t width_px, std::size_t height_px,
                                    std::size_t region_px = 4096, std::size_t patch_px = 512);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace conslide
