#pragma once

// Breakup-Reorganize rehearsal.
//
// Slides are broken into region records (one region vector plus its patch
// vectors) that enter a capacity-bounded reservoir. Replay picks a
// (task, label) pair uniformly among pairs present, samples records of that
// pair without replacement and stacks them into a new bag.
//
// Snapshot files ("CSBF", little-endian): magic, u16 version, u64 capacity,
// u64 record count, then per record u32 task_id, u32 label, u32 N, u32 C,
// C f64 region values, N*C f64 patch values.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conslide/data.hpp"

namespace conslide {

struct RegionRecord {
  Tensor region_feature;  // [C]
  Tensor patch_features;  // [N, C]
  std::uint32_t task_id = 0;
  std::uint32_t label = 0;
  std::string source_id;

  std::size_t patches() const { return patch_features.dim(0); }
  std::size_t channels() const { return region_feature.dim(0); }
  bool operator==(const RegionRecord&) const = default;
};

/// min(s, M) distinct regions drawn uniformly without replacement.
std::vector<RegionRecord> breakup(const FeatureBag& bag, std::size_t sample_size, Rng& rng);

/// All M regions of a bag, in order.
std::vector<RegionRecord> all_regions(const FeatureBag& bag);

/// Stacks records that share (task_id, label) and shapes into one bag.
FeatureBag reorganize(std::span<const RegionRecord> records);

struct Selection {
  std::vector<RegionRecord> records;
  std::uint32_t task_id = 0;
  std::uint32_t label = 0;
};

class RehearsalBuffer {
 public:
  RehearsalBuffer(std::size_t capacity, std::uint64_t seed);

  /// Algorithm R: append below capacity, otherwise replace a uniform slot with
  /// probability capacity / seen.
  void insert(RegionRecord record);
  void insert(std::vector<RegionRecord> records);

  /// Pair-uniform selection; nullopt when the buffer is empty.
  std::optional<Selection> select(std::size_t n, Rng& rng) const;

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  std::uint64_t seen() const { return seen_; }
  const std::vector<RegionRecord>& slots() const { return slots_; }
  /// Number of records per (task_id, label).
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> pair_counts() const;

  static RehearsalBuffer from_records(std::size_t capacity, std::vector<RegionRecord> records);

 private:
  std::size_t capacity_;
  std::vector<RegionRecord> slots_;
  std::uint64_t seen_ = 0;
  Rng rng_;
};

/// Capacity in regions for a budget expressed in whole slides.
std::size_t regions_for_slides(double slides, double regions_per_slide = 220.0);

inline constexpr std::uint16_t kBufferSnapshotVersion = 1;

void write_buffer_snapshot(const RehearsalBuffer& buffer, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_buffer_snapshot(const RehearsalBuffer& buffer);

struct BufferSnapshot {
  std::uint64_t capacity = 0;
  std::vector<RegionRecord> records;
};
BufferSnapshot read_buffer_snapshot(const std::filesystem::path& path);
BufferSnapshot decode_buffer_snapshot(std::span<const std::uint8_t> bytes);

}  // namespace conslide
