#include "conslide/buro.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "binary_io.hpp"
#include "conslide/errors.hpp"

namespace conslide {
namespace {

RegionRecord region_record(const FeatureBag& bag, std::size_t i) {
  const std::size_t n = bag.patches(), c = bag.channels();
  RegionRecord r;
  r.region_feature = Tensor({c}, std::vector<double>(bag.region_features.data.begin() + static_cast<std::ptrdiff_t>(i * c),
                                                     bag.region_features.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * c)));
  r.patch_features = Tensor({n, c}, std::vector<double>(bag.patch_features.data.begin() + static_cast<std::ptrdiff_t>(i * n * c),
                                                        bag.patch_features.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * n * c)));
  r.task_id = bag.task_id;
  r.label = bag.label;
  r.source_id = bag.sample_id + "#" + std::to_string(i);
  return r;
}

// First k entries of `idx` become a uniform sample without replacement.
void partial_shuffle(std::vector<std::size_t>& idx, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
}

}  // namespace

std::vector<RegionRecord> breakup(const FeatureBag& bag, std::size_t sample_size, Rng& rng) {
  if (sample_size < 1) throw ConfigError("breakup: sample size must be >= 1");
  bag.validate();
  const std::size_t m = bag.regions();
  const std::size_t k = std::min(sample_size, m);
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  partial_shuffle(idx, k, rng);
  std::vector<RegionRecord> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(region_record(bag, idx[i]));
  return out;
}

std::vector<RegionRecord> all_regions(const FeatureBag& bag) {
  bag.validate();
  std::vector<RegionRecord> out;
  for (std::size_t i = 0; i < bag.regions(); ++i) out.push_back(region_record(bag, i));
  return out;
}

FeatureBag reorganize(std::span<const RegionRecord> records) {
  if (records.empty()) throw ConfigError("reorganize: no records");
  const auto& first = records.front();
  const std::size_t n = first.patches(), c = first.channels();
  FeatureBag bag;
  bag.task_id = first.task_id;
  bag.label = first.label;
  bag.sample_id = "replay";
  std::vector<double> regions, patches;
  regions.reserve(records.size() * c);
  patches.reserve(records.size() * n * c);
  for (const auto& r : records) {
    if (r.task_id != first.task_id || r.label != first.label)
      throw ConfigError("reorganize: records mix (task,label) pairs");
    if (r.channels() != c || r.patches() != n)
      throw DimensionError("reorganize: record " + r.source_id + " has shape " + shape_string(r.patch_features.shape) +
                           ", expected [" + std::to_string(n) + "," + std::to_string(c) + "]");
    regions.insert(regions.end(), r.region_feature.data.begin(), r.region_feature.data.end());
    patches.insert(patches.end(), r.patch_features.data.begin(), r.patch_features.data.end());
  }
  bag.region_features = Tensor({records.size(), c}, std::move(regions));
  bag.patch_features = Tensor({records.size(), n, c}, std::move(patches));
  return bag;
}

RehearsalBuffer::RehearsalBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  slots_.reserve(capacity);
}

void RehearsalBuffer::insert(RegionRecord record) {
  ++seen_;
  if (slots_.size() < capacity_) {
    slots_.push_back(std::move(record));
    return;
  }
  if (capacity_ == 0) return;
  std::uniform_int_distribution<std::uint64_t> pick(0, seen_ - 1);
  const std::uint64_t j = pick(rng_);
  if (j < capacity_) slots_[j] = std::move(record);
}

void RehearsalBuffer::insert(std::vector<RegionRecord> records) {
  for (auto& r : records) insert(std::move(r));
}

std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> RehearsalBuffer::pair_counts() const {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> counts;
  for (const auto& r : slots_) ++counts[{r.task_id, r.label}];
  return counts;
}

std::optional<Selection> RehearsalBuffer::select(std::size_t n, Rng& rng) const {
  if (slots_.empty() || n == 0) return std::nullopt;
  const auto counts = pair_counts();
  std::uniform_int_distribution<std::size_t> pick_pair(0, counts.size() - 1);
  auto it = counts.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(pick_pair(rng)));
  const auto [task, label] = it->first;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].task_id == task && slots_[i].label == label) idx.push_back(i);
  const std::size_t k = std::min(n, idx.size());
  partial_shuffle(idx, k, rng);
  Selection sel;
  sel.task_id = task;
  sel.label = label;
  for (std::size_t i = 0; i < k; ++i) sel.records.push_back(slots_[idx[i]]);
  return sel;
}

RehearsalBuffer RehearsalBuffer::from_records(std::size_t capacity, std::vector<RegionRecord> records) {
  if (records.size() > capacity) throw ConfigError("buffer: more records than capacity");
  RehearsalBuffer b(capacity, 0);
  b.seen_ = records.size();
  b.slots_ = std::move(records);
  return b;
}

std::size_t regions_for_slides(double slides, double regions_per_slide) {
  if (!(slides >= 0.0) || !(regions_per_slide > 0.0)) throw ConfigError("buffer: invalid slide budget");
  return static_cast<std::size_t>(std::llround(slides * regions_per_slide));
}

std::vector<std::uint8_t> encode_buffer_snapshot(const RehearsalBuffer& buffer) {
  detail::ByteWriter w;
  w.bytes("CSBF");
  w.u16(kBufferSnapshotVersion);
  w.u64(buffer.capacity());
  w.u64(buffer.size());
  for (const auto& r : buffer.slots()) {
    w.u32(r.task_id);
    w.u32(r.label);
    w.u32(static_cast<std::uint32_t>(r.patches()));
    w.u32(static_cast<std::uint32_t>(r.channels()));
    w.f64s(r.region_feature.data);
    w.f64s(r.patch_features.data);
  }
  return std::move(w.buffer());
}

void write_buffer_snapshot(const RehearsalBuffer& buffer, const std::filesystem::path& path) {
  detail::write_file(path, encode_buffer_snapshot(buffer));
}

BufferSnapshot decode_buffer_snapshot(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "CSBF");
  r.expect_magic("CSBF");
  const auto version = r.u16();
  if (version != kBufferSnapshotVersion)
    throw FormatError(FormatErrorCode::kUnsupportedVersion, "CSBF version " + std::to_string(version));
  BufferSnapshot snap;
  snap.capacity = r.u64();
  const std::uint64_t count = r.u64();
  if (count > snap.capacity) throw FormatError(FormatErrorCode::kInvalidContent, "CSBF record count exceeds capacity");
  for (std::uint64_t i = 0; i < count; ++i) {
    RegionRecord rec;
    rec.task_id = r.u32();
    rec.label = r.u32();
    const std::size_t n = r.u32(), c = r.u32();
    rec.region_feature = Tensor({c}, r.f64s(c));
    rec.patch_features = Tensor({n, c}, r.f64s(n * c));
    rec.source_id = "snapshot#" + std::to_string(i);
    snap.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw FormatError(FormatErrorCode::kInvalidContent, "CSBF trailing bytes");
  return snap;
}

BufferSnapshot read_buffer_snapshot(const std::filesystem::path& path) {
  return decode_buffer_snapshot(detail::read_file(path));
}

}  // namespace conslide
