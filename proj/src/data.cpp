#include "conslide/data.hpp"

#include <zlib.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "conslide/errors.hpp"

namespace conslide {

using nlohmann::json;
namespace fs = std::filesystem;

namespace detail {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorCode::kIo, "write failed for " + path.string());
}

}  // namespace detail

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

void FeatureBag::validate() const {
  if (region_features.rank() != 2 || patch_features.rank() != 3)
    throw DimensionError("bag " + sample_id + ": expected region [M,C] and patch [M,N,C], got " +
                         shape_string(region_features.shape) + " and " + shape_string(patch_features.shape));
  const std::size_t m = region_features.dim(0), c = region_features.dim(1);
  if (m == 0 || c == 0 || patch_features.dim(1) == 0)
    throw DimensionError("bag " + sample_id + ": empty bag " + shape_string(patch_features.shape));
  if (patch_features.dim(0) != m || patch_features.dim(2) != c)
    throw DimensionError("bag " + sample_id + ": region " + shape_string(region_features.shape) +
                         " inconsistent with patch " + shape_string(patch_features.shape));
  require_finite(region_features.data, "bag region features");
  require_finite(patch_features.data, "bag patch features");
}

// --- CSFB ------------------------------------------------------------------

std::vector<std::uint8_t> encode_bag(const FeatureBag& bag) {
  bag.validate();
  detail::ByteWriter w;
  w.bytes("CSFB");
  w.u16(kBagFormatVersion);
  w.u32(bag.task_id);
  w.u32(bag.label);
  w.u32(static_cast<std::uint32_t>(bag.regions()));
  w.u32(static_cast<std::uint32_t>(bag.patches()));
  w.u32(static_cast<std::uint32_t>(bag.channels()));
  const std::size_t payload_begin = w.size();
  w.f64s(bag.region_features.data);
  w.f64s(bag.patch_features.data);
  const auto& buf = w.buffer();
  const std::uint32_t crc = crc32(std::span(buf).subspan(payload_begin));
  w.u32(crc);
  return std::move(w.buffer());
}

FeatureBag decode_bag(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "CSFB");
  r.expect_magic("CSFB");
  const auto version = r.u16();
  if (version != kBagFormatVersion)
    throw FormatError(FormatErrorCode::kUnsupportedVersion, "CSFB version " + std::to_string(version));
  FeatureBag bag;
  bag.task_id = r.u32();
  bag.label = r.u32();
  const std::size_t m = r.u32(), n = r.u32(), c = r.u32();
  const std::size_t payload_begin = r.pos();
  auto regions = r.f64s(m * c);
  auto patches = r.f64s(m * n * c);
  const std::size_t payload_end = r.pos();
  const std::uint32_t stored = r.u32();
  if (stored != crc32(r.slice(payload_begin, payload_end)))
    throw FormatError(FormatErrorCode::kChecksumMismatch, "CSFB payload CRC mismatch");
  if (r.remaining() != 0)
    throw FormatError(FormatErrorCode::kInvalidContent, "CSFB trailing bytes after checksum");
  bag.region_features = Tensor({m, c}, std::move(regions));
  bag.patch_features = Tensor({m, n, c}, std::move(patches));
  try {
    bag.validate();
  } catch (const std::exception& e) {
    throw FormatError(FormatErrorCode::kInvalidContent, e.what());
  }
  return bag;
}

void write_bag(const FeatureBag& bag, const fs::path& path) { detail::write_file(path, encode_bag(bag)); }

FeatureBag read_bag(const fs::path& path) {
  auto bag = decode_bag(detail::read_file(path));
  bag.sample_id = path.stem().string();
  return bag;
}

// --- manifests -------------------------------------------------------------

void Manifest::validate() const {
  std::set<std::string> ids;
  std::optional<std::uint32_t> channels;
  for (const auto& e : entries) {
    if (!ids.insert(e.sample_id).second) throw ConfigError("manifest: duplicate sample id " + e.sample_id);
    if (channels && *channels != e.channels)
      throw ConfigError("manifest: sample " + e.sample_id + " has C=" + std::to_string(e.channels) +
                        ", expected " + std::to_string(*channels));
    channels = e.channels;
  }
}

void write_manifest_jsonl(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  std::ostringstream os;
  for (const auto& e : entries) {
    json j = {{"sample_id", e.sample_id}, {"path", e.path}, {"task_id", e.task_id}, {"label", e.label},
              {"M", e.regions},           {"N", e.patches}, {"C", e.channels}};
    os << j.dump() << '\n';
  }
  const std::string s = os.str();
  detail::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<ManifestEntry> read_manifest_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorCode::kIo, "cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.sample_id = j.at("sample_id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.task_id = j.at("task_id").get<std::uint32_t>();
      e.label = j.at("label").get<std::uint32_t>();
      e.regions = j.at("M").get<std::uint32_t>();
      e.patches = j.at("N").get<std::uint32_t>();
      e.channels = j.at("C").get<std::uint32_t>();
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

// --- synthetic generator ---------------------------------------------------

void SyntheticSpec::validate() const {
  if (tasks == 0 || classes_per_task == 0) throw ConfigError("synthetic: tasks and classes_per_task must be >= 1");
  if (channels == 0 || patches == 0) throw ConfigError("synthetic: channels and patches must be >= 1");
  if (min_regions == 0 || min_regions > max_regions) throw ConfigError("synthetic: need 1 <= min_regions <= max_regions");
  if (!(sigma_between > 0.0)) throw ConfigError("synthetic: sigma_between must be > 0");
  if (!(sigma_patch >= 0.0)) throw ConfigError("synthetic: sigma_patch must be >= 0");
  const std::size_t k = total_classes();
  if (!train_counts.empty() && train_counts.size() != k) throw ConfigError("synthetic: train_counts needs one entry per class");
  if (!test_counts.empty() && test_counts.size() != k) throw ConfigError("synthetic: test_counts needs one entry per class");
  if (!task_names.empty() && task_names.size() != tasks) throw ConfigError("synthetic: task_names needs one entry per task");
  if (!class_names.empty() && class_names.size() != k) throw ConfigError("synthetic: class_names needs one entry per class");
}

SyntheticSpec tcga_mirror_spec() {
  SyntheticSpec s;
  s.tasks = 4;
  s.classes_per_task = 2;
  s.task_names = {"NSCLC", "BRCA", "RCC", "ESCA"};
  s.class_names = {"LUAD", "LUSC", "IDC", "ILC", "CCRCC", "PRCC", "ESAD", "ESCC"};
  const std::vector<std::size_t> cases = {492, 466, 726, 149, 498, 289, 65, 89};
  for (auto n : cases) {
    const auto scaled = static_cast<std::size_t>(std::lround(static_cast<double>(n) / 10.0));
    const auto train = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(scaled)));
    s.train_counts.push_back(train);
    s.test_counts.push_back(scaled - train);
  }
  return s;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  ds.name = "synthetic";
  const std::size_t k = spec.total_classes();
  const std::size_t c = spec.channels;
  for (std::size_t t = 0; t < spec.tasks; ++t) {
    TaskInfo info;
    info.task_id = static_cast<std::uint32_t>(t);
    info.name = spec.task_names.empty() ? "task" + std::to_string(t) : spec.task_names[t];
    info.class_begin = static_cast<std::uint32_t>(t * spec.classes_per_task);
    info.class_end = static_cast<std::uint32_t>((t + 1) * spec.classes_per_task);
    ds.tasks.push_back(info);
  }
  for (std::size_t cls = 0; cls < k; ++cls)
    ds.class_names.push_back(spec.class_names.empty() ? "class" + std::to_string(cls) : spec.class_names[cls]);

  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> means(k, std::vector<double>(c));
  for (auto& mu : means)
    for (auto& v : mu) v = spec.sigma_between * unit(rng);

  std::uniform_int_distribution<std::size_t> region_count(spec.min_regions, spec.max_regions);
  auto make_bag = [&](std::size_t cls, const std::string& id) {
    FeatureBag bag;
    bag.sample_id = id;
    bag.task_id = static_cast<std::uint32_t>(cls / spec.classes_per_task);
    bag.label = static_cast<std::uint32_t>(cls);
    const std::size_t m = region_count(rng), n = spec.patches;
    bag.region_features = Tensor({m, c});
    bag.patch_features = Tensor({m, n, c});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) bag.region_features[i * c + ch] = means[cls][ch] + unit(rng);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double noise = spec.sigma_patch > 0.0 ? spec.sigma_patch * unit(rng) : 0.0;
          bag.patch_features[(i * n + j) * c + ch] = bag.region_features[i * c + ch] + noise;
        }
    }
    return bag;
  };
  auto fill = [&](std::vector<FeatureBag>& out, const std::vector<std::size_t>& counts, std::size_t fallback,
                  const char* split) {
    for (std::size_t cls = 0; cls < k; ++cls) {
      const std::size_t count = counts.empty() ? fallback : counts[cls];
      for (std::size_t i = 0; i < count; ++i)
        out.push_back(make_bag(cls, std::string(split) + "_t" + std::to_string(cls / spec.classes_per_task) +
                                        "_c" + std::to_string(cls) + "_" + std::to_string(i)));
    }
  };
  fill(ds.train, spec.train_counts, spec.train_per_class, "train");
  fill(ds.test, spec.test_counts, spec.test_per_class, "test");
  return ds;
}

// --- dataset directories ---------------------------------------------------

namespace {

std::vector<ManifestEntry> write_split(const std::vector<FeatureBag>& bags, const fs::path& dir) {
  std::vector<ManifestEntry> entries;
  for (const auto& bag : bags) {
    const std::string rel = "bags/" + bag.sample_id + ".csfb";
    write_bag(bag, dir / rel);
    entries.push_back({bag.sample_id, rel, bag.task_id, bag.label, static_cast<std::uint32_t>(bag.regions()),
                       static_cast<std::uint32_t>(bag.patches()), static_cast<std::uint32_t>(bag.channels())});
  }
  return entries;
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "bags");
  write_manifest_jsonl(write_split(ds.train, dir), dir / "train.jsonl");
  write_manifest_jsonl(write_split(ds.test, dir), dir / "test.jsonl");
  json tasks = json::array();
  for (const auto& t : ds.tasks)
    tasks.push_back({{"task_id", t.task_id}, {"name", t.name}, {"class_begin", t.class_begin}, {"class_end", t.class_end}});
  const json meta = {{"name", ds.name}, {"class_names", ds.class_names}, {"tasks", tasks}};
  const std::string s = meta.dump(2) + "\n";
  detail::write_file(dir / "dataset.json", std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<TaskInfo> read_task_info(const fs::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw FormatError(FormatErrorCode::kIo, "missing " + (dir / "dataset.json").string());
  try {
    const json meta = json::parse(in);
    std::vector<TaskInfo> tasks;
    for (const auto& t : meta.at("tasks"))
      tasks.push_back({t.at("task_id").get<std::uint32_t>(), t.at("name").get<std::string>(),
                       t.at("class_begin").get<std::uint32_t>(), t.at("class_end").get<std::uint32_t>()});
    return tasks;
  } catch (const json::exception& ex) {
    throw ConfigError("dataset.json: " + std::string(ex.what()));
  }
}

std::vector<FeatureBag> load_bags(const std::vector<ManifestEntry>& entries, const fs::path& base_dir) {
  Manifest m;
  m.entries = entries;
  m.validate();
  std::vector<FeatureBag> bags;
  bags.reserve(entries.size());
  for (const auto& e : entries) {
    auto bag = read_bag(base_dir / e.path);
    bag.sample_id = e.sample_id;
    if (bag.task_id != e.task_id || bag.label != e.label || bag.regions() != e.regions ||
        bag.patches() != e.patches || bag.channels() != e.channels)
      throw FormatError(FormatErrorCode::kInvalidContent, "bag " + e.sample_id + " disagrees with its manifest entry");
    bags.push_back(std::move(bag));
  }
  return bags;
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.tasks = read_task_info(dir);
  {
    std::ifstream in(dir / "dataset.json");
    const json meta = json::parse(in);
    ds.name = meta.value("name", std::string("dataset"));
    ds.class_names = meta.value("class_names", std::vector<std::string>{});
  }
  ds.train = load_bags(read_manifest_jsonl(dir / "train.jsonl"), dir);
  ds.test = load_bags(read_manifest_jsonl(dir / "test.jsonl"), dir);
  return ds;
}

// --- tiling ----------------------------------------------------------------

TilingGeometry mock_tiling_geometry(std::size_t width_px, std::size_t height_px, std::size_t region_px,
                                    std::size_t patch_px) {
  if (width_px == 0 || height_px == 0 || region_px == 0 || patch_px == 0)
    throw ConfigError("tiling: dimensions must be positive");
  if (region_px % patch_px != 0)
    throw ConfigError("tiling: region size " + std::to_string(region_px) + " not divisible by patch size " +
                      std::to_string(patch_px));
  const std::size_t side = region_px / patch_px;
  return {(width_px / region_px) * (height_px / region_px), side * side};
}

}  // namespace conslide
