#include "mirror/data_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mirror/errors.hpp"
#include "mirror/rng.hpp"

namespace mirror {

namespace {

constexpr char kSampleMagic[4] = {'M', 'I', 'R', 'D'};

bool id_is_file_safe(const std::string& id) {
  if (id.empty()) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' ||
           c == '.';
  });
}

// Little-endian byte writer/reader independent of host order.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void expect(std::size_t n) const { need(n); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const char* cursor() const { return bytes_.data() + pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": corrupt header or truncated file");
  }
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::filesystem::path sample_path(const std::filesystem::path& dir, const std::string& id) {
  return dir / ("sample_" + id + ".bin");
}

bool bitwise_equal(const FloatMatrix& a, const FloatMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

bool bitwise_equal(const FloatVector& a, const FloatVector& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

std::vector<int> Dataset::labels() const {
  std::vector<int> y;
  y.reserve(samples.size());
  for (const auto& s : samples) y.push_back(s.subtype);
  return y;
}

bool equal(const Dataset& a, const Dataset& b) {
  if (a.n_classes != b.n_classes || a.d_p != b.d_p || a.k_genes != b.k_genes || a.manifest != b.manifest ||
      a.samples.size() != b.samples.size())
    return false;
  if ((a.gene_ids == nullptr) != (b.gene_ids == nullptr)) return false;
  if (a.gene_ids && *a.gene_ids != *b.gene_ids) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& x = a.samples[i];
    const auto& y = b.samples[i];
    if (x.bag.slide_id != y.bag.slide_id || x.rna.sample_id != y.rna.sample_id || x.subtype != y.subtype ||
        std::bit_cast<std::uint64_t>(x.survival.time) != std::bit_cast<std::uint64_t>(y.survival.time) ||
        x.survival.event != y.survival.event || x.bag.coords != y.bag.coords ||
        !bitwise_equal(x.bag.features, y.bag.features) || !bitwise_equal(x.rna.values, y.rna.values))
      return false;
    if (x.rna.gene_ids && y.rna.gene_ids && *x.rna.gene_ids != *y.rna.gene_ids) return false;
  }
  return true;
}

void validate(const Dataset& ds) {
  if (ds.n_classes < 1) throw ValidationError("dataset: n_classes must be >= 1");
  if (ds.d_p < 1 || ds.k_genes < 1) throw ValidationError("dataset: d_p and k_genes must be >= 1");
  if (!ds.gene_ids || static_cast<int>(ds.gene_ids->size()) != ds.k_genes)
    throw ValidationError("dataset: gene panel size differs from k_genes");
  {
    std::set<std::string> seen(ds.gene_ids->begin(), ds.gene_ids->end());
    if (seen.size() != ds.gene_ids->size()) throw ValidationError("dataset: duplicated gene id in panel");
  }
  std::set<std::string> ids;
  for (const auto& s : ds.samples) {
    const std::string& id = s.bag.slide_id;
    auto fail = [&id](const std::string& what) { throw ValidationError("sample '" + id + "': " + what); };
    if (!id_is_file_safe(id)) fail("id must be non-empty and use only [A-Za-z0-9._-]");
    if (!ids.insert(id).second) fail("duplicated slide_id");
    if (s.rna.sample_id != id) fail("rna.sample_id '" + s.rna.sample_id + "' does not match slide_id");
    const auto n_raw = s.bag.features.rows();
    if (n_raw < 1) fail("bag has no patches");
    if (s.bag.features.cols() != ds.d_p) fail("feature dimension differs from dataset d_p");
    if (static_cast<Eigen::Index>(s.bag.coords.size()) != n_raw) fail("coords length differs from patch count");
    if (!s.bag.features.allFinite()) fail("non-finite patch feature");
    {
      std::set<GridCoord> c(s.bag.coords.begin(), s.bag.coords.end());
      if (c.size() != s.bag.coords.size()) fail("duplicated patch coordinate");
    }
    if (s.rna.values.size() != ds.k_genes) fail("expression length differs from k_genes");
    if (!s.rna.values.allFinite()) fail("non-finite expression value");
    if (s.rna.gene_ids && *s.rna.gene_ids != *ds.gene_ids) fail("gene panel differs from dataset panel");
    if (s.subtype < 0 || s.subtype >= ds.n_classes) fail("subtype outside [0, n_classes)");
    if (!(s.survival.time > 0.0) || !std::isfinite(s.survival.time)) fail("survival time must be positive");
  }
}

void write_sample_file(const PairedSample& s, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw(kSampleMagic, 4);
  w.u32(kDatasetFormatVersion);
  const auto n_raw = static_cast<std::uint32_t>(s.bag.features.rows());
  const auto d_p = static_cast<std::uint32_t>(s.bag.features.cols());
  const auto k = static_cast<std::uint32_t>(s.rna.values.size());
  w.u32(n_raw);
  w.u32(d_p);
  w.u32(k);
  for (Eigen::Index i = 0; i < s.bag.features.size(); ++i) w.f32(s.bag.features.data()[i]);
  for (const auto& c : s.bag.coords) {
    w.i32(c.row);
    w.i32(c.col);
  }
  for (Eigen::Index i = 0; i < s.rna.values.size(); ++i) w.f32(s.rna.values(i));
  w.i32(s.subtype);
  w.f64(s.survival.time);
  w.u8(s.survival.event ? 1 : 0);
  write_file(path, w.bytes());
}

PairedSample read_sample_file(const std::filesystem::path& path, const std::string& sample_id, GenePanelIds genes) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes, path.filename().string());
  r.expect(4);
  if (std::memcmp(r.cursor(), kSampleMagic, 4) != 0) throw FormatError(path.filename().string() + ": bad magic");
  r.skip(4);
  const std::uint32_t version = r.u32();
  if (version != kDatasetFormatVersion)
    throw FormatError(path.filename().string() + ": unsupported format version " + std::to_string(version));
  const std::uint32_t n_raw = r.u32();
  const std::uint32_t d_p = r.u32();
  const std::uint32_t k = r.u32();
  const std::uint64_t payload = 4ULL * n_raw * d_p + 8ULL * n_raw + 4ULL * k + 4 + 8 + 1;
  if (r.remaining() != payload)
    throw FormatError(path.filename().string() + ": corrupt header or truncated file (payload size mismatch)");
  PairedSample s;
  s.bag.slide_id = sample_id;
  s.bag.features.resize(n_raw, d_p);
  for (Eigen::Index i = 0; i < s.bag.features.size(); ++i) s.bag.features.data()[i] = r.f32();
  s.bag.coords.resize(n_raw);
  for (auto& c : s.bag.coords) {
    c.row = r.i32();
    c.col = r.i32();
  }
  s.rna.sample_id = sample_id;
  s.rna.gene_ids = std::move(genes);
  s.rna.values.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) s.rna.values(i) = r.f32();
  s.subtype = r.i32();
  s.survival.time = r.f64();
  s.survival.event = r.u8() != 0;
  return s;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  validate(ds);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json m;
  m["version"] = kDatasetFormatVersion;
  m["n_samples"] = ds.samples.size();
  m["n_classes"] = ds.n_classes;
  m["d_p"] = ds.d_p;
  m["k_genes"] = ds.k_genes;
  m["gene_ids"] = *ds.gene_ids;
  std::vector<std::string> ids;
  for (const auto& s : ds.samples) ids.push_back(s.bag.slide_id);
  m["sample_ids"] = ids;
  if (!ds.manifest.empty()) m["metadata"] = ds.manifest;
  write_file(dir / "manifest.json", m.dump(2) + "\n");
  for (const auto& s : ds.samples) write_sample_file(s, sample_path(dir, s.bag.slide_id));
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError("missing manifest: " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  Dataset ds;
  std::vector<std::string> ids;
  try {
    const auto version = m.at("version").get<std::uint32_t>();
    if (version != kDatasetFormatVersion)
      throw FormatError("manifest.json: unsupported version " + std::to_string(version));
    ds.n_classes = m.at("n_classes").get<int>();
    ds.d_p = m.at("d_p").get<int>();
    ds.k_genes = m.at("k_genes").get<int>();
    ds.gene_ids = std::make_shared<const std::vector<std::string>>(m.at("gene_ids").get<std::vector<std::string>>());
    ids = m.at("sample_ids").get<std::vector<std::string>>();
    if (m.at("n_samples").get<std::size_t>() != ids.size())
      throw FormatError("manifest.json: n_samples disagrees with sample_ids");
    if (m.contains("metadata")) ds.manifest = m.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  for (const auto& id : ids) {
    if (!id_is_file_safe(id)) throw FormatError("manifest.json: unsafe sample id '" + id + "'");
    const auto path = sample_path(dir, id);
    if (!std::filesystem::exists(path)) throw IoError("missing sample file: " + path.string());
    PairedSample s = read_sample_file(path, id, ds.gene_ids);
    if (s.bag.features.cols() != ds.d_p)
      throw DimensionError("sample '" + id + "': manifest d_p=" + std::to_string(ds.d_p) + " but file says " +
                           std::to_string(s.bag.features.cols()));
    if (s.rna.values.size() != ds.k_genes)
      throw DimensionError("sample '" + id + "': manifest k_genes=" + std::to_string(ds.k_genes) +
                           " but file says " + std::to_string(s.rna.values.size()));
    ds.samples.push_back(std::move(s));
  }
  validate(ds);
  return ds;
}

SampledBag sample_bag(const PatchFeatureBag& bag, int n_fixed, std::uint64_t seed) {
  if (n_fixed < 1) throw ValidationError("sample_bag: n_fixed must be >= 1");
  const int n_raw = static_cast<int>(bag.features.rows());
  if (n_raw < 1) throw ValidationError("sample_bag: empty bag '" + bag.slide_id + "'");
  Rng rng(mix_seed(seed));
  SampledBag out;
  out.rows.resize(static_cast<std::size_t>(n_fixed));
  if (n_raw >= n_fixed) {
    // Partial Fisher-Yates: first n_fixed entries of a uniform permutation.
    std::vector<int> perm(static_cast<std::size_t>(n_raw));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 0; i < n_fixed; ++i) {
      std::uniform_int_distribution<int> pick(i, n_raw - 1);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    std::copy_n(perm.begin(), n_fixed, out.rows.begin());
  } else {
    std::uniform_int_distribution<int> pick(0, n_raw - 1);
    for (auto& r : out.rows) r = pick(rng);
  }
  out.features.resize(n_fixed, bag.features.cols());
  out.coords.resize(static_cast<std::size_t>(n_fixed));
  for (int i = 0; i < n_fixed; ++i) {
    const int src = out.rows[static_cast<std::size_t>(i)];
    out.features.row(i) = bag.features.row(src);
    out.coords[static_cast<std::size_t>(i)] = bag.coords[static_cast<std::size_t>(src)];
  }
  return out;
}

Dataset subset(const Dataset& ds, const std::vector<int>& order) {
  Dataset out;
  out.n_classes = ds.n_classes;
  out.d_p = ds.d_p;
  out.k_genes = ds.k_genes;
  out.gene_ids = ds.gene_ids;
  out.manifest = ds.manifest;
  out.samples.reserve(order.size());
  for (int i : order) out.samples.push_back(ds.samples.at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace mirror
