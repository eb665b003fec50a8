#include "mkdiff/pointset.hpp"
#include "mkdiff/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace mkdiff {
namespace fs = std::filesystem;

void PointCloud::validate(int n_classes) const {
  const auto n = coords.rows();
  if (n < 1) throw std::invalid_argument("point cloud is empty");
  if (coords.cols() != 3) throw std::invalid_argument("coords must have 3 columns");
  if (!coords.allFinite()) throw std::invalid_argument("coords contain non-finite values");
  if (features && features->rows() != n)
    throw std::invalid_argument("feature rows do not match point count");
  if (labels) {
    if (static_cast<Eigen::Index>(labels->size()) != n)
      throw std::invalid_argument("label count does not match point count");
    for (int l : *labels)
      if (l < 0 || l >= n_classes)
        throw std::invalid_argument("label " + std::to_string(l) + " out of range");
  }
  if (corr) {
    if (static_cast<Eigen::Index>(corr->size()) != n)
      throw std::invalid_argument("correspondence count does not match point count");
    std::set<std::int64_t> seen;
    for (auto c : *corr)
      if (c != kNoCorrespondence && !seen.insert(c).second)
        throw std::invalid_argument("duplicate correspondence index " + std::to_string(c));
  }
}

CloudFormat parse_cloud_format(const std::string& name) {
  if (name == "xyz-ascii" || name == "xyz") return CloudFormat::kXyzAscii;
  if (name == "ply-ascii" || name == "ply") return CloudFormat::kPlyAscii;
  if (name == "bin-f32" || name == "bin") return CloudFormat::kBinF32;
  throw std::invalid_argument("unknown cloud format '" + name + "'");
}

std::string to_string(CloudFormat format) {
  switch (format) {
    case CloudFormat::kXyzAscii: return "xyz-ascii";
    case CloudFormat::kPlyAscii: return "ply-ascii";
    case CloudFormat::kBinF32: return "bin-f32";
  }
  return "?";
}

CloudFormat format_from_extension(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ply") return CloudFormat::kPlyAscii;
  if (ext == ".bin") return CloudFormat::kBinF32;
  if (ext == ".xyz" || ext == ".txt" || ext == ".asc") return CloudFormat::kXyzAscii;
  throw std::invalid_argument("cannot infer cloud format from '" + path.string() + "'");
}

fs::path labels_sidecar(const fs::path& cloud_path) {
  return fs::path(cloud_path).replace_extension(".labels");
}

fs::path corr_sidecar(const fs::path& cloud_path) {
  return fs::path(cloud_path).replace_extension(".corr");
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

double parse_real(const std::string& tok, std::size_t line) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ParseError("invalid number '" + tok + "'", line);
  if (!std::isfinite(v)) throw ParseError("non-finite coordinate '" + tok + "'", line);
  return v;
}

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return in;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

Matrix rows_to_matrix(const std::vector<std::array<double, 3>>& rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int d = 0; d < 3; ++d) m(static_cast<Eigen::Index>(i), d) = rows[i][d];
  return m;
}

Matrix read_xyz(const fs::path& path) {
  auto in = open_in(path);
  std::vector<std::array<double, 3>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = split_ws(line);
    if (toks.empty() || toks[0][0] == '#') continue;
    if (toks.size() < 3) throw ParseError("expected 3 coordinates", lineno);
    rows.push_back({parse_real(toks[0], lineno), parse_real(toks[1], lineno),
                    parse_real(toks[2], lineno)});
  }
  return rows_to_matrix(rows);
}

Matrix read_ply(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next() || line != "ply") throw ParseError("missing 'ply' magic", lineno);
  std::size_t n_vertices = 0;
  bool in_vertex = false;
  bool seen_vertex = false;
  std::vector<std::string> props;
  while (true) {
    if (!next()) throw ParseError("unterminated PLY header", lineno);
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks[0] == "format") {
      if (toks.size() < 2 || toks[1] != "ascii")
        throw ParseError("only ASCII PLY is supported", lineno);
    } else if (toks[0] == "element") {
      if (toks.size() < 3) throw ParseError("malformed element line", lineno);
      in_vertex = toks[1] == "vertex";
      if (in_vertex) {
        if (seen_vertex) throw ParseError("duplicate vertex element", lineno);
        seen_vertex = true;
        try {
          n_vertices = std::stoul(toks[2]);
        } catch (...) {
          throw ParseError("invalid vertex count", lineno);
        }
      } else if (!seen_vertex) {
        throw ParseError("elements before 'vertex' are not supported", lineno);
      }
    } else if (toks[0] == "property") {
      if (in_vertex) {
        if (toks.size() < 3) throw ParseError("malformed property line", lineno);
        if (toks[1] == "list") throw ParseError("list property in vertex element", lineno);
        props.push_back(toks.back());
      }
    } else if (toks[0] == "end_header") {
      break;
    }
  }
  auto col = [&](const std::string& name) -> std::size_t {
    auto it = std::find(props.begin(), props.end(), name);
    if (it == props.end()) throw ParseError("vertex property '" + name + "' missing", lineno);
    return static_cast<std::size_t>(it - props.begin());
  };
  const std::size_t cx = col("x"), cy = col("y"), cz = col("z");
  std::vector<std::array<double, 3>> rows;
  rows.reserve(n_vertices);
  while (rows.size() < n_vertices) {
    if (!next()) throw ParseError("expected " + std::to_string(n_vertices) + " vertices", lineno);
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() < props.size()) throw ParseError("too few vertex properties", lineno);
    rows.push_back({parse_real(toks[cx], lineno), parse_real(toks[cy], lineno),
                    parse_real(toks[cz], lineno)});
  }
  return rows_to_matrix(rows);
}

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

Matrix read_bin(const fs::path& path) {
  auto in = open_in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MKPC", 4) != 0) throw ParseError("missing 'MKPC' magic (byte 0)", 1);
  const auto n = get_le<std::uint32_t>(in);
  if (!in) throw ParseError("truncated header (byte 4)", 1);
  Matrix m(n, 3);
  for (std::uint32_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) {
      const auto v = get_le<float>(in);
      if (!in)
        throw ParseError("truncated payload at byte " + std::to_string(8 + 12 * i + 4 * d), 1);
      if (!std::isfinite(v))
        throw ParseError("non-finite value at byte " + std::to_string(8 + 12 * i + 4 * d), 1);
      m(i, d) = v;
    }
  return m;
}

template <typename T>
std::vector<T> read_ints(const fs::path& path) {
  auto in = open_in(path);
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    T v{};
    auto [ptr, ec] = std::from_chars(toks[0].data(), toks[0].data() + toks[0].size(), v);
    if (ec != std::errc() || ptr != toks[0].data() + toks[0].size() || toks.size() != 1)
      throw ParseError("invalid integer in '" + path.filename().string() + "'", lineno);
    out.push_back(v);
  }
  return out;
}

template <typename T>
void write_ints(const std::vector<T>& values, const fs::path& path) {
  auto out = open_out(path);
  for (auto v : values) out << v << '\n';
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

}  // namespace

PointCloud load_cloud(const fs::path& path, CloudFormat format) {
  PointCloud cloud;
  switch (format) {
    case CloudFormat::kXyzAscii: cloud.coords = read_xyz(path); break;
    case CloudFormat::kPlyAscii: cloud.coords = read_ply(path); break;
    case CloudFormat::kBinF32: cloud.coords = read_bin(path); break;
  }
  if (cloud.coords.rows() == 0) throw std::runtime_error("'" + path.string() + "' holds no points");
  const auto n = cloud.size();
  if (auto lp = labels_sidecar(path); fs::exists(lp)) {
    auto labels = read_ints<int>(lp);
    if (labels.size() != n) throw ParseError("label side-car has wrong length", labels.size());
    cloud.labels = std::move(labels);
  }
  if (auto cp = corr_sidecar(path); fs::exists(cp)) {
    auto corr = read_ints<std::int64_t>(cp);
    if (corr.size() != n) throw ParseError("corr side-car has wrong length", corr.size());
    cloud.corr = std::move(corr);
  }
  return cloud;
}

void save_cloud(const PointCloud& cloud, const fs::path& path, CloudFormat format) {
  cloud.validate();
  const auto n = cloud.coords.rows();
  switch (format) {
    case CloudFormat::kXyzAscii: {
      auto out = open_out(path);
      out.precision(9);
      for (Eigen::Index i = 0; i < n; ++i)
        out << cloud.coords(i, 0) << ' ' << cloud.coords(i, 1) << ' ' << cloud.coords(i, 2) << '\n';
      if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
      break;
    }
    case CloudFormat::kPlyAscii: {
      auto out = open_out(path);
      out.precision(9);
      out << "ply\nformat ascii 1.0\nelement vertex " << n
          << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
      for (Eigen::Index i = 0; i < n; ++i)
        out << cloud.coords(i, 0) << ' ' << cloud.coords(i, 1) << ' ' << cloud.coords(i, 2) << '\n';
      if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
      break;
    }
    case CloudFormat::kBinF32: {
      auto out = open_out(path, std::ios::binary);
      out.write("MKPC", 4);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(n));
      for (Eigen::Index i = 0; i < n; ++i)
        for (int d = 0; d < 3; ++d) put_le<float>(out, static_cast<float>(cloud.coords(i, d)));
      if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
      break;
    }
  }
  if (cloud.labels) write_ints(*cloud.labels, labels_sidecar(path));
  if (cloud.corr) write_ints(*cloud.corr, corr_sidecar(path));
}

// Disturbances ----------------------------------------------------------------

PointCloud add_gaussian_noise(const PointCloud& cloud, double stddev, std::uint64_t seed) {
  if (!(stddev >= 0.0)) throw std::invalid_argument("noise std must be >= 0");
  PointCloud out = cloud;
  if (stddev == 0.0) return out;
  auto rng = make_rng(seed, "noise");
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index i = 0; i < out.coords.rows(); ++i)
    for (int d = 0; d < 3; ++d) out.coords(i, d) += normal(rng);
  return out;
}

PointCloud remove_points(const PointCloud& cloud, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0) || ratio >= 1.0) throw std::invalid_argument("removal ratio must be in [0, 1)");
  const auto n = cloud.size();
  const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(n) * (1.0 - ratio)));
  if (keep < 1) throw std::invalid_argument("removal would leave no points");
  if (keep == n) return cloud;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, "remove");
  // Partial Fisher-Yates; survivors keep their original relative order.
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());

  PointCloud out;
  out.coords.resize(static_cast<Eigen::Index>(keep), 3);
  if (cloud.features) out.features = Matrix(static_cast<Eigen::Index>(keep), cloud.features->cols());
  if (cloud.labels) out.labels = std::vector<int>(keep);
  if (cloud.corr) out.corr = std::vector<std::int64_t>(keep);
  for (std::size_t r = 0; r < keep; ++r) {
    const auto src = static_cast<Eigen::Index>(idx[r]);
    const auto dst = static_cast<Eigen::Index>(r);
    out.coords.row(dst) = cloud.coords.row(src);
    if (cloud.features) out.features->row(dst) = cloud.features->row(src);
    if (cloud.labels) (*out.labels)[r] = (*cloud.labels)[idx[r]];
    if (cloud.corr) (*out.corr)[r] = (*cloud.corr)[idx[r]];
  }
  return out;
}

PointCloud add_outliers(const PointCloud& cloud, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0)) throw std::invalid_argument("outlier ratio must be >= 0");
  const auto n = cloud.size();
  const auto extra = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratio));
  if (extra == 0) return cloud;
  const Eigen::RowVector3d lo = cloud.coords.colwise().minCoeff();
  const Eigen::RowVector3d hi = cloud.coords.colwise().maxCoeff();

  PointCloud out;
  const auto total = static_cast<Eigen::Index>(n + extra);
  out.coords.resize(total, 3);
  out.coords.topRows(static_cast<Eigen::Index>(n)) = cloud.coords;
  auto rng = make_rng(seed, "outliers");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Eigen::Index i = static_cast<Eigen::Index>(n); i < total; ++i)
    for (int d = 0; d < 3; ++d) out.coords(i, d) = std::min(hi[d], lo[d] + unit(rng) * (hi[d] - lo[d]));
  if (cloud.features) {
    Matrix f = Matrix::Ones(total, cloud.features->cols());
    f.topRows(static_cast<Eigen::Index>(n)) = *cloud.features;
    out.features = std::move(f);
  }
  if (cloud.labels) {
    auto labels = *cloud.labels;
    labels.resize(n + extra, kBackground);
    out.labels = std::move(labels);
  }
  if (cloud.corr) {
    auto corr = *cloud.corr;
    corr.resize(n + extra, kNoCorrespondence);
    out.corr = std::move(corr);
  }
  return out;
}

// Manifest --------------------------------------------------------------------

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (shapes[i].split == split) out.push_back(i);
  return out;
}

void DatasetManifest::validate() const {
  if (shapes.empty()) throw std::invalid_argument("manifest lists no shapes");
  if (n_classes < 1) throw std::invalid_argument("manifest n_classes must be >= 1");
  std::set<std::string> seen;
  for (const auto& s : shapes)
    if (!seen.insert(s.cloud.string()).second)
      throw std::invalid_argument("shape '" + s.cloud.string() + "' listed twice");
}

DatasetManifest load_manifest(const fs::path& path) {
  auto in = open_in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("manifest: ") + e.what(), 0);
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) -> fs::path {
    if (p.empty()) return {};
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  DatasetManifest m;
  m.n_classes = j.value("n_classes", kBodyParts);
  m.units_scale = j.value("units_scale", 1.0);
  for (const auto& s : j.at("shapes")) {
    ShapeEntry e;
    e.cloud = resolve(s.at("cloud").get<std::string>());
    e.labels = resolve(s.value("labels", std::string()));
    e.subject = s.value("subject", 0);
    e.pose = s.value("pose", 0);
    e.split = parse_split(s.at("split").get<std::string>());
    m.shapes.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) -> std::string {
    if (p.empty()) return {};
    auto r = fs::relative(p, base.empty() ? fs::path(".") : base);
    return r.empty() ? p.string() : r.generic_string();
  };
  nlohmann::json j;
  j["n_classes"] = manifest.n_classes;
  j["units_scale"] = manifest.units_scale;
  j["shapes"] = nlohmann::json::array();
  for (const auto& s : manifest.shapes) {
    j["shapes"].push_back({{"cloud", rel(s.cloud)},
                           {"labels", rel(s.labels)},
                           {"subject", s.subject},
                           {"pose", s.pose},
                           {"split", to_string(s.split)}});
  }
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

PointCloud load_shape(const ShapeEntry& entry) {
  auto cloud = load_cloud(entry.cloud, format_from_extension(entry.cloud));
  if (!entry.labels.empty() && entry.labels != labels_sidecar(entry.cloud)) {
    auto labels = read_ints<int>(entry.labels);
    if (labels.size() != cloud.size()) throw ParseError("label file has wrong length", labels.size());
    cloud.labels = std::move(labels);
  }
  return cloud;
}

}  // namespace mkdiff
