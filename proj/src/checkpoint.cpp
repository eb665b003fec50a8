#include "mkdiff/tasks.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mkdiff {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'K', 'D', 'C'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error("truncated checkpoint " + path.string());
  return v;
}

nlohmann::json metadata(const Checkpoint& c) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : c.history)
    history.push_back(
        {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_metric", r.val_metric}, {"wall_ms", r.wall_ms}});
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : c.params.tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += static_cast<std::size_t>(t.size()) * sizeof(double);
  }
  return {{"architecture", to_json(c.arch)},
          {"config", to_json(c.config)},
          {"history", history},
          {"best_epoch", c.best_epoch},
          {"tensors", tensors}};
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const std::string meta = metadata(ckpt).dump();
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, Checkpoint::kVersion);
  write_pod<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (const auto& t : ckpt.params.tensors())
    os.write(reinterpret_cast<const char*>(t.data), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint");
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != Checkpoint::kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto len = read_pod<std::uint64_t>(is, path);
  if (len > (1ULL << 30)) throw std::runtime_error("corrupt checkpoint metadata length");
  std::string meta(len, '\0');
  if (!is.read(meta.data(), static_cast<std::streamsize>(len)))
    throw std::runtime_error("truncated checkpoint " + path.string());

  Checkpoint c;
  try {
    const auto j = nlohmann::json::parse(meta);
    c.arch = architecture_from_json(j.at("architecture"));
    c.config = train_config_from_json(j.at("config"));
    c.best_epoch = j.at("best_epoch").get<int>();
    for (const auto& r : j.at("history"))
      c.history.push_back({r.at("epoch").get<int>(), r.at("train_loss").get<double>(),
                           r.at("val_metric").get<double>(), r.at("wall_ms").get<double>()});
    c.params = init_params(c.arch, 0);
    auto refs = c.params.tensors();
    const auto& listed = j.at("tensors");
    if (listed.size() != refs.size()) throw std::runtime_error("tensor count mismatch");
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (listed[i].at("name").get<std::string>() != refs[i].name ||
          listed[i].at("shape")[0].get<Eigen::Index>() != refs[i].rows ||
          listed[i].at("shape")[1].get<Eigen::Index>() != refs[i].cols)
        throw std::runtime_error("tensor '" + refs[i].name + "' does not match the architecture");
    }
    for (auto& t : refs)
      if (!is.read(reinterpret_cast<char*>(t.data), static_cast<std::streamsize>(t.size() * sizeof(double))))
        throw std::runtime_error("truncated tensor data");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad checkpoint metadata in " + path.string() + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("bad checkpoint " + path.string() + ": " + e.what());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in " + path.string());
  return c;
}

}  // namespace mkdiff
