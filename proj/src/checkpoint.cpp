#include "sprout/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <json.hpp>
#include <sstream>

#include "sprout/error.hpp"

namespace sprout {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blocks are written as native little-endian doubles");

constexpr char kMagic[8] = {'S', 'P', 'R', 'C', 'K', 'P', 'T', '\0'};

nlohmann::json spec_json(const ModelSpec& s) {
  return {{"arch", to_string(s.arch)},  {"width_factor", s.width_factor},
          {"channels", s.channels},     {"height", s.height},
          {"width", s.width},           {"num_classes", s.num_classes},
          {"pool", s.pool}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.width_factor = j.at("width_factor").get<std::size_t>();
  s.channels = j.at("channels").get<std::size_t>();
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.pool = j.at("pool").get<std::size_t>();
  s.validate();
  return s;
}

void write_doubles(std::ofstream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const Model& m = ckpt.model;
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < m.names.size(); ++i)
    params.push_back({{"name", m.names[i]}, {"shape", m.params[i].shape()}});
  nlohmann::json header = {{"format", "sproutlab-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"model", spec_json(m.spec)},
                           {"params", params},
                           {"beta_dim", ckpt.log_beta.size()},
                           {"config", ckpt.config},
                           {"epoch", ckpt.epoch},
                           {"seed", ckpt.seed},
                           {"seed_lineage", ckpt.seed_lineage}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : m.params) write_doubles(out, p.data());
  write_doubles(out, ckpt.log_beta);
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(where + ": bad magic");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (bytes.size() < 16 + len) throw DataError(where + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed header: " + e.what());
  }
  try {
    if (header.at("version").get<int>() != kCheckpointVersion)
      throw DataError(where + ": version " + header.at("version").dump() + ", expected " +
                      std::to_string(kCheckpointVersion));
    Checkpoint ck;
    ck.model.spec = spec_from_json(header.at("model"));
    const auto expected = ck.model.spec.parameter_shapes();
    const auto& params = header.at("params");
    if (params.size() != expected.size())
      throw DataError(where + ": parameter count does not match the model spec");
    std::size_t at = 16 + len;
    auto take = [&](std::size_t count) {
      if (bytes.size() < at + count * sizeof(double)) throw DataError(where + ": truncated data");
      std::vector<double> v(count);
      std::memcpy(v.data(), bytes.data() + at, count * sizeof(double));
      at += count * sizeof(double);
      return v;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto name = params[i].at("name").get<std::string>();
      const auto shape = params[i].at("shape").get<ad::Shape>();
      if (name != expected[i].first || shape != expected[i].second)
        throw DataError(where + ": parameter " + name + " " + ad::to_string(shape) +
                        " does not match spec " + expected[i].first + " " +
                        ad::to_string(expected[i].second));
      ck.model.names.push_back(name);
      ck.model.params.emplace_back(shape, take(ad::numel(shape)));
    }
    ck.log_beta = take(header.at("beta_dim").get<std::size_t>());
    if (at != bytes.size()) throw DataError(where + ": trailing bytes");
    ck.config = header.at("config").get<std::map<std::string, std::string>>();
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.seed_lineage = header.at("seed_lineage").get<std::vector<std::uint64_t>>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(where + ": " + e.what());
  }
}

std::string checkpoint_id(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  // FNV-1a, 64 bit
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace sprout
