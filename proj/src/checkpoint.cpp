#include "lmliqa/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lmliqa/config.hpp"
#include "lmliqa/errors.hpp"

namespace lmliqa {

namespace {

constexpr char kMagic[8] = {'L', 'M', 'L', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ValidationError("truncated checkpoint: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  put<std::uint32_t>(out, kFormatVersion);
  const std::string cfg = nlohmann::json(state.config).dump();
  put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::uint64_t>(out, state.version);
  put<std::uint64_t>(out, state.entries.size());
  for (const auto& e : state.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(state.values.data() + e.offset),
              static_cast<std::streamsize>(e.size * sizeof(double)));
  }
  if (!out) throw ValidationError("failed writing checkpoint: " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw ValidationError("not a checkpoint: " + path);
  if (get<std::uint32_t>(in, path) != kFormatVersion) {
    throw ValidationError("unsupported checkpoint version in " + path);
  }
  const auto cfg_len = get<std::uint64_t>(in, path);
  if (cfg_len > (1u << 20)) throw ValidationError("corrupt checkpoint header: " + path);
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw ValidationError("truncated checkpoint: " + path);

  ModelState state;
  try {
    state.config = nlohmann::json::parse(cfg).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad checkpoint config in " + path + ": " + e.what());
  }
  state.entries = parameter_layout(state.config);
  state.values.assign(state.entries.back().offset + state.entries.back().size, 0.0);
  state.version = get<std::uint64_t>(in, path);

  const auto count = get<std::uint64_t>(in, path);
  if (count != state.entries.size()) {
    throw ShapeError("checkpoint has " + std::to_string(count) + " arrays, config implies " +
                     std::to_string(state.entries.size()));
  }
  for (const auto& e : state.entries) {
    const auto name_len = get<std::uint32_t>(in, path);
    if (name_len > 4096) throw ValidationError("corrupt array name in " + path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw ValidationError("corrupt array rank in " + path);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, path);
    if (name != e.name || shape != e.shape) {
      throw ShapeError("checkpoint array '" + name + "' does not match expected '" + e.name + "'");
    }
    in.read(reinterpret_cast<char*>(state.values.data() + e.offset),
            static_cast<std::streamsize>(e.size * sizeof(double)));
    if (!in) throw ValidationError("truncated checkpoint: " + path);
  }
  for (std::size_t i = 0; i < state.values.size(); ++i) {
    if (!std::isfinite(state.values[i])) {
      throw NumericalError("non-finite value in checkpoint at " + parameter_name_at(state, i));
    }
  }
  return state;
}

}  // namespace lmliqa
