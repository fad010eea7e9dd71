#pragma once

// Checkpoint files: one JSON header line (format version, model config,
// tensor manifest with byte offsets, optional metadata), a newline, then the
// tensors as little-endian 32-bit floats in manifest order. Loading widens
// back to double.

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "cdt/errors.hpp"
#include "cdt/jsonio.hpp"
#include "cdt/model.hpp"
#include "cdt/optim.hpp"

namespace cdt::ckpt {

inline constexpr const char* kFormat = "cdt-checkpoint";
inline constexpr int kVersion = 1;

inline json config_to_json(const model::ModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"vocab_size", c.vocab_size},
          {"max_seq", c.max_seq},
          {"position_scheme", model::to_string(c.position_scheme)},
          {"init_seed", c.init_seed}};
}

inline model::ModelConfig config_from_json(const json& j, const std::string& where = "model") {
  reject_unknown_keys(j, {"n_layers", "n_heads", "d_model", "vocab_size", "max_seq", "position_scheme", "init_seed"},
                      where);
  model::ModelConfig c;
  c.n_layers = get_or<std::size_t>(j, "n_layers", c.n_layers, where);
  c.n_heads = get_or<std::size_t>(j, "n_heads", c.n_heads, where);
  c.d_model = get_or<std::size_t>(j, "d_model", c.d_model, where);
  c.vocab_size = get_or<std::size_t>(j, "vocab_size", c.vocab_size, where);
  c.max_seq = get_or<std::size_t>(j, "max_seq", c.max_seq, where);
  c.position_scheme = model::position_scheme_from(get_or<std::string>(j, "position_scheme", "learned", where));
  c.init_seed = get_or<std::uint64_t>(j, "init_seed", c.init_seed, where);
  c.validate();
  return c;
}

struct Checkpoint {
  model::Parameters params;
  std::optional<optim::AdamState> adam;
  json meta = json::object();
};

namespace detail {

inline void put_f32(std::string& out, double x) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

inline double get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= std::uint32_t(p[b]) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  const auto& p = ck.params;
  std::vector<std::pair<std::string, const Tensor*>> order;
  for (std::size_t i = 0; i < p.size(); ++i) order.emplace_back(p.names[i], &p.tensors[i]);
  if (ck.adam) {
    if (ck.adam->m.size() != p.size() || ck.adam->v.size() != p.size())
      throw DimensionError("optimizer state does not match the parameter count");
    for (std::size_t i = 0; i < p.size(); ++i) order.emplace_back("adam.m/" + p.names[i], &ck.adam->m[i]);
    for (std::size_t i = 0; i < p.size(); ++i) order.emplace_back("adam.v/" + p.names[i], &ck.adam->v[i]);
  }
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : order) {
    manifest.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += 4 * t->size();
  }
  json header = {{"format", kFormat},   {"version", kVersion}, {"config", config_to_json(p.config)},
                 {"tensors", manifest}, {"data_bytes", offset}, {"meta", ck.meta}};
  if (ck.adam) header["adam_step"] = ck.adam->step;
  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + offset);
  for (const auto& [_, t] : order)
    for (double x : t->storage()) detail::put_f32(out, x);
  return out;
}

inline Checkpoint deserialize(std::string_view bytes, const std::string& origin = "checkpoint") {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw IntegrityError(origin + ": no header line");
  json h;
  try {
    h = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    throw IntegrityError(origin + ": unreadable header: " + e.what());
  }
  if (h.value("format", "") != kFormat || h.value("version", 0) != kVersion)
    throw IntegrityError(origin + ": not a version " + std::to_string(kVersion) + " checkpoint");
  const auto data = bytes.substr(nl + 1);
  if (data.size() != h.at("data_bytes").get<std::size_t>())
    throw IntegrityError(origin + ": expected " + h.at("data_bytes").dump() + " data bytes, found " +
                         std::to_string(data.size()));

  Checkpoint ck;
  ck.params = model::init_params(config_from_json(h.at("config"), origin + ".config"));
  ck.meta = h.value("meta", json::object());
  const bool has_adam = h.contains("adam_step");
  if (has_adam) {
    ck.adam = optim::AdamState::zeros_like(ck.params.tensors);
    ck.adam->step = h.at("adam_step").get<std::uint64_t>();
  }
  const auto& manifest = h.at("tensors");
  const std::size_t n = ck.params.size();
  if (manifest.size() != (has_adam ? 3 * n : n)) throw IntegrityError(origin + ": tensor manifest has the wrong length");
  const auto* raw = reinterpret_cast<const unsigned char*>(data.data());
  for (std::size_t k = 0; k < manifest.size(); ++k) {
    const std::size_t slot = k % n;
    Tensor& dst = k < n ? ck.params.tensors[slot] : (k < 2 * n ? ck.adam->m[slot] : ck.adam->v[slot]);
    const std::string prefix = k < n ? "" : (k < 2 * n ? "adam.m/" : "adam.v/");
    const auto& e = manifest[k];
    if (e.at("name").get<std::string>() != prefix + ck.params.names[slot] ||
        e.at("shape").get<Shape>() != dst.shape())
      throw IntegrityError(origin + ": manifest entry " + std::to_string(k) + " (" + e.at("name").dump() +
                           ") does not match the model layout");
    const auto off = e.at("offset").get<std::size_t>();
    if (off + 4 * dst.size() > data.size()) throw IntegrityError(origin + ": tensor data out of range");
    auto& s = dst.storage();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = detail::get_f32(raw + off + 4 * i);
  }
  return ck;
}

inline void save(const std::string& path, const Checkpoint& ck) { write_file(path, serialize(ck)); }

inline Checkpoint load(const std::string& path) { return deserialize(read_file(path), path); }

}  // namespace cdt::ckpt
