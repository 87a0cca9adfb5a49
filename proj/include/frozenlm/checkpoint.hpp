#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "frozenlm/param_store.hpp"

// Checkpoint directory layout:
//   manifest.json  parameter names, shapes, partition tags, precision,
//                  per-tensor byte hashes and payload offsets
//   data.bin       raw little-endian tensor payloads, concatenated

namespace frozenlm {

namespace fs = std::filesystem;
using json = nlohmann::json;

template <class S>
constexpr const char* precision_tag() {
  if constexpr (sizeof(S) == 4)
    return "f32";
  else
    return "f64";
}

template <class S>
void save_checkpoint(const ParamStore<S>& store, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream bin(dir / "data.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + (dir / "data.bin").string());
  json manifest;
  manifest["format_version"] = 1;
  manifest["precision"] = precision_tag<S>();
  manifest["params"] = json::array();
  int64_t offset = 0;
  for (const auto& name : store.names()) {
    auto t = store.get(name);
    json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["partition"] = partition_name(store.partition(name));
    p["hash"] = hex64(store.tensor_hash(name));
    p["offset"] = offset;
    p["count"] = t.size();
    manifest["params"].push_back(p);
    bin.write(reinterpret_cast<const char*>(t.val().data()),
              std::streamsize(t.val().size() * sizeof(S)));
    offset += t.size() * int64_t(sizeof(S));
  }
  write_text((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

// Loads every checkpointed tensor into `store` under its saved name,
// verifying payload hashes. Partition tags are restored unless
// `force_partition` overrides them.
template <class S>
void load_checkpoint(ParamStore<S>& store, const fs::path& dir,
                     std::optional<Partition> force_partition = std::nullopt) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  json manifest = json::parse(mf);
  if (manifest.at("precision").get<std::string>() != precision_tag<S>())
    throw std::runtime_error("checkpoint precision mismatch: expected " +
                             std::string(precision_tag<S>()));
  std::ifstream bin(dir / "data.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + (dir / "data.bin").string());
  for (const auto& p : manifest.at("params")) {
    const auto name = p.at("name").get<std::string>();
    Shape shape = p.at("shape").get<Shape>();
    const auto count = p.at("count").get<int64_t>();
    std::vector<S> data(static_cast<size_t>(count));
    bin.seekg(p.at("offset").get<int64_t>());
    bin.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(S)));
    if (!bin) throw std::runtime_error("checkpoint payload truncated at " + name);
    const auto h = hex64(fnv1a64(data.data(), data.size() * sizeof(S)));
    if (h != p.at("hash").get<std::string>())
      throw std::runtime_error("checkpoint hash mismatch for " + name);
    Partition part = p.at("partition").get<std::string>() == "frozen" ? Partition::frozen
                                                                      : Partition::trainable;
    if (force_partition) part = *force_partition;
    store.add(name, std::move(shape), part, std::move(data));
  }
}

}  // namespace frozenlm
