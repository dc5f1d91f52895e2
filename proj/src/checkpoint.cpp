// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint format: magic "NMCK", u32 version, u64 header length, JSON header
// (kind, config, plan, trainable mask, stage, tensor count), then per tensor:
// u64 name length, name, u64 rank, u64 dims, row-major f64 little-endian data.

#include <cstring>
#include <fstream>

#include "json_util.hpp"
#include "nm/common.hpp"
#include "nm/model.hpp"

namespace nm {
namespace {

constexpr char kMagic[4] = {'N', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw FormatError("truncated checkpoint '" + path + "' (while reading u32)");
  return v;
}

std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw FormatError("truncated checkpoint '" + path + "' (while reading u64)");
  return v;
}

template <class ModelT>
void save_impl(ModelT& model, const nlohmann::json& header, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  const std::string header_str = header.dump();
  write_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  for (const auto& ref : param_refs(model)) {
    write_u64(out, ref.name.size());
    out.write(ref.name.data(), static_cast<std::streamsize>(ref.name.size()));
    write_u64(out, ref.tensor->rank());
    for (std::size_t i = 0; i < ref.tensor->rank(); ++i) write_u64(out, ref.tensor->dim(i));
    out.write(reinterpret_cast<const char*>(ref.tensor->data()),
              static_cast<std::streamsize>(ref.tensor->size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

template <class ModelT>
void read_tensors(std::ifstream& in, const std::string& path, ModelT& model) {
  for (auto& ref : param_refs(model)) {
    const std::uint64_t name_len = read_u64(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw FormatError("truncated checkpoint '" + path + "' (tensor name)");
    if (name != ref.name)
      throw FormatError("checkpoint '" + path + "': unexpected tensor '" + name + "', expected '" +
                        ref.name + "'");
    const std::uint64_t rank = read_u64(in, path);
    if (rank != ref.tensor->rank())
      throw FormatError("shape mismatch for '" + name + "': rank " + std::to_string(rank) +
                        ", expected " + std::to_string(ref.tensor->rank()));
    for (std::size_t i = 0; i < rank; ++i) {
      const std::uint64_t dim = read_u64(in, path);
      if (dim != ref.tensor->dim(i))
        throw FormatError("shape mismatch for '" + name + "': dim " + std::to_string(i) + " is " +
                          std::to_string(dim) + ", expected " +
                          std::to_string(ref.tensor->dim(i)));
    }
    if (!in.read(reinterpret_cast<char*>(ref.tensor->data()),
                 static_cast<std::streamsize>(ref.tensor->size() * sizeof(double))))
      throw FormatError("truncated checkpoint '" + path + "' (tensor '" + name + "' payload)");
  }
  // Nothing may follow the last tensor.
  char extra = 0;
  if (in.read(&extra, 1))
    throw FormatError("checkpoint '" + path + "' has trailing bytes after the last tensor");
}

}  // namespace

void save_checkpoint(const DenseModel& model, const std::string& path) {
  nlohmann::json header;
  header["kind"] = "dense";
  header["config"] = config_to_json(model.config);
  header["tensor_count"] = param_refs(model).size();
  save_impl(model, header, path);
}

void save_checkpoint(const MoEModel& model, const std::string& path) {
  nlohmann::json header;
  header["kind"] = "moe";
  header["config"] = config_to_json(model.base.config);
  header["plan"] = plan_to_json(model.plan);
  header["stage"] = model.stage;
  header["trainable"] = model.trainable;
  header["tensor_count"] = param_refs(model).size();
  save_impl(model, header, path);
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  const std::uint32_t version = read_u32(in, path);
  if (version != kVersion)
    throw FormatError("checkpoint '" + path + "' has unsupported version " +
                      std::to_string(version));
  const std::uint64_t header_len = read_u64(in, path);
  std::string header_str(header_len, '\0');
  if (!in.read(header_str.data(), static_cast<std::streamsize>(header_len)))
    throw FormatError("truncated checkpoint '" + path + "' (header)");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint '" + path + "': bad header JSON: " + e.what());
  }

  LoadedModel loaded;
  const std::string kind = header.at("kind").get<std::string>();
  const ModelConfig config = config_from_json(header.at("config"));
  if (kind == "dense") {
    loaded.is_moe = false;
    loaded.dense = init_dense(config, 0);
    read_tensors(in, path, loaded.dense);
  } else if (kind == "moe") {
    loaded.is_moe = true;
    const AllocationPlan plan = plan_from_json(header.at("plan"));
    loaded.moe = upcycle_to_moe(init_dense(config, 0), plan, 0);
    loaded.moe.stage = header.value("stage", 1);
    if (header.contains("trainable"))
      loaded.moe.trainable = header.at("trainable").get<std::map<std::string, bool>>();
    read_tensors(in, path, loaded.moe);
  } else {
    throw FormatError("checkpoint '" + path + "': unknown kind '" + kind + "'");
  }
  return loaded;
}

}  // namespace nm
