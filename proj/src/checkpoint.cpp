// SPDX-License-Identifier: Apache-2.0
#include "matml/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "matml/common.hpp"

namespace matml {

namespace {

constexpr std::uint32_t kFormatVersion = 1;

void describe_tensors(nlohmann::ordered_json& arr, const ParamMap& params,
                      const std::string& role) {
  for (const auto& [name, t] : params) {
    nlohmann::ordered_json e;
    e["role"] = role;
    e["name"] = name;
    e["shape"] = t.shape;
    arr.push_back(std::move(e));
  }
}

void write_payload(std::ofstream& out, const ParamMap& params) {
  for (const auto& [name, t] : params)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::ordered_json header;
  header["format_version"] = kFormatVersion;
  header["architecture"] = ckpt.architecture;
  header["model_config"] = nlohmann::json::parse(
      ckpt.model_config_json.empty() ? "{}" : ckpt.model_config_json);
  header["trainer_config"] = nlohmann::json::parse(
      ckpt.trainer_config_json.empty() ? "{}" : ckpt.trainer_config_json);
  header["task"] = ckpt.task;
  header["epoch"] = ckpt.epoch;
  header["global_step"] = ckpt.global_step;
  header["lr"] = ckpt.lr;
  header["rng_state"] = ckpt.rng_state;
  header["normalizer"] = {{"mean", ckpt.normalizer.mean}, {"std", ckpt.normalizer.std}};
  header["adam_step"] = ckpt.adam_step;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  describe_tensors(tensors, ckpt.params, "param");
  describe_tensors(tensors, ckpt.adam_m, "adam_m");
  describe_tensors(tensors, ckpt.adam_v, "adam_v");
  header["tensors"] = std::move(tensors);

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_checkpoint: cannot open '" + path + "' for writing");
  const std::uint64_t header_bytes = text.size();
  out.write(reinterpret_cast<const char*>(&header_bytes), sizeof header_bytes);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_payload(out, ckpt.params);
  write_payload(out, ckpt.adam_m);
  write_payload(out, ckpt.adam_v);
  if (!out) fail("save_checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_checkpoint: cannot open '" + path + "'");
  std::uint64_t header_bytes = 0;
  in.read(reinterpret_cast<char*>(&header_bytes), sizeof header_bytes);
  if (!in) fail("load_checkpoint: truncated header length");
  std::string text(header_bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_bytes));
  if (!in) fail("load_checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("load_checkpoint: bad header: ") + e.what());
  }
  const auto version = header.at("format_version").get<std::uint32_t>();
  if (version != kFormatVersion)
    fail("load_checkpoint: format version " + std::to_string(version) + ", expected " +
         std::to_string(kFormatVersion));

  Checkpoint ckpt;
  ckpt.architecture = header.at("architecture").get<std::string>();
  ckpt.model_config_json = header.at("model_config").dump();
  ckpt.trainer_config_json = header.at("trainer_config").dump();
  ckpt.task = header.at("task").get<std::string>();
  ckpt.epoch = header.at("epoch").get<std::size_t>();
  ckpt.global_step = header.at("global_step").get<std::size_t>();
  ckpt.lr = header.at("lr").get<double>();
  ckpt.rng_state = header.at("rng_state").get<std::string>();
  ckpt.normalizer.mean = header.at("normalizer").at("mean").get<double>();
  ckpt.normalizer.std = header.at("normalizer").at("std").get<double>();
  ckpt.adam_step = header.at("adam_step").get<std::int64_t>();

  for (const auto& entry : header.at("tensors")) {
    const auto role = entry.at("role").get<std::string>();
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in)
      fail("load_checkpoint: tensor '" + name + "' (" + role + ") of shape " + shape_str(shape) +
           " is truncated");
    ParamMap& target = role == "param" ? ckpt.params
                       : role == "adam_m" ? ckpt.adam_m
                       : role == "adam_v" ? ckpt.adam_v
                       : (fail("load_checkpoint: unknown tensor role '" + role + "'"), ckpt.params);
    target.emplace(name, Tensor(shape, std::move(data)));
  }
  char extra;
  if (in.read(&extra, 1)) fail("load_checkpoint: trailing bytes after payload");
  return ckpt;
}

std::unique_ptr<EnergyModel> model_from_checkpoint(const Checkpoint& ckpt,
                                                   std::uint64_t init_seed) {
  auto model = make_model(ckpt.architecture, ckpt.model_config_json, init_seed);
  model->set_parameters(ckpt.params);
  return model;
}

}  // namespace matml
