// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vecrag/model.hpp"

// Checkpoint blob: magic, a JSON header (config, step counter, RNG state,
// tensor manifest with group tags), then the raw little-endian doubles of
// every parameter in manifest order. Loading reproduces forward outputs
// bit-exactly because values never pass through text.

namespace vecrag {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"d_dec", c.d_dec},
          {"d_enc", c.d_enc},             {"n_layers_dec", c.n_layers_dec},
          {"n_layers_enc", c.n_layers_enc}, {"n_heads", c.n_heads},
          {"max_seq_len", c.max_seq_len}, {"max_ctx_vectors", c.max_ctx_vectors},
          {"enc_max_len", c.enc_max_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_dec = j.at("d_dec").get<int>();
  c.d_enc = j.at("d_enc").get<int>();
  c.n_layers_dec = j.at("n_layers_dec").get<int>();
  c.n_layers_enc = j.at("n_layers_enc").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.max_ctx_vectors = j.at("max_ctx_vectors").get<int>();
  c.enc_max_len = j.at("enc_max_len").get<int>();
  c.validate();
  return c;
}

namespace ckpt_detail {

constexpr char kMagic[8] = {'V', 'R', 'A', 'G', 'C', 'K', 'P', '1'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline const char* group_tag(ParamGroup g) {
  switch (g) {
    case ParamGroup::decoder_theta: return "theta";
    case ParamGroup::encoder_phi: return "phi";
    case ParamGroup::adapter_pi: return "pi";
  }
  return "?";
}

}  // namespace ckpt_detail

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  long step = 0;
  std::array<std::uint64_t, 4> rng_state{};
};

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const ModelConfig& cfg, long step,
                            const std::array<std::uint64_t, 4>& rng_state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  const std::vector<NamedParam> named = named_parameters(params);
  nlohmann::json manifest = nlohmann::json::array();
  for (const NamedParam& np : named) {
    manifest.push_back({{"name", np.name},
                        {"group", ckpt_detail::group_tag(np.group)},
                        {"shape", np.tensor.shape()}});
  }
  const nlohmann::json header = {{"config", model_config_to_json(cfg)},
                                 {"step", step},
                                 {"rng", rng_state},
                                 {"with_adapters", params.has_adapters()},
                                 {"tensors", manifest}};
  const std::string header_str = header.dump();
  out.write(ckpt_detail::kMagic, 8);
  ckpt_detail::write_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const NamedParam& np : named) {
    out.write(reinterpret_cast<const char*>(np.tensor.data()),
              static_cast<std::streamsize>(np.tensor.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write to checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, ckpt_detail::kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const std::uint64_t header_len = ckpt_detail::read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  const nlohmann::json header = nlohmann::json::parse(header_str);

  Checkpoint ck;
  ck.config = model_config_from_json(header.at("config"));
  ck.step = header.at("step").get<long>();
  const auto rng = header.at("rng");
  for (std::size_t i = 0; i < 4; ++i) ck.rng_state[i] = rng.at(i).get<std::uint64_t>();
  const bool with_adapters = header.at("with_adapters").get<bool>();
  ck.params = init_model(ck.config, 0, with_adapters);

  const std::vector<NamedParam> named = named_parameters(ck.params);
  const auto& manifest = header.at("tensors");
  if (manifest.size() != named.size()) {
    throw std::runtime_error("checkpoint manifest lists " + std::to_string(manifest.size()) +
                             " tensors, model has " + std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const std::string name = manifest.at(i).at("name").get<std::string>();
    const Shape shape = manifest.at(i).at("shape").get<Shape>();
    if (name != named[i].name || shape != named[i].tensor.shape()) {
      throw std::runtime_error("checkpoint tensor mismatch at '" + name + "'");
    }
    in.read(reinterpret_cast<char*>(named[i].tensor.data()),
            static_cast<std::streamsize>(named[i].tensor.numel() * sizeof(double)));
  }
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return ck;
}

}  // namespace vecrag
