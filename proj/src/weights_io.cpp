// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/weights_io.hpp"

#include <utility>

#include "relaykv/serialize.hpp"

namespace relaykv {

namespace {

constexpr const char* kWeightsMagic = "RKWT";

std::string layer_name(std::size_t l, const char* part) {
  return "layers." + std::to_string(l) + "." + part;
}

// Name -> expected shape, in serialization order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> tensor_table(const ModelSpec& s) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> t;
  t.emplace_back("embedding", std::vector<std::size_t>{s.vocab_size, s.d_model});
  for (std::size_t l = 0; l < s.num_layers; ++l) {
    t.emplace_back(layer_name(l, "attn_norm_gain"), std::vector<std::size_t>{s.d_model});
    t.emplace_back(layer_name(l, "w_q"), std::vector<std::size_t>{s.d_model, s.q_dim()});
    t.emplace_back(layer_name(l, "w_k"), std::vector<std::size_t>{s.d_model, s.kv_dim()});
    t.emplace_back(layer_name(l, "w_v"), std::vector<std::size_t>{s.d_model, s.kv_dim()});
    t.emplace_back(layer_name(l, "w_o"), std::vector<std::size_t>{s.q_dim(), s.d_model});
    t.emplace_back(layer_name(l, "mlp_norm_gain"), std::vector<std::size_t>{s.d_model});
    t.emplace_back(layer_name(l, "w_gate"), std::vector<std::size_t>{s.d_model, s.d_ff});
    t.emplace_back(layer_name(l, "w_up"), std::vector<std::size_t>{s.d_model, s.d_ff});
    t.emplace_back(layer_name(l, "w_down"), std::vector<std::size_t>{s.d_ff, s.d_model});
  }
  t.emplace_back("final_norm_gain", std::vector<std::size_t>{s.d_model});
  t.emplace_back("output_head", std::vector<std::size_t>{s.d_model, s.vocab_size});
  return t;
}

const Tensor& tensor_by_name(const Weights& w, const std::string& name) {
  if (name == "embedding") return w.embedding;
  if (name == "final_norm_gain") return w.final_norm_gain;
  if (name == "output_head") return w.output_head;
  // layers.<l>.<part>
  const std::size_t dot1 = name.find('.');
  const std::size_t dot2 = name.find('.', dot1 + 1);
  const std::size_t l = std::stoul(name.substr(dot1 + 1, dot2 - dot1 - 1));
  const std::string part = name.substr(dot2 + 1);
  const LayerWeights& lw = w.layers[l];
  if (part == "attn_norm_gain") return lw.attn_norm_gain;
  if (part == "w_q") return lw.w_q;
  if (part == "w_k") return lw.w_k;
  if (part == "w_v") return lw.w_v;
  if (part == "w_o") return lw.w_o;
  if (part == "mlp_norm_gain") return lw.mlp_norm_gain;
  if (part == "w_gate") return lw.w_gate;
  if (part == "w_up") return lw.w_up;
  if (part == "w_down") return lw.w_down;
  throw SchemaError("unknown tensor name: " + name);
}

Tensor& tensor_by_name(Weights& w, const std::string& name) {
  return const_cast<Tensor&>(tensor_by_name(std::as_const(w), name));
}

}  // namespace

nlohmann::json spec_to_json(const ModelSpec& s) {
  return nlohmann::json{
      {"num_layers", s.num_layers},   {"d_model", s.d_model},
      {"num_heads", s.num_heads},     {"num_kv_heads", s.num_kv_heads},
      {"d_head", s.d_head},           {"d_ff", s.d_ff},
      {"vocab_size", s.vocab_size},   {"theta_base", s.theta_base},
      {"max_positions", s.max_positions}, {"norm_eps", s.norm_eps},
  };
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.num_layers = j.at("num_layers").get<std::size_t>();
    s.d_model = j.at("d_model").get<std::size_t>();
    s.num_heads = j.at("num_heads").get<std::size_t>();
    s.num_kv_heads = j.at("num_kv_heads").get<std::size_t>();
    s.d_head = j.at("d_head").get<std::size_t>();
    s.d_ff = j.at("d_ff").get<std::size_t>();
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.theta_base = j.at("theta_base").get<float>();
    s.max_positions = j.at("max_positions").get<std::size_t>();
    s.norm_eps = j.at("norm_eps").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model spec: ") + e.what());
  }
  s.validate();
  return s;
}

void save_weights(const Weights& w, const std::filesystem::path& path) {
  BlobWriter writer;
  for (const auto& [name, shape] : tensor_table(w.spec)) {
    writer.add(name, tensor_by_name(w, name));
  }
  nlohmann::json extra;
  extra["schema_version"] = 1;
  extra["kind"] = "toy-weights";
  extra["model_id"] = w.model_id;
  extra["spec"] = spec_to_json(w.spec);
  writer.write_file(path, kWeightsMagic, std::move(extra));
}

Weights load_weights(const std::filesystem::path& path) {
  const BlobReader reader = BlobReader::from_file(path, kWeightsMagic);
  const nlohmann::json& m = reader.manifest();
  if (!m.contains("spec")) throw SchemaError("weight manifest missing 'spec'");

  Weights w;
  w.spec = spec_from_json(m["spec"]);
  w.model_id = m.value("model_id", w.spec.summary_id(0));
  w.layers.resize(w.spec.num_layers);

  const auto table = tensor_table(w.spec);
  if (reader.tensor_names().size() != table.size()) {
    throw SchemaError("weight manifest has " + std::to_string(reader.tensor_names().size()) +
                      " tensors, spec implies " + std::to_string(table.size()));
  }
  for (const auto& [name, shape] : table) {
    if (!reader.has(name)) throw SchemaError("weight manifest missing tensor '" + name + "'");
    Tensor t = reader.get(name);
    if (t.shape != shape) {
      throw SchemaError("tensor '" + name + "' has wrong shape for this spec");
    }
    tensor_by_name(w, name) = std::move(t);
  }
  return w;
}

}  // namespace relaykv
