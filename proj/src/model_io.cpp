#include "dyndepth/model_io.hpp"

#include <sstream>

namespace dyndepth {

namespace {

int int_setting(const Checkpoint& ckpt, const std::string& key) {
  const auto& v = ckpt.setting(key);
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw InputError("checkpoint: config '" + key + "' is not an integer: " + v);
}

template <class Tensors>
void put_all(Checkpoint& ckpt, const Tensors& tensors) {
  for (const auto& [name, m] : tensors) ckpt.put(name, *m);
}

/// Copies named tensors in; targets that already have a shape must match it.
template <class Tensors>
void take_all(const Checkpoint& ckpt, const Tensors& tensors) {
  for (const auto& [name, m] : tensors) {
    const Matrix& src = ckpt.get(name);
    if (m->size() > 0 && (src.rows() != m->rows() || src.cols() != m->cols())) {
      throw DimensionError("checkpoint: tensor '" + name + "' is " + std::to_string(src.rows()) +
                           "x" + std::to_string(src.cols()) + ", expected " +
                           std::to_string(m->rows()) + "x" + std::to_string(m->cols()));
    }
    *m = src;
  }
}

}  // namespace

void store(Checkpoint& ckpt, const BackboneParams& params) {
  const auto& c = params.config;
  ckpt.config["backbone.num_layers"] = std::to_string(c.num_layers);
  ckpt.config["backbone.hidden"] = std::to_string(c.hidden);
  ckpt.config["backbone.heads"] = std::to_string(c.heads);
  ckpt.config["backbone.ffn_mult"] = std::to_string(c.ffn_mult);
  ckpt.config["backbone.num_classes"] = std::to_string(c.num_classes);
  ckpt.config["backbone.vocab_size"] = std::to_string(c.vocab_size);
  ckpt.config["backbone.max_seq_len"] = std::to_string(c.max_seq_len);
  ckpt.config["backbone.folded"] = params.folded() ? "1" : "0";
  put_all(ckpt, params.tensors());
}

BackboneParams load_backbone(const Checkpoint& ckpt) {
  BackboneConfig c;
  c.num_layers = int_setting(ckpt, "backbone.num_layers");
  c.hidden = int_setting(ckpt, "backbone.hidden");
  c.heads = int_setting(ckpt, "backbone.heads");
  c.ffn_mult = int_setting(ckpt, "backbone.ffn_mult");
  c.num_classes = int_setting(ckpt, "backbone.num_classes");
  c.vocab_size = int_setting(ckpt, "backbone.vocab_size");
  c.max_seq_len = int_setting(ckpt, "backbone.max_seq_len");
  c.validate();
  auto p = BackboneParams::zeros(c);
  if (int_setting(ckpt, "backbone.folded") != 0) {
    for (auto& layer : p.layers) {
      for (Linear* lin : {&layer.q, &layer.k, &layer.v, &layer.o, &layer.ffn_in, &layer.ffn_out}) {
        lin->folded = true;
        lin->weight.resize(0, 0);
      }
    }
  }
  take_all(ckpt, p.tensors());
  for (auto& layer : p.layers) {
    for (Linear* lin : {&layer.q, &layer.k, &layer.v, &layer.o, &layer.ffn_in, &layer.ffn_out}) {
      if (lin->folded) lin->compressive = lin->rank() * (lin->in_dim() + lin->out_dim()) < lin->in_dim() * lin->out_dim();
    }
  }
  return p;
}

void store(Checkpoint& ckpt, const ExtractorParams& params) {
  const auto& c = params.config;
  ckpt.config["extractor.vocab_size"] = std::to_string(c.vocab_size);
  ckpt.config["extractor.max_seq_len"] = std::to_string(c.max_seq_len);
  ckpt.config["extractor.embed_dim"] = std::to_string(c.embed_dim);
  ckpt.config["extractor.channels"] = std::to_string(c.channels[0]) + "," +
                                      std::to_string(c.channels[1]) + "," +
                                      std::to_string(c.channels[2]);
  ckpt.config["extractor.kernel"] = std::to_string(c.kernel);
  put_all(ckpt, params.tensors());
}

ExtractorParams load_extractor(const Checkpoint& ckpt) {
  ExtractorConfig c;
  c.vocab_size = int_setting(ckpt, "extractor.vocab_size");
  c.max_seq_len = int_setting(ckpt, "extractor.max_seq_len");
  c.embed_dim = int_setting(ckpt, "extractor.embed_dim");
  c.kernel = int_setting(ckpt, "extractor.kernel");
  std::istringstream channels(ckpt.setting("extractor.channels"));
  std::string part;
  for (int s = 0; s < 3; ++s) {
    if (!std::getline(channels, part, ',')) throw InputError("checkpoint: bad extractor.channels");
    c.channels[s] = std::stoi(part);
  }
  auto p = ExtractorParams::zeros(c);
  take_all(ckpt, p.tensors());
  return p;
}

void store(Checkpoint& ckpt, const PolicyParams& params) {
  ckpt.config["policy.feature_dim"] = std::to_string(params.config.feature_dim);
  ckpt.config["policy.hidden"] = std::to_string(params.config.hidden);
  ckpt.config["policy.num_layers"] = std::to_string(params.config.num_layers);
  put_all(ckpt, params.tensors());
}

PolicyParams load_policy(const Checkpoint& ckpt) {
  PolicyConfig c;
  c.feature_dim = int_setting(ckpt, "policy.feature_dim");
  c.hidden = int_setting(ckpt, "policy.hidden");
  c.num_layers = int_setting(ckpt, "policy.num_layers");
  Rng rng(0);
  auto p = PolicyParams::zeros_like(PolicyParams::init(c, rng));
  take_all(ckpt, p.tensors());
  return p;
}

void store(Checkpoint& ckpt, const GbtModel& model) {
  ckpt.put("predictor.nodes", model.node_table());
  ckpt.put("predictor.meta", model.meta());
}

GbtModel load_gbt(const Checkpoint& ckpt) {
  return GbtModel::from_tables(ckpt.get("predictor.nodes"), ckpt.get("predictor.meta"));
}

void store(Checkpoint& ckpt, const RidgeModel& model) {
  ckpt.put("teacher.weights", model.weights.transpose());
  Matrix meta(1, 2);
  meta << model.intercept, model.lambda;
  ckpt.put("teacher.meta", meta);
}

RidgeModel load_ridge(const Checkpoint& ckpt) {
  const Matrix& w = ckpt.get("teacher.weights");
  const Matrix& meta = ckpt.get("teacher.meta");
  if (w.rows() != 1 || meta.size() != 2) throw DimensionError("checkpoint: malformed teacher tensors");
  RidgeModel m;
  m.weights = w.row(0).transpose();
  m.intercept = meta(0, 0);
  m.lambda = meta(0, 1);
  return m;
}

}  // namespace dyndepth
