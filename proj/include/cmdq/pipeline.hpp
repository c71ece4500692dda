#ifndef CMDQ_PIPELINE_HPP
#define CMDQ_PIPELINE_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmdq/calibration.hpp"
#include "cmdq/error.hpp"
#include "cmdq/model.hpp"
#include "cmdq/packfmt.hpp"
#include "cmdq/quantcore.hpp"
#include "cmdq/tensor_io.hpp"

namespace cmdq {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Synthetic models

struct ModelSpec {
  std::size_t vision_layers = 2;
  std::size_t crossmodal_layers = 2;
  std::size_t dim = 256;
  std::size_t ffn_multiplier = 2;
  bool experts = true;  // visual-expert q/k/v inside attn_qkv
  std::uint64_t misc_params = 0;
  std::uint64_t seed = 0;
};

/// Random Gaussian weights scaled by 1/sqrt(fan_in). Every matrix gets its own seed
/// derived from the model seed and its position.
inline SyntheticModel generate_model(const ModelSpec& spec) {
  detail::require(spec.dim > 0, "model dim must be positive");
  detail::require(spec.vision_layers + spec.crossmodal_layers > 0, "model needs at least one layer");
  SyntheticModel m;
  m.vision_dim = spec.dim;
  m.crossmodal_dim = spec.dim;
  m.misc_params = spec.misc_params;
  std::uint64_t counter = 0;
  const auto make = [&](std::size_t rows, std::size_t cols) {
    DenseMatrix w = seeded_random_matrix(rows, cols, spec.seed * 1000003ULL + counter++);
    const float s = 1.0F / std::sqrt(static_cast<float>(rows));
    for (float& v : w.values()) v *= s;
    return w;
  };
  for (std::size_t i = 0; i < spec.vision_layers; ++i) {
    const std::string name = "vision." + std::to_string(i) + ".proj";
    m.vision_layers.push_back(name);
    m.weights.emplace(name, make(spec.dim, spec.dim));
  }
  const std::size_t ffn = spec.dim * spec.ffn_multiplier;
  for (std::size_t j = 0; j < spec.crossmodal_layers; ++j) {
    CrossModalLayer layer;
    layer.name = "crossmodal." + std::to_string(j);
    for (std::size_t gi = 0; gi < 4; ++gi) {
      const GroupKind kind = kGroupOrder[gi];
      layer.groups[gi].kind = kind;
      const auto pattern = group_pattern(kind);
      const std::size_t take = (kind == GroupKind::attn_qkv && spec.experts) ? pattern.roles.size() : pattern.required;
      for (std::size_t r = 0; r < take; ++r) {
        const std::string role(pattern.roles[r]);
        const std::string name = member_name(layer.name, role);
        const std::size_t rows = kind == GroupKind::mlp_down ? ffn : spec.dim;
        const std::size_t cols = kind == GroupKind::mlp_gate_up ? ffn : spec.dim;
        layer.groups[gi].members.push_back(name);
        m.weights.emplace(name, make(rows, cols));
      }
    }
    m.crossmodal_layers.push_back(std::move(layer));
  }
  m.validate();
  return m;
}

inline Container model_to_container(const SyntheticModel& m) {
  m.validate();
  Container c;
  for (const auto& [name, w] : m.weights) c.add(name, Tensor::f32(w));
  auto cross = nlohmann::json::array();
  for (const auto& l : m.crossmodal_layers) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : l.groups) groups.push_back({{"kind", group_name(g.kind)}, {"members", g.members}});
    cross.push_back({{"name", l.name}, {"groups", groups}});
  }
  c.attributes = {{"kind", "synthetic-model"},
                  {"vision_layers", m.vision_layers},
                  {"crossmodal_layers", cross},
                  {"embed_dims", {m.vision_dim, m.crossmodal_dim}},
                  {"misc_params", m.misc_params}};
  return c;
}

inline SyntheticModel model_from_container(const Container& c) {
  SyntheticModel m;
  try {
    const auto& a = c.attributes;
    if (a.value("kind", std::string{}) != "synthetic-model")
      throw FormatError("container is not a synthetic model");
    m.vision_layers = a.at("vision_layers").get<std::vector<std::string>>();
    const auto dims = a.at("embed_dims").get<std::vector<std::size_t>>();
    if (dims.size() != 2) throw FormatError("embed_dims must hold two entries");
    m.vision_dim = dims[0];
    m.crossmodal_dim = dims[1];
    m.misc_params = a.value("misc_params", std::uint64_t{0});
    for (const auto& lj : a.at("crossmodal_layers")) {
      CrossModalLayer l;
      l.name = lj.at("name").get<std::string>();
      const auto& groups = lj.at("groups");
      if (groups.size() != 4) throw FormatError("cross-modal layer '" + l.name + "' must have four groups");
      for (std::size_t gi = 0; gi < 4; ++gi) {
        l.groups[gi].kind = parse_group(groups[gi].at("kind").get<std::string>());
        l.groups[gi].members = groups[gi].at("members").get<std::vector<std::string>>();
      }
      m.crossmodal_layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model attributes: ") + e.what());
  }
  for (const auto& [name, t] : c.tensors) m.weights.emplace(name, t.to_dense());
  try {
    m.validate();
  } catch (const InvariantError& e) {
    throw FormatError(std::string("invalid model: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Modality-partitioned quantization

enum class QuantMethod { gptq, rtn };

struct LayerReport {
  std::string name;
  Modality module = Modality::vision;
  std::optional<GroupKind> group;  // cross-modal only
  std::size_t layer_index = 0;     // index within its module
  std::size_t order = 0;           // global processing position
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  double proxy_loss = 0.0;
  double rtn_proxy_loss = 0.0;
  std::string hessian_source;       // which captured input built the Hessian
  std::uint64_t calib_hash = 0;     // module-level calibration input of this layer
  std::uint64_t input_hash = 0;     // the exact tensor the Hessian was built from
  SizeEstimate size;
};

struct QuantizedCheckpoint {
  std::vector<std::pair<std::string, PackedLinear>> layers;  // processing order
  std::vector<LayerReport> report;
  QuantConfig config;
  QuantMethod method = QuantMethod::gptq;
  std::uint64_t misc_params = 0;

  const PackedLinear& layer(const std::string& name) const {
    for (const auto& [n, p] : layers)
      if (n == name) return p;
    throw InvariantError("checkpoint has no layer '" + name + "'");
  }
};

namespace detail {

inline DenseMatrix stack_rows(const std::vector<DenseMatrix>& parts) { return vstack<float>(parts); }

struct QuantizeStep {
  const QuantConfig& cfg;
  QuantMethod method;
  QuantizedCheckpoint& ckpt;

  void operator()(const std::string& name, const DenseMatrix& w, const DenseMatrix& h, LayerReport rep) {
    const QuantizedMatrix rtn = rtn_quantize(w, cfg);
    const QuantizedMatrix q = method == QuantMethod::gptq ? gptq_quantize(w, h, cfg) : rtn;
    rep.name = name;
    rep.order = ckpt.report.size();
    rep.in_features = w.rows();
    rep.out_features = w.cols();
    rep.rtn_proxy_loss = proxy_loss(w, dequantize_matrix(rtn), h);
    rep.proxy_loss = method == QuantMethod::gptq ? proxy_loss(w, dequantize_matrix(q), h) : rep.rtn_proxy_loss;
    rep.size = estimate_packed_size(w.rows(), w.cols(), cfg.bits, cfg.groupsize);
    ckpt.layers.emplace_back(name, pack_linear(q, std::nullopt, cfg.groupsize));
    ckpt.report.push_back(std::move(rep));
  }
};

}  // namespace detail

/// Quantizes the vision layers from calib_v alone, then each cross-modal layer group
/// by group (qkv, attn_out, gate_up, down). Every group of a layer draws its Hessian
/// from the full-precision forward of the same original calibration input, never
/// from an already-quantized group's output.
inline QuantizedCheckpoint quantize_model(const SyntheticModel& model, const std::optional<CalibrationSet>& calib_v,
                                          const std::optional<CalibrationSet>& calib_m, const QuantConfig& cfg,
                                          QuantMethod method = QuantMethod::gptq) {
  cfg.validate();
  model.validate();
  QuantizedCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.method = method;
  ckpt.misc_params = model.misc_params;
  detail::QuantizeStep step{cfg, method, ckpt};

  if (!model.vision_layers.empty()) {
    if (!calib_v) throw InvariantError("model has vision layers but no vision calibration set");
    calib_v->validate();
    detail::require(calib_v->feature_dim() == model.vision_dim, "vision calibration dim does not match the model");
    DenseMatrix x = calib_v->stacked();
    for (std::size_t i = 0; i < model.vision_layers.size(); ++i) {
      const auto& name = model.vision_layers[i];
      const auto& w = model.weight(name);
      const DenseMatrix h = finalize_hessian(hessian_from(x), cfg.damp_ratio);
      LayerReport rep;
      rep.module = Modality::vision;
      rep.layer_index = i;
      rep.hessian_source = name + ":input";
      rep.calib_hash = rep.input_hash = content_hash(x);
      step(name, w, h, std::move(rep));
      x = matmul(x, w);
    }
  }

  if (!model.crossmodal_layers.empty()) {
    if (!calib_m) throw InvariantError("model has cross-modal layers but no cross-modal calibration set");
    calib_m->validate();
    detail::require(calib_m->feature_dim() == model.crossmodal_dim,
                    "cross-modal calibration dim does not match the model");
    DenseMatrix x = calib_m->stacked();
    for (std::size_t j = 0; j < model.crossmodal_layers.size(); ++j) {
      const auto& layer = model.crossmodal_layers[j];
      const std::uint64_t layer_hash = content_hash(x);
      const CrossModalInputs inputs = crossmodal_forward(model, layer, x);
      for (const auto& group : layer.groups) {
        const DenseMatrix& gin = inputs.for_group(group.kind);
        const DenseMatrix h = finalize_hessian(hessian_from(gin), cfg.damp_ratio);
        for (const auto& member : group.members) {
          LayerReport rep;
          rep.module = Modality::crossmodal;
          rep.group = group.kind;
          rep.layer_index = j;
          rep.hessian_source = layer.name + "." + std::string(group_name(group.kind)) + ":input";
          rep.calib_hash = layer_hash;
          rep.input_hash = content_hash(gin);
          step(member, model.weight(member), h, std::move(rep));
        }
      }
      x = inputs.output;
    }
  }
  return ckpt;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

/// Versioned JSON report. Holds no timings, so identical inputs give identical bytes.
inline nlohmann::json report_json(const QuantizedCheckpoint& ckpt) {
  auto layers = nlohmann::json::array();
  for (const auto& r : ckpt.report) {
    layers.push_back({{"name", r.name},
                      {"module", modality_name(r.module)},
                      {"group", r.group ? nlohmann::json(group_name(*r.group)) : nlohmann::json(nullptr)},
                      {"layer_index", r.layer_index},
                      {"order", r.order},
                      {"in_features", r.in_features},
                      {"out_features", r.out_features},
                      {"proxy_loss", r.proxy_loss},
                      {"rtn_proxy_loss", r.rtn_proxy_loss},
                      {"hessian_source", r.hessian_source},
                      {"calib_hash", hex64(r.calib_hash)},
                      {"input_hash", hex64(r.input_hash)},
                      {"bytes", r.size.total}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"method", ckpt.method == QuantMethod::gptq ? "gptq" : "rtn"},
          {"bits", ckpt.config.bits},
          {"groupsize", ckpt.config.groupsize},
          {"symmetric", ckpt.config.symmetric},
          {"damp_ratio", ckpt.config.damp_ratio},
          {"misc_params", ckpt.misc_params},
          {"layers", layers}};
}

inline Container checkpoint_to_container(const QuantizedCheckpoint& ckpt) {
  Container c;
  for (const auto& [name, p] : ckpt.layers) add_packed_linear(c, name, p);
  c.attributes["kind"] = "quantized-checkpoint";
  c.attributes["report"] = report_json(ckpt);
  auto order = nlohmann::json::array();
  for (const auto& [name, p] : ckpt.layers) order.push_back(name);
  c.attributes["order"] = order;
  return c;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw FormatError("bad 64-bit hash '" + s + "'");
  return std::stoull(s, nullptr, 16);
}

inline QuantizedCheckpoint checkpoint_from_container(const Container& c) {
  if (c.attributes.value("kind", std::string{}) != "quantized-checkpoint")
    throw FormatError("container is not a quantized checkpoint");
  QuantizedCheckpoint ckpt;
  try {
    const auto& rep = c.attributes.at("report");
    ckpt.config.bits = rep.at("bits").get<int>();
    ckpt.config.groupsize = rep.at("groupsize").get<int>();
    ckpt.config.symmetric = rep.at("symmetric").get<bool>();
    ckpt.config.damp_ratio = rep.at("damp_ratio").get<float>();
    ckpt.method = rep.at("method").get<std::string>() == "rtn" ? QuantMethod::rtn : QuantMethod::gptq;
    ckpt.misc_params = rep.at("misc_params").get<std::uint64_t>();
    for (const auto& n : c.attributes.at("order")) {
      const auto name = n.get<std::string>();
      ckpt.layers.emplace_back(name, read_packed_linear(c, name));
    }
    for (const auto& l : rep.at("layers")) {
      LayerReport r;
      r.name = l.at("name").get<std::string>();
      const auto module = l.at("module").get<std::string>();
      if (module != "vision" && module != "crossmodal") throw FormatError("unknown module '" + module + "'");
      r.module = module == "vision" ? Modality::vision : Modality::crossmodal;
      if (!l.at("group").is_null()) r.group = parse_group(l.at("group").get<std::string>());
      r.layer_index = l.at("layer_index").get<std::size_t>();
      r.order = l.at("order").get<std::size_t>();
      r.in_features = l.at("in_features").get<std::size_t>();
      r.out_features = l.at("out_features").get<std::size_t>();
      r.proxy_loss = l.at("proxy_loss").get<double>();
      r.rtn_proxy_loss = l.at("rtn_proxy_loss").get<double>();
      r.hessian_source = l.at("hessian_source").get<std::string>();
      r.calib_hash = parse_hex64(l.at("calib_hash").get<std::string>());
      r.input_hash = parse_hex64(l.at("input_hash").get<std::string>());
      r.size = estimate_packed_size(r.in_features, r.out_features, ckpt.config.bits, ckpt.config.groupsize);
      ckpt.report.push_back(std::move(r));
    }
    if (ckpt.report.size() != ckpt.layers.size()) throw FormatError("checkpoint report does not cover every layer");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint attributes: ") + e.what());
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Size accounting

struct LayerShape {
  std::string name;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool has_bias = false;
};

struct SizeReport {
  std::vector<std::pair<std::string, std::uint64_t>> per_layer;
  std::uint64_t quantized_bytes = 0;  // packed layers incl. metadata and bias
  std::uint64_t misc_bytes = 0;       // unquantized parameters at f16
  std::uint64_t total = 0;
  std::uint64_t f16_baseline = 0;     // every parameter at f16
  double ratio = 0.0;                 // total / f16_baseline
  double quantized_ratio = 0.0;       // quantized_bytes / f16 bytes of those layers
};

inline SizeReport size_report(const std::vector<LayerShape>& layers, std::uint64_t misc_params, int bits,
                              int groupsize) {
  detail::require(!layers.empty(), "size report needs at least one layer");
  if (!supported_bits(bits)) throw InvariantError("unsupported bit width " + std::to_string(bits));
  SizeReport r;
  std::uint64_t layer_f16 = 0;
  for (const auto& l : layers) {
    const auto est = estimate_packed_size(l.in_features, l.out_features, bits, groupsize);
    const std::uint64_t bias = l.has_bias ? l.out_features * 4ULL : 0ULL;
    r.per_layer.emplace_back(l.name, est.total + bias);
    r.quantized_bytes += est.total + bias;
    layer_f16 += static_cast<std::uint64_t>(l.in_features) * l.out_features * 2ULL + (l.has_bias ? l.out_features * 2ULL : 0ULL);
  }
  r.misc_bytes = misc_params * 2ULL;
  r.total = r.quantized_bytes + r.misc_bytes;
  r.f16_baseline = layer_f16 + r.misc_bytes;
  r.ratio = static_cast<double>(r.total) / static_cast<double>(r.f16_baseline);
  r.quantized_ratio = static_cast<double>(r.quantized_bytes) / static_cast<double>(layer_f16);
  return r;
}

inline std::vector<LayerShape> layer_shapes(const SyntheticModel& m) {
  std::vector<LayerShape> out;
  for (const auto& n : m.weight_names()) {
    const auto& w = m.weight(n);
    out.push_back({n, w.rows(), w.cols(), false});
  }
  return out;
}

inline SizeReport size_report(const QuantizedCheckpoint& ckpt) {
  detail::require(!ckpt.layers.empty(), "checkpoint is empty");
  std::vector<LayerShape> shapes;
  for (const auto& [name, p] : ckpt.layers) shapes.push_back({name, p.in_features, p.out_features, p.bias.has_value()});
  return size_report(shapes, ckpt.misc_params, ckpt.config.bits, ckpt.config.groupsize);
}

inline nlohmann::json size_report_json(const SizeReport& r) {
  auto per = nlohmann::json::array();
  for (const auto& [n, b] : r.per_layer) per.push_back({{"name", n}, {"bytes", b}});
  return {{"per_layer", per},
          {"quantized_bytes", r.quantized_bytes},
          {"misc_bytes", r.misc_bytes},
          {"total", r.total},
          {"f16_baseline", r.f16_baseline},
          {"ratio", r.ratio},
          {"quantized_ratio", r.quantized_ratio}};
}

// ---------------------------------------------------------------------------
// CircularEval

struct CircularPass {
  std::string prediction;
  std::string answer;
};

struct QuestionRecord {
  std::string question_id;
  std::vector<CircularPass> passes;
};

/// Fraction of questions answered correctly in every circular pass.
inline double circular_eval_accuracy(const std::vector<QuestionRecord>& records) {
  if (records.empty()) throw InvariantError("circular eval needs at least one question");
  std::size_t solved = 0;
  for (const auto& q : records) {
    if (q.passes.empty()) throw InvariantError("question '" + q.question_id + "' has no passes");
    bool all = true;
    for (const auto& p : q.passes) all = all && p.prediction == p.answer;
    solved += all ? 1U : 0U;
  }
  return static_cast<double>(solved) / static_cast<double>(records.size());
}

/// Accepts [{"question_id", "passes": [{"prediction", "answer"}, ...]}, ...].
inline std::vector<QuestionRecord> circular_records_from_json(const nlohmann::json& j) {
  std::vector<QuestionRecord> out;
  try {
    if (!j.is_array()) throw FormatError("circular eval records must be a JSON array");
    for (const auto& q : j) {
      QuestionRecord r;
      r.question_id = q.at("question_id").get<std::string>();
      for (const auto& p : q.at("passes"))
        r.passes.push_back({p.at("prediction").get<std::string>(), p.at("answer").get<std::string>()});
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("circular eval records: ") + e.what());
  }
  return out;
}

}  // namespace cmdq

#endif  // CMDQ_PIPELINE_HPP
