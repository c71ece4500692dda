#ifndef CMDQ_MODEL_HPP
#define CMDQ_MODEL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cmdq/error.hpp"
#include "cmdq/matrix.hpp"

namespace cmdq {

enum class Modality { vision, crossmodal };

constexpr std::string_view modality_name(Modality m) noexcept {
  return m == Modality::vision ? "vision" : "crossmodal";
}

/// The four processing groups of a cross-modal layer, listed in processing order.
enum class GroupKind { attn_qkv, attn_out, mlp_gate_up, mlp_down };

inline constexpr std::array<GroupKind, 4> kGroupOrder = {
    GroupKind::attn_qkv, GroupKind::attn_out, GroupKind::mlp_gate_up, GroupKind::mlp_down};

constexpr std::string_view group_name(GroupKind g) noexcept {
  switch (g) {
    case GroupKind::attn_qkv: return "attn_qkv";
    case GroupKind::attn_out: return "attn_out";
    case GroupKind::mlp_gate_up: return "mlp_gate_up";
    case GroupKind::mlp_down: return "mlp_down";
  }
  return "?";
}

inline GroupKind parse_group(std::string_view s) {
  for (const auto g : kGroupOrder)
    if (group_name(g) == s) return g;
  throw FormatError("unknown component group '" + std::string(s) + "'");
}

/// Member roles each group admits; the first `required` of them must be present.
struct GroupPattern {
  std::vector<std::string_view> roles;
  std::size_t required;
};

inline GroupPattern group_pattern(GroupKind g) {
  switch (g) {
    case GroupKind::attn_qkv: return {{"q", "k", "v", "q_expert", "k_expert", "v_expert"}, 3};
    case GroupKind::attn_out: return {{"o"}, 1};
    case GroupKind::mlp_gate_up: return {{"gate", "up"}, 2};
    case GroupKind::mlp_down: return {{"down"}, 1};
  }
  return {{}, 0};
}

struct ComponentGroup {
  GroupKind kind = GroupKind::attn_qkv;
  std::vector<std::string> members;  // full weight names "<layer>.<role>"
};

struct CrossModalLayer {
  std::string name;
  std::array<ComponentGroup, 4> groups;  // indexed in kGroupOrder order
};

inline std::string member_name(const std::string& layer, std::string_view role) {
  return layer + "." + std::string(role);
}

/// Stand-in for a vision-language model: a chain of vision projections followed by
/// cross-modal blocks. Weights are stored input-major (I x O), y = x W.
struct SyntheticModel {
  std::vector<std::string> vision_layers;
  std::vector<CrossModalLayer> crossmodal_layers;
  std::size_t vision_dim = 0;
  std::size_t crossmodal_dim = 0;
  std::uint64_t misc_params = 0;  // unquantized parameters (embeddings etc.)
  std::map<std::string, DenseMatrix> weights;

  const DenseMatrix& weight(const std::string& name) const {
    const auto it = weights.find(name);
    if (it == weights.end()) throw InvariantError("model has no weight '" + name + "'");
    return it->second;
  }

  bool has_role(const CrossModalLayer& layer, std::string_view role) const {
    return weights.count(member_name(layer.name, role)) != 0;
  }

  /// Every weight name in processing order.
  std::vector<std::string> weight_names() const {
    std::vector<std::string> out = vision_layers;
    for (const auto& l : crossmodal_layers)
      for (const auto& g : l.groups) out.insert(out.end(), g.members.begin(), g.members.end());
    return out;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& n : weight_names()) {
      if (!seen.insert(n).second) throw InvariantError("weight '" + n + "' listed twice");
      weight(n);
    }
    detail::require(seen.size() == weights.size(), "model holds weights not referenced by any layer");

    std::size_t dim = vision_dim;
    for (const auto& n : vision_layers) {
      const auto& w = weight(n);
      detail::require(w.rows() == dim, "vision layer '" + n + "' input dim mismatch");
      dim = w.cols();
    }
    if (!vision_layers.empty() && !crossmodal_layers.empty())
      detail::require(dim == crossmodal_dim, "vision output dim must equal the cross-modal dim");

    const std::size_t d = crossmodal_dim;
    for (const auto& l : crossmodal_layers) {
      for (std::size_t gi = 0; gi < 4; ++gi) {
        const auto& g = l.groups[gi];
        detail::require(g.kind == kGroupOrder[gi], "layer '" + l.name + "' groups out of order");
        detail::require(!g.members.empty(), "layer '" + l.name + "' has an empty group");
        const auto pattern = group_pattern(g.kind);
        for (std::size_t r = 0; r < pattern.required; ++r)
          detail::require(has_role(l, pattern.roles[r]),
                          "layer '" + l.name + "' is missing role " + std::string(pattern.roles[r]));
        for (const auto& m : g.members) {
          const bool known = std::any_of(pattern.roles.begin(), pattern.roles.end(),
                                         [&](std::string_view r) { return m == member_name(l.name, r); });
          detail::require(known, "'" + m + "' does not belong in group " + std::string(group_name(g.kind)));
        }
      }
      const std::size_t ffn = weight(member_name(l.name, "gate")).cols();
      for (const auto* role : {"q", "k", "v", "q_expert", "k_expert", "v_expert", "o"}) {
        if (!has_role(l, role)) continue;
        const auto& w = weight(member_name(l.name, role));
        detail::require(w.rows() == d && w.cols() == d, "'" + l.name + "." + role + "' must be DxD");
      }
      const auto& up = weight(member_name(l.name, "up"));
      const auto& down = weight(member_name(l.name, "down"));
      detail::require(weight(member_name(l.name, "gate")).rows() == d && up.rows() == d &&
                          up.cols() == ffn,
                      "'" + l.name + "' gate/up must be D x F");
      detail::require(down.rows() == ffn && down.cols() == d, "'" + l.name + "' down must be F x D");
    }
  }
};

/// Activations entering each group of one cross-modal layer, computed with the
/// original (unquantized) weights.
struct CrossModalInputs {
  DenseMatrix hidden;     // attn_qkv input
  DenseMatrix attention;  // attn_out input
  DenseMatrix residual;   // mlp_gate_up input
  DenseMatrix activated;  // mlp_down input
  DenseMatrix output;

  const DenseMatrix& for_group(GroupKind g) const {
    switch (g) {
      case GroupKind::attn_qkv: return hidden;
      case GroupKind::attn_out: return attention;
      case GroupKind::mlp_gate_up: return residual;
      case GroupKind::mlp_down: return activated;
    }
    return hidden;
  }
};

namespace detail {

inline DenseMatrix add(DenseMatrix a, const DenseMatrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] += b.values()[i];
  return a;
}

}  // namespace detail

/// Full-precision forward through one cross-modal block. Attention mixing is not
/// modelled: the value projection (averaged with its expert, when present) stands
/// in for the attention output.
inline CrossModalInputs crossmodal_forward(const SyntheticModel& model, const CrossModalLayer& layer,
                                           const DenseMatrix& x) {
  detail::require(x.cols() == model.crossmodal_dim, "cross-modal input dim mismatch");
  CrossModalInputs out;
  out.hidden = x;
  DenseMatrix v = matmul(x, model.weight(member_name(layer.name, "v")));
  if (model.has_role(layer, "v_expert")) {
    const DenseMatrix ve = matmul(x, model.weight(member_name(layer.name, "v_expert")));
    for (std::size_t i = 0; i < v.size(); ++i) v.values()[i] = 0.5F * (v.values()[i] + ve.values()[i]);
  }
  out.attention = v;
  out.residual = detail::add(x, matmul(v, model.weight(member_name(layer.name, "o"))));
  DenseMatrix gate = matmul(out.residual, model.weight(member_name(layer.name, "gate")));
  const DenseMatrix up = matmul(out.residual, model.weight(member_name(layer.name, "up")));
  for (std::size_t i = 0; i < gate.size(); ++i) {
    const float g = gate.values()[i];
    gate.values()[i] = g / (1.0F + std::exp(-g)) * up.values()[i];  // silu(gate) * up
  }
  out.activated = std::move(gate);
  out.output = detail::add(out.residual, matmul(out.activated, model.weight(member_name(layer.name, "down"))));
  return out;
}

}  // namespace cmdq

#endif  // CMDQ_MODEL_HPP
