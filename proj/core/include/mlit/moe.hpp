#pragma once

#include "mlit/attention.hpp"
#include "mlit/gating.hpp"
#include "mlit/nn.hpp"

#include <string_view>
#include <vector>

namespace mlit {

/// Which two of the three SwiGLU projections are shared across a layer's
/// experts. W feeds the silu branch, V the linear branch, W2 projects back.
enum class SharingMode { v_w2, v_w, w_w2 };

std::string_view sharing_mode_name(SharingMode mode);
/// Accepts "V+W2", "V+W", "W+W2" (case-insensitive).
SharingMode parse_sharing_mode(std::string_view text);

/// Experts E_i(x) = (silu(x W_i + b) * (x V + c)) W2 + d, with the shared
/// projections held once per layer. A shared slot holds one Linear; a
/// per-expert slot holds one per expert.
struct SharedSwiGLUBank {
    std::vector<Linear> w;
    std::vector<Linear> v;
    std::vector<Linear> w2;
    int experts = 0;
    double dropout = 0.0;
    SharingMode mode = SharingMode::v_w2;

    const Linear& w_for(int e) const { return w.size() == 1 ? w[0] : w[static_cast<std::size_t>(e)]; }
    const Linear& v_for(int e) const { return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(e)]; }
    const Linear& w2_for(int e) const { return w2.size() == 1 ? w2[0] : w2[static_cast<std::size_t>(e)]; }
    std::int64_t hidden() const { return w[0].out_features(); }
};

SharedSwiGLUBank make_swiglu_bank(std::int64_t embed, std::int64_t hidden, int experts, double dropout,
                                  SharingMode mode, DType dtype, RngStream& init);

void collect_params(ParamList& out, std::string_view prefix, const SharedSwiGLUBank& bank);

/// Closed-form parameter count of gate matrices plus expert bank.
std::int64_t moe_block_param_count(std::int64_t embed, std::int64_t hidden, int experts, SharingMode mode);

/// Per-expert token lists for the flattened [b*n, m] input.
struct DispatchPlan {
    std::vector<std::vector<std::int64_t>> rows;       // ascending row indices
    std::vector<std::vector<std::int64_t>> gate_index; // flat indices into G
    std::vector<std::vector<double>> weights;          // G values at those entries
};

DispatchPlan make_dispatch_plan(const GateOutput& gate);

/// Tokens routed through all layers, counted per layer and expert.
struct RoutingStats {
    std::vector<std::vector<double>> assignments;

    void record(std::size_t layer, const DispatchPlan& plan);
    /// Mean over layers of the coefficient of variation of assignment counts.
    double mean_cv() const;
};

enum class DispatchMode {
    sparse, // gather -> per-expert batch -> weighted scatter-add
    dense,  // every expert on every row, weighted by its gate column
};

struct ForwardContext {
    bool train = false;
    RngStream* gate_noise = nullptr;
    RngStream* dropout = nullptr;
    DispatchMode dispatch = DispatchMode::sparse;
    RoutingStats* routing = nullptr;
    std::size_t layer = 0;
};

/// x_e[q, m] -> [q, m]. q == 0 yields an empty result without touching parameters.
Tensor expert_forward(const Tensor& xe, int expert, const SharedSwiGLUBank& bank, bool train,
                      RngStream* dropout_stream);

struct MoeOutput {
    Tensor y;
    Tensor aux;
    GateOutput gate;
    DispatchPlan plan;
};

/// y = sum_i G(x)_i E_i(x) over x[b, n, m].
MoeOutput moe_forward(const Tensor& x, const GateParams& gate, const SharedSwiGLUBank& bank,
                      const ForwardContext& ctx);

struct EncoderLayerSpec {
    std::int64_t embed = 0;
    int heads = 1;
    int groups = 1;
    std::int64_t hidden = 0;
    int experts = 3;
    int k = 2;
    double dropout = 0.0;
    SharingMode sharing = SharingMode::v_w2;
    double w_importance = 1e-2;
    double w_load = 1e-2;
    bool squared_cv = false;
};

/// Pre-norm block: x += GQA(LN1(x)); x += MoE(LN2(x)).
struct EncoderLayer {
    LayerNorm norm1;
    GqaParams attention;
    LayerNorm norm2;
    GateParams gate;
    SharedSwiGLUBank bank;
};

EncoderLayer make_encoder_layer(const EncoderLayerSpec& spec, DType dtype, RngStream& init);

void collect_params(ParamList& out, std::string_view prefix, const EncoderLayer& layer);

/// Closed-form parameter count of one encoder layer.
std::int64_t encoder_layer_param_count(const EncoderLayerSpec& spec);

struct LayerOutput {
    Tensor y;
    Tensor aux;
};

LayerOutput encoder_layer_forward(const Tensor& x, const EncoderLayer& layer, const ForwardContext& ctx);

} // namespace mlit
