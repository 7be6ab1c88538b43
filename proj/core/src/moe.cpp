#include "mlit/moe.hpp"

#include "mlit/ops.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <string>

namespace mlit {

std::string_view sharing_mode_name(SharingMode mode) {
    switch (mode) {
    case SharingMode::v_w2:
        return "V+W2";
    case SharingMode::v_w:
        return "V+W";
    case SharingMode::w_w2:
        return "W+W2";
    }
    return "V+W2";
}

SharingMode parse_sharing_mode(std::string_view text) {
    std::string s;
    for (char c : text)
        s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (s == "V+W2")
        return SharingMode::v_w2;
    if (s == "V+W" || s == "W+V")
        return SharingMode::v_w;
    if (s == "W+W2")
        return SharingMode::w_w2;
    throw ConfigError("unknown sharing mode '" + std::string(text) + "' (expected V+W2, V+W or W+W2)");
}

namespace {

struct SharedSlots {
    bool w, v, w2;
};

SharedSlots shared_slots(SharingMode mode) {
    switch (mode) {
    case SharingMode::v_w:
        return {true, true, false};
    case SharingMode::w_w2:
        return {true, false, true};
    case SharingMode::v_w2:
        break;
    }
    return {false, true, true};
}

std::vector<Linear> make_slot(bool shared, int experts, std::int64_t in, std::int64_t out, DType dtype,
                              RngStream& init) {
    std::vector<Linear> slot;
    const int count = shared ? 1 : experts;
    for (int e = 0; e < count; ++e)
        slot.push_back(make_linear(in, out, true, dtype, init));
    return slot;
}

void collect_slot(ParamList& out, std::string_view prefix, std::string_view name, const std::vector<Linear>& slot) {
    const std::string base = join_name(prefix, name);
    if (slot.size() == 1) {
        out.add(join_name(base, "shared"), slot[0]);
        return;
    }
    for (std::size_t e = 0; e < slot.size(); ++e)
        out.add(join_name(base, std::to_string(e)), slot[e]);
}

} // namespace

SharedSwiGLUBank make_swiglu_bank(std::int64_t embed, std::int64_t hidden, int experts, double dropout,
                                  SharingMode mode, DType dtype, RngStream& init) {
    if (experts < 2)
        throw ConfigError("expert bank needs at least 2 experts");
    if (hidden <= 0)
        throw ConfigError("expert hidden size must be positive");
    const auto shared = shared_slots(mode);
    SharedSwiGLUBank bank;
    bank.w = make_slot(shared.w, experts, embed, hidden, dtype, init);
    bank.v = make_slot(shared.v, experts, embed, hidden, dtype, init);
    bank.w2 = make_slot(shared.w2, experts, hidden, embed, dtype, init);
    bank.experts = experts;
    bank.dropout = dropout;
    bank.mode = mode;
    return bank;
}

void collect_params(ParamList& out, std::string_view prefix, const SharedSwiGLUBank& bank) {
    collect_slot(out, prefix, "w", bank.w);
    collect_slot(out, prefix, "v", bank.v);
    collect_slot(out, prefix, "w2", bank.w2);
}

std::int64_t moe_block_param_count(std::int64_t embed, std::int64_t hidden, int experts, SharingMode mode) {
    const auto shared = shared_slots(mode);
    const std::int64_t up = embed * hidden + hidden;
    const std::int64_t down = hidden * embed + embed;
    const std::int64_t t = experts;
    return (shared.w ? 1 : t) * up + (shared.v ? 1 : t) * up + (shared.w2 ? 1 : t) * down + 2 * embed * t;
}

DispatchPlan make_dispatch_plan(const GateOutput& gate) {
    const std::int64_t rows = gate.gates.dim(0);
    const int t = static_cast<int>(gate.gates.dim(1));
    const auto g = gate.gates.to_vector();
    DispatchPlan plan;
    plan.rows.resize(static_cast<std::size_t>(t));
    plan.gate_index.resize(static_cast<std::size_t>(t));
    plan.weights.resize(static_cast<std::size_t>(t));
    // The selected set decides membership, so a weight that underflows to zero
    // keeps its row and its gradient path.
    for (std::int64_t r = 0; r < rows; ++r) {
        std::vector<std::int64_t> chosen(gate.top_k.begin() + r * gate.k, gate.top_k.begin() + (r + 1) * gate.k);
        std::sort(chosen.begin(), chosen.end());
        for (auto e : chosen) {
            const auto flat = r * t + e;
            plan.rows[static_cast<std::size_t>(e)].push_back(r);
            plan.gate_index[static_cast<std::size_t>(e)].push_back(flat);
            plan.weights[static_cast<std::size_t>(e)].push_back(g[static_cast<std::size_t>(flat)]);
        }
    }
    return plan;
}

void RoutingStats::record(std::size_t layer, const DispatchPlan& plan) {
    if (assignments.size() <= layer)
        assignments.resize(layer + 1);
    auto& counts = assignments[layer];
    if (counts.size() < plan.rows.size())
        counts.resize(plan.rows.size(), 0.0);
    for (std::size_t e = 0; e < plan.rows.size(); ++e)
        counts[e] += static_cast<double>(plan.rows[e].size());
}

double RoutingStats::mean_cv() const {
    double total = 0;
    std::size_t layers = 0;
    for (const auto& counts : assignments) {
        if (counts.size() < 2)
            continue;
        const double n = static_cast<double>(counts.size());
        const double mu = std::accumulate(counts.begin(), counts.end(), 0.0) / n;
        double var = 0;
        for (double c : counts)
            var += (c - mu) * (c - mu);
        total += std::sqrt(var / n) / (mu + 1e-10);
        ++layers;
    }
    return layers ? total / static_cast<double>(layers) : 0.0;
}

Tensor expert_forward(const Tensor& xe, int expert, const SharedSwiGLUBank& bank, bool train,
                      RngStream* dropout_stream) {
    if (expert < 0 || expert >= bank.experts)
        throw ContractError("expert index " + std::to_string(expert) + " out of range");
    if (xe.rank() != 2)
        throw ShapeError("expert_forward: expected [q, m], got " + shape_str(xe.shape()));
    if (xe.dim(0) == 0)
        return Tensor::zeros({0, xe.dim(1)}, xe.dtype());
    Tensor hidden = mul(silu(bank.w_for(expert)(xe)), bank.v_for(expert)(xe));
    return dropout(bank.w2_for(expert)(hidden), bank.dropout, train, dropout_stream);
}

MoeOutput moe_forward(const Tensor& x, const GateParams& gate, const SharedSwiGLUBank& bank,
                      const ForwardContext& ctx) {
    if (x.rank() != 3)
        throw ShapeError("moe_forward: expected [b, n, m], got " + shape_str(x.shape()));
    if (gate.experts() != bank.experts)
        throw ConfigError("moe_forward: gate and bank disagree on expert count");
    const std::int64_t rows = x.dim(0) * x.dim(1), m = x.dim(2);
    Tensor x2d = reshape(x, {rows, m});

    MoeOutput out;
    out.gate = gate_forward(x2d, gate, ctx.train, ctx.gate_noise);
    out.aux = aux_loss(out.gate, gate);
    out.plan = make_dispatch_plan(out.gate);
    if (ctx.routing)
        ctx.routing->record(ctx.layer, out.plan);

    // Experts are combined in index order so the reduction is reproducible.
    Tensor y = Tensor::zeros({rows, m}, x.dtype());
    if (ctx.dispatch == DispatchMode::dense) {
        const std::int64_t t = bank.experts;
        for (int e = 0; e < bank.experts; ++e) {
            std::vector<std::int64_t> column(static_cast<std::size_t>(rows));
            for (std::int64_t r = 0; r < rows; ++r)
                column[static_cast<std::size_t>(r)] = r * t + e;
            Tensor ye = expert_forward(x2d, e, bank, ctx.train, ctx.dropout);
            y = add(y, mul_rows(ye, gather_elements(out.gate.gates, column)));
        }
    } else {
        for (int e = 0; e < bank.experts; ++e) {
            const auto& idx = out.plan.rows[static_cast<std::size_t>(e)];
            if (idx.empty())
                continue;
            Tensor ye = expert_forward(gather_rows(x2d, idx), e, bank, ctx.train, ctx.dropout);
            Tensor w = gather_elements(out.gate.gates, out.plan.gate_index[static_cast<std::size_t>(e)]);
            y = index_add_rows(y, idx, mul_rows(ye, w));
        }
    }
    out.y = reshape(y, x.shape());
    return out;
}

EncoderLayer make_encoder_layer(const EncoderLayerSpec& spec, DType dtype, RngStream& init) {
    EncoderLayer layer;
    layer.norm1 = make_layer_norm(spec.embed, dtype);
    layer.attention = make_gqa(spec.embed, spec.heads, spec.groups, dtype, init);
    layer.norm2 = make_layer_norm(spec.embed, dtype);
    layer.gate = make_gate(spec.embed, spec.experts, spec.k, dtype, init);
    layer.gate.w_importance = spec.w_importance;
    layer.gate.w_load = spec.w_load;
    layer.gate.squared_cv = spec.squared_cv;
    layer.bank = make_swiglu_bank(spec.embed, spec.hidden, spec.experts, spec.dropout, spec.sharing, dtype, init);
    return layer;
}

void collect_params(ParamList& out, std::string_view prefix, const EncoderLayer& layer) {
    out.add(join_name(prefix, "norm1"), layer.norm1);
    collect_params(out, join_name(prefix, "attention"), layer.attention);
    out.add(join_name(prefix, "norm2"), layer.norm2);
    collect_params(out, join_name(prefix, "gate"), layer.gate);
    collect_params(out, join_name(prefix, "experts"), layer.bank);
}

std::int64_t encoder_layer_param_count(const EncoderLayerSpec& spec) {
    return 4 * spec.embed + gqa_param_count(spec.embed, spec.heads, spec.groups) +
           moe_block_param_count(spec.embed, spec.hidden, spec.experts, spec.sharing);
}

LayerOutput encoder_layer_forward(const Tensor& x, const EncoderLayer& layer, const ForwardContext& ctx) {
    Tensor h = add(x, gqa_forward(layer.norm1(x), layer.attention));
    MoeOutput moe = moe_forward(layer.norm2(h), layer.gate, layer.bank, ctx);
    return {add(h, moe.y), moe.aux};
}

} // namespace mlit
