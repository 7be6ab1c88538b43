#pragma once

#include "mlit/nn.hpp"

namespace mlit {

/// Grouped query attention. `heads` query heads are split into `groups`
/// groups; each group shares one key head and one value head. groups == heads
/// is multi-head attention, groups == 1 is multi-query attention.
struct GqaParams {
    Linear query;  // [m, m]
    Linear key;    // [m, groups * head_dim]
    Linear value;  // [m, groups * head_dim]
    Linear output; // [m, m]
    int heads = 1;
    int groups = 1;

    std::int64_t embed() const { return query.in_features(); }
    std::int64_t head_dim() const { return embed() / heads; }
};

/// Throws ConfigError unless embed % heads == 0 and heads % groups == 0.
void validate_gqa_shape(std::int64_t embed, int heads, int groups);

GqaParams make_gqa(std::int64_t embed, int heads, int groups, DType dtype, RngStream& init);

/// x[b, n, m] -> [b, n, m]. Bidirectional, no dropout. When `weights` is given
/// it receives the attention probabilities as [b, heads, n, n].
Tensor gqa_forward(const Tensor& x, const GqaParams& p, Tensor* weights = nullptr);

void collect_params(ParamList& out, std::string_view prefix, const GqaParams& p);

/// 2(m^2 + m) + 2(m * G * d + G * d) with d = m / heads.
std::int64_t gqa_param_count(std::int64_t embed, int heads, int groups);

} // namespace mlit
