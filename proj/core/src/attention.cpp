#include "mlit/attention.hpp"

#include "mlit/ops.hpp"

#include <cmath>

namespace mlit {

void validate_gqa_shape(std::int64_t embed, int heads, int groups) {
    if (heads <= 0 || groups <= 0)
        throw ConfigError("attention: heads and groups must be positive");
    if (embed % heads != 0)
        throw ConfigError("attention: embed " + std::to_string(embed) + " not divisible by heads " +
                          std::to_string(heads));
    if (heads % groups != 0)
        throw ConfigError("attention: heads " + std::to_string(heads) + " not divisible by groups " +
                          std::to_string(groups));
}

GqaParams make_gqa(std::int64_t embed, int heads, int groups, DType dtype, RngStream& init) {
    validate_gqa_shape(embed, heads, groups);
    const std::int64_t kv = groups * (embed / heads);
    GqaParams p;
    p.query = make_linear(embed, embed, true, dtype, init);
    p.key = make_linear(embed, kv, true, dtype, init);
    p.value = make_linear(embed, kv, true, dtype, init);
    p.output = make_linear(embed, embed, true, dtype, init);
    p.heads = heads;
    p.groups = groups;
    return p;
}

Tensor gqa_forward(const Tensor& x, const GqaParams& p, Tensor* weights) {
    if (x.rank() != 3)
        throw ShapeError("gqa_forward: expected [b, n, m], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), n = x.dim(1), m = x.dim(2);
    if (m != p.embed())
        throw ShapeError("gqa_forward: embed mismatch " + std::to_string(m) + " vs " + std::to_string(p.embed()));
    validate_gqa_shape(m, p.heads, p.groups);
    const std::int64_t d = p.head_dim();
    const std::int64_t G = p.groups;
    const std::int64_t per_group = p.heads / p.groups;

    // Query head h = g * per_group + j attends with key/value head g. Stacking a
    // group's query heads row-wise lets one product per group serve all of them.
    Tensor q = reshape(scale(p.query(x), 1.0 / std::sqrt(static_cast<double>(d))), {b, n, G, per_group, d});
    q = reshape(permute(q, {0, 2, 3, 1, 4}), {b * G, per_group * n, d});
    Tensor k = reshape(p.key(x), {b, n, G, d});
    k = reshape(permute(k, {0, 2, 1, 3}), {b * G, n, d});
    Tensor v = reshape(p.value(x), {b, n, G, d});
    v = reshape(permute(v, {0, 2, 1, 3}), {b * G, n, d});

    Tensor probs = softmax_rows(batched_matmul(q, k, true));
    if (weights)
        *weights = reshape(probs, {b, p.heads, n, n}).detach();
    Tensor ctx = batched_matmul(probs, v);
    ctx = reshape(ctx, {b, G, per_group, n, d});
    ctx = reshape(permute(ctx, {0, 3, 1, 2, 4}), {b, n, m});
    return p.output(ctx);
}

void collect_params(ParamList& out, std::string_view prefix, const GqaParams& p) {
    out.add(join_name(prefix, "query"), p.query);
    out.add(join_name(prefix, "key"), p.key);
    out.add(join_name(prefix, "value"), p.value);
    out.add(join_name(prefix, "output"), p.output);
}

std::int64_t gqa_param_count(std::int64_t embed, int heads, int groups) {
    const std::int64_t kv = groups * (embed / heads);
    return 2 * (embed * embed + embed) + 2 * (embed * kv + kv);
}

} // namespace mlit
