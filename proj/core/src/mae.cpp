#include "mlit/mae.hpp"

#include "mlit/autodiff.hpp"
#include "mlit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mlit {

DecoderConfig decoder_preset() { return DecoderConfig{}; }

void validate(const DecoderConfig& c) {
    if (c.embed <= 0 || c.layers <= 0 || c.hidden <= 0)
        throw ConfigError("decoder: embed, layers and hidden must be positive");
    validate_gqa_shape(c.embed, c.heads, c.groups);
    validate_top_k(c.top_k, c.experts);
}

MaskPlan random_mask(std::int64_t n, double ratio, RngStream& stream, std::size_t batch) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ConfigError("random_mask: ratio must be in (0, 1)");
    const auto keep = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * (1.0 - ratio) + 1e-9));
    if (keep < 1 || keep >= n)
        throw ConfigError("random_mask: ratio leaves no visible or no masked patch");
    MaskPlan plan;
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    for (std::size_t s = 0; s < batch; ++s) {
        std::iota(perm.begin(), perm.end(), std::int64_t{0});
        stream.shuffle(perm.begin(), perm.end());
        std::vector<std::int64_t> vis(perm.begin(), perm.begin() + keep);
        std::vector<std::int64_t> msk(perm.begin() + keep, perm.end());
        std::sort(vis.begin(), vis.end());
        std::sort(msk.begin(), msk.end());
        plan.visible.push_back(std::move(vis));
        plan.masked.push_back(std::move(msk));
    }
    return plan;
}

namespace {

EncoderLayerSpec decoder_layer_spec(const DecoderConfig& c) {
    EncoderLayerSpec s;
    s.embed = c.embed;
    s.heads = c.heads;
    s.groups = c.groups;
    s.hidden = c.hidden;
    s.experts = c.experts;
    s.k = c.top_k;
    s.dropout = c.dropout;
    s.sharing = c.sharing;
    s.w_importance = c.w_importance;
    s.w_load = c.w_load;
    s.squared_cv = c.squared_cv;
    return s;
}

void check_plan(const MaskPlan& plan, std::int64_t b, std::int64_t n) {
    if (static_cast<std::int64_t>(plan.batch()) != b || plan.masked.size() != plan.visible.size())
        throw ShapeError("mask plan batch " + std::to_string(plan.batch()) + " != " + std::to_string(b));
    for (std::size_t s = 0; s < plan.batch(); ++s) {
        std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
        for (const auto* list : {&plan.visible[s], &plan.masked[s]})
            for (auto i : *list) {
                if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)])
                    throw ContractError("mask plan is not a partition of the image patches");
                seen[static_cast<std::size_t>(i)] = 1;
            }
        if (std::find(seen.begin(), seen.end(), 0) != seen.end())
            throw ContractError("mask plan is not a partition of the image patches");
    }
}

std::vector<std::int64_t> flat_rows(const std::vector<std::vector<std::int64_t>>& lists, std::int64_t stride) {
    std::vector<std::int64_t> out;
    for (std::size_t s = 0; s < lists.size(); ++s)
        for (auto i : lists[s])
            out.push_back(static_cast<std::int64_t>(s) * stride + i);
    return out;
}

} // namespace

MaeDecoder build_decoder(const DecoderConfig& config, const MLiTConfig& enc, DType dtype, RngStream& init) {
    validate(config);
    MaeDecoder d;
    d.config = config;
    d.mask_token = normal_tensor({1, enc.embed}, 0.02, dtype, init).set_requires_grad();
    d.project = make_linear(enc.embed, config.embed, false, dtype, init);
    if (config.separate_pos_embed)
        d.pos_embed = normal_tensor({enc.tokens(), config.embed}, 0.02, dtype, init).set_requires_grad();
    const auto spec = decoder_layer_spec(config);
    for (int i = 0; i < config.layers; ++i)
        d.layers.push_back(make_encoder_layer(spec, dtype, init));
    d.norm = make_layer_norm(config.embed, dtype);
    d.head = make_linear(config.embed, enc.patch_dim(), false, dtype, init);
    return d;
}

MaeModel build_mae(const MLiTConfig& enc, const DecoderConfig& dec, DType dtype, RngStream& init) {
    MaeModel m;
    m.encoder = build_encoder(enc, dtype, init);
    m.decoder = build_decoder(dec, enc, dtype, init);
    return m;
}

void collect_params(ParamList& out, std::string_view prefix, const MaeDecoder& d) {
    out.add(join_name(prefix, "mask_token"), d.mask_token, false);
    out.add(join_name(prefix, "project"), d.project);
    if (d.pos_embed.defined())
        out.add(join_name(prefix, "pos_embed"), d.pos_embed, false);
    for (std::size_t i = 0; i < d.layers.size(); ++i)
        collect_params(out, join_name(prefix, "layers." + std::to_string(i)), d.layers[i]);
    out.add(join_name(prefix, "norm"), d.norm);
    out.add(join_name(prefix, "head"), d.head);
}

void collect_params(ParamList& out, const MaeModel& model) {
    collect_params(out, "encoder", model.encoder);
    collect_params(out, "decoder", model.decoder);
}

std::int64_t decoder_param_count(const DecoderConfig& c, std::int64_t encoder_embed, std::int64_t tokens,
                                 std::int64_t patch_dim) {
    std::int64_t n = encoder_embed + encoder_embed * c.embed + 2 * c.embed + c.embed * patch_dim;
    if (c.separate_pos_embed)
        n += tokens * c.embed;
    n += c.layers * encoder_layer_param_count(decoder_layer_spec(c));
    return n;
}

MaePrediction mae_predict(const MaeModel& model, const Tensor& images, const MaskPlan& plan,
                          const ForwardContext& ctx) {
    const auto& cfg = model.encoder.config;
    const auto& dec = model.decoder;
    Tensor patches = patchify(images, cfg.patch);
    const std::int64_t b = patches.dim(0), N = cfg.tokens(), n = cfg.num_patches(), m = cfg.embed;
    check_plan(plan, b, n);

    // Visible patches and the classification patch go through the encoder.
    std::vector<std::int64_t> positions;
    for (std::size_t s = 0; s < plan.batch(); ++s) {
        positions.insert(positions.end(), plan.visible[s].begin(), plan.visible[s].end());
        positions.push_back(n);
    }
    const std::int64_t q = static_cast<std::int64_t>(positions.size()) / b;
    for (std::size_t s = 0; s < plan.batch(); ++s)
        if (static_cast<std::int64_t>(plan.visible[s].size()) + 1 != q)
            throw ShapeError("mask plan: samples disagree on visible count");

    EncoderOutput enc = encoder_forward(model.encoder, patches, positions, ctx);
    if (enc.sequence_length != q)
        throw ContractError("encoder sequence length " + std::to_string(enc.sequence_length) + " != " +
                            std::to_string(q));

    // Full-length sequence at encoder width: encoder outputs at their
    // positions, the shared mask token elsewhere, encoder positions re-added.
    std::vector<std::int64_t> enc_rows(positions.size());
    for (std::int64_t s = 0; s < b; ++s)
        for (std::int64_t u = 0; u < q; ++u)
            enc_rows[static_cast<std::size_t>(s * q + u)] = s * N + positions[static_cast<std::size_t>(s * q + u)];
    const auto mask_rows = flat_rows(plan.masked, N);
    std::vector<std::int64_t> token_rows(mask_rows.size(), 0);
    std::vector<std::int64_t> pos_rows(static_cast<std::size_t>(b * N));
    for (std::int64_t s = 0; s < b; ++s)
        for (std::int64_t j = 0; j < N; ++j)
            pos_rows[static_cast<std::size_t>(s * N + j)] = j;

    Tensor seq = Tensor::zeros({b * N, m}, patches.dtype());
    seq = index_add_rows(seq, enc_rows, reshape(enc.tokens, {b * q, m}));
    seq = index_add_rows(seq, mask_rows, gather_rows(dec.mask_token, token_rows));
    seq = add(seq, gather_rows(model.encoder.pos_embed, pos_rows));

    Tensor x = dec.project(seq);
    if (dec.pos_embed.defined())
        x = add(x, gather_rows(dec.pos_embed, pos_rows));
    x = reshape(x, {b, N, dec.config.embed});

    Tensor aux_dec = Tensor::scalar(0.0, patches.dtype());
    ForwardContext layer_ctx = ctx;
    for (std::size_t i = 0; i < dec.layers.size(); ++i) {
        layer_ctx.layer = ctx.layer + model.encoder.layers.size() + i;
        auto out = encoder_layer_forward(x, dec.layers[i], layer_ctx);
        x = out.y;
        aux_dec = add(aux_dec, out.aux);
    }
    Tensor pred = dec.head(dec.norm(x));

    MaePrediction out;
    out.patches = patches;
    out.predictions = pred;
    out.aux_encoder = enc.aux;
    out.aux_decoder = aux_dec;
    out.encoder_sequence_length = enc.sequence_length;
    return out;
}

LossBreakdown mae_loss(const Tensor& predictions, const Tensor& targets, const MaskPlan& plan, const Tensor& aux,
                       const MaeWeights& w) {
    if (predictions.shape() != targets.shape() || predictions.rank() != 3)
        throw ShapeError("mae_loss: prediction " + shape_str(predictions.shape()) + " vs target " +
                         shape_str(targets.shape()));
    const std::int64_t b = predictions.dim(0), N = predictions.dim(1), d = predictions.dim(2);
    Tensor p2 = reshape(predictions, {b * N, d});
    Tensor t2 = reshape(targets, {b * N, d});
    const auto masked = flat_rows(plan.masked, N);
    const auto visible = flat_rows(plan.visible, N);
    LossBreakdown out;
    out.mse_masked = mse(gather_rows(p2, masked), gather_rows(t2, masked));
    out.mse_unmasked = mse(gather_rows(p2, visible), gather_rows(t2, visible));
    out.aux = aux;
    out.total = add(add(out.mse_masked, scale(out.mse_unmasked, w.alpha)), scale(aux, w.beta));
    return out;
}

MaeOutput mae_forward(const MaeModel& model, const Tensor& images, const MaskPlan& plan, const ForwardContext& ctx,
                      const MaeWeights& weights) {
    MaeOutput out;
    out.prediction = mae_predict(model, images, plan, ctx);
    const auto& p = out.prediction;
    Tensor aux = model.decoder.config.include_aux ? add(p.aux_encoder, p.aux_decoder) : p.aux_encoder;
    out.loss = mae_loss(p.predictions, p.patches, plan, aux, weights);
    return out;
}

Tensor reconstruct(const MaeModel& model, const Tensor& images, const MaskPlan& plan, bool copy_visible,
                   const ForwardContext& ctx) {
    autodiff::NoGrad guard;
    const auto& cfg = model.encoder.config;
    auto p = mae_predict(model, images, plan, ctx);
    Tensor patches = p.predictions.clone();
    if (copy_visible) {
        const std::int64_t N = cfg.tokens(), d = cfg.patch_dim();
        dispatch(patches.dtype(), [&]<class T>() {
            auto dst = patches.mutable_data<T>();
            auto src = p.patches.data<T>();
            for (std::size_t s = 0; s < plan.batch(); ++s)
                for (auto i : plan.visible[s]) {
                    const auto off = static_cast<std::size_t>((static_cast<std::int64_t>(s) * N + i) * d);
                    std::copy(src.begin() + static_cast<std::ptrdiff_t>(off),
                              src.begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(d)),
                              dst.begin() + static_cast<std::ptrdiff_t>(off));
                }
        });
    }
    return unpatchify(patches, cfg.channels, cfg.image, cfg.patch);
}

} // namespace mlit
