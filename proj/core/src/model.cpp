#include "mlit/model.hpp"

#include "mlit/ops.hpp"

#include <map>

namespace mlit {

MLiTConfig mlit_preset(std::string_view name) {
    MLiTConfig c;
    c.name = std::string(name);
    if (name == "S") {
        c.embed = 144;
        c.layers = 15;
        c.hidden_first = 144;
        c.hidden_last = 72;
        c.heads = 8;
        c.groups = 4;
    } else if (name == "XS") {
        c.embed = 128;
        c.layers = 12;
        c.hidden_first = 96;
        c.hidden_last = 32;
        c.heads = 8;
        c.groups = 4;
    } else if (name == "XXS") {
        c.embed = 108;
        c.layers = 9;
        c.hidden_first = 81;
        c.hidden_last = 27;
        c.heads = 6;
        c.groups = 3;
    } else if (name == "micro") {
        c.embed = 36;
        c.layers = 3;
        c.hidden_first = 27;
        c.hidden_last = 9;
        c.heads = 6;
        c.groups = 3;
    } else {
        throw ConfigError("unknown model size '" + std::string(name) + "' (expected S, XS, XXS or micro)");
    }
    return c;
}

std::vector<std::string> mlit_preset_names() { return {"S", "XS", "XXS", "micro"}; }

void validate(const MLiTConfig& c) {
    if (c.embed <= 0 || c.layers <= 0)
        throw ConfigError("model: embed and layers must be positive");
    if (c.patch <= 0 || c.image % c.patch != 0)
        throw ConfigError("model: image size must be a multiple of the patch size");
    if (c.classes <= 0)
        throw ConfigError("model: classes must be positive");
    validate_gqa_shape(c.embed, c.heads, c.groups);
    if (c.hidden_first < c.hidden_last || c.hidden_last <= 0)
        throw ConfigError("model: hidden sizes must satisfy first >= last > 0");
    // Throws for an invalid staging.
    for (int t : expert_count_schedule(c.layers, c.stages, c.experts_min, c.experts_max))
        validate_top_k(c.top_k, t);
}

std::vector<std::int64_t> hidden_size_schedule(int layers, std::int64_t first, std::int64_t last) {
    if (layers < 1)
        throw ConfigError("hidden_size_schedule: need at least one layer");
    if (first < last)
        throw ConfigError("hidden_size_schedule: first hidden size must be >= last");
    if (layers == 1)
        return {first};
    // Exact rational floor: ((L-1-i) * (first-last)) / (L-1) on non-negative integers.
    const std::int64_t span = first - last;
    const std::int64_t denom = layers - 1;
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(layers));
    for (std::int64_t i = 0; i < layers; ++i)
        out.push_back((denom - i) * span / denom + last);
    return out;
}

std::vector<int> expert_count_schedule(int layers, int stages, int experts_min, int experts_max) {
    if (stages < 1 || layers < 1)
        throw ConfigError("expert_count_schedule: layers and stages must be positive");
    if (layers % stages != 0)
        throw ConfigError("expert_count_schedule: " + std::to_string(layers) + " layers not divisible into " +
                          std::to_string(stages) + " stages");
    if (experts_min + stages - 1 != experts_max)
        throw ConfigError("expert_count_schedule: experts must grow by one per stage from " +
                          std::to_string(experts_min) + " to " + std::to_string(experts_max));
    const int stage_len = layers / stages;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(layers));
    for (int i = 0; i < layers; ++i)
        out.push_back(experts_min + i / stage_len);
    return out;
}

std::vector<EncoderLayerSpec> layer_specs(const MLiTConfig& c) {
    const auto hidden = hidden_size_schedule(c.layers, c.hidden_first, c.hidden_last);
    const auto experts = expert_count_schedule(c.layers, c.stages, c.experts_min, c.experts_max);
    std::vector<EncoderLayerSpec> specs;
    for (int i = 0; i < c.layers; ++i) {
        EncoderLayerSpec s;
        s.embed = c.embed;
        s.heads = c.heads;
        s.groups = c.groups;
        s.hidden = hidden[static_cast<std::size_t>(i)];
        s.experts = experts[static_cast<std::size_t>(i)];
        s.k = c.top_k;
        s.dropout = c.dropout;
        s.sharing = c.sharing;
        s.w_importance = c.w_importance;
        s.w_load = c.w_load;
        s.squared_cv = c.squared_cv;
        specs.push_back(s);
    }
    return specs;
}

Tensor patchify(const Tensor& images, int patch) {
    if (images.rank() != 4 || patch <= 0 || images.dim(2) % patch != 0 || images.dim(3) % patch != 0)
        throw ShapeError("patchify: expected [b, c, H, W] with H, W multiples of " + std::to_string(patch) +
                         ", got " + shape_str(images.shape()));
    const std::int64_t b = images.dim(0), c = images.dim(1), H = images.dim(2), W = images.dim(3);
    const std::int64_t gh = H / patch, gw = W / patch, n = gh * gw, pd = c * patch * patch;
    return dispatch(images.dtype(), [&]<class T>() {
        auto in = images.data<T>();
        std::vector<T> out(static_cast<std::size_t>(b * (n + 1) * pd), T(0));
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t r = 0; r < gh; ++r)
                for (std::int64_t q = 0; q < gw; ++q) {
                    T* dst = out.data() + (s * (n + 1) + r * gw + q) * pd;
                    for (std::int64_t dy = 0; dy < patch; ++dy)
                        for (std::int64_t dx = 0; dx < patch; ++dx)
                            for (std::int64_t ch = 0; ch < c; ++ch) {
                                const std::int64_t y = r * patch + dy, x = q * patch + dx;
                                *dst++ = in[static_cast<std::size_t>(((s * c + ch) * H + y) * W + x)];
                            }
                }
        return Tensor::adopt<T>({b, n + 1, pd}, std::move(out));
    });
}

Tensor unpatchify(const Tensor& patches, int channels, int image, int patch) {
    const std::int64_t g = image / patch, n = g * g, pd = static_cast<std::int64_t>(channels) * patch * patch;
    if (patches.rank() != 3 || patches.dim(1) < n || patches.dim(2) != pd)
        throw ShapeError("unpatchify: expected [b, >=" + std::to_string(n) + ", " + std::to_string(pd) +
                         "], got " + shape_str(patches.shape()));
    const std::int64_t b = patches.dim(0), N = patches.dim(1);
    return dispatch(patches.dtype(), [&]<class T>() {
        auto in = patches.data<T>();
        std::vector<T> out(static_cast<std::size_t>(b * channels * image * image));
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t r = 0; r < g; ++r)
                for (std::int64_t q = 0; q < g; ++q) {
                    const T* src = in.data() + (s * N + r * g + q) * pd;
                    for (std::int64_t dy = 0; dy < patch; ++dy)
                        for (std::int64_t dx = 0; dx < patch; ++dx)
                            for (std::int64_t ch = 0; ch < channels; ++ch) {
                                const std::int64_t y = r * patch + dy, x = q * patch + dx;
                                out[static_cast<std::size_t>(((s * channels + ch) * image + y) * image + x)] = *src++;
                            }
                }
        return Tensor::adopt<T>({b, channels, image, image}, std::move(out));
    });
}

MLiTEncoder build_encoder(const MLiTConfig& config, DType dtype, RngStream& init) {
    validate(config);
    MLiTEncoder enc;
    enc.config = config;
    enc.patch_embed = make_linear(config.patch_dim(), config.embed, false, dtype, init);
    enc.pos_embed = normal_tensor({config.tokens(), config.embed}, 0.02, dtype, init).set_requires_grad();
    for (const auto& spec : layer_specs(config))
        enc.layers.push_back(make_encoder_layer(spec, dtype, init));
    enc.norm = make_layer_norm(config.embed, dtype);
    return enc;
}

void collect_params(ParamList& out, std::string_view prefix, const MLiTEncoder& enc) {
    out.add(join_name(prefix, "patch_embed"), enc.patch_embed);
    out.add(join_name(prefix, "pos_embed"), enc.pos_embed, false);
    for (std::size_t i = 0; i < enc.layers.size(); ++i)
        collect_params(out, join_name(prefix, "layers." + std::to_string(i)), enc.layers[i]);
    out.add(join_name(prefix, "norm"), enc.norm);
}

std::int64_t encoder_param_count(const MLiTConfig& config) {
    std::int64_t n = config.patch_dim() * config.embed + config.tokens() * config.embed + 2 * config.embed;
    for (const auto& spec : layer_specs(config))
        n += encoder_layer_param_count(spec);
    return n;
}

EncoderOutput encoder_forward(const MLiTEncoder& enc, const Tensor& patches, std::span<const std::int64_t> positions,
                              const ForwardContext& ctx) {
    const auto& cfg = enc.config;
    if (patches.rank() != 3 || patches.dim(1) != cfg.tokens() || patches.dim(2) != cfg.patch_dim())
        throw ShapeError("encoder_forward: expected [b, " + std::to_string(cfg.tokens()) + ", " +
                         std::to_string(cfg.patch_dim()) + "], got " + shape_str(patches.shape()));
    const std::int64_t b = patches.dim(0), N = patches.dim(1), m = cfg.embed;
    std::vector<std::int64_t> pos;
    if (positions.empty()) {
        pos.resize(static_cast<std::size_t>(b * N));
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t j = 0; j < N; ++j)
                pos[static_cast<std::size_t>(s * N + j)] = j;
    } else {
        if (static_cast<std::int64_t>(positions.size()) % b != 0)
            throw ShapeError("encoder_forward: positions not divisible by batch");
        pos.assign(positions.begin(), positions.end());
    }
    const std::int64_t q = static_cast<std::int64_t>(pos.size()) / b;
    std::vector<std::int64_t> flat(pos.size());
    for (std::int64_t s = 0; s < b; ++s)
        for (std::int64_t u = 0; u < q; ++u)
            flat[static_cast<std::size_t>(s * q + u)] = s * N + pos[static_cast<std::size_t>(s * q + u)];

    Tensor selected = gather_rows(reshape(patches, {b * N, cfg.patch_dim()}), flat);
    Tensor x = add(enc.patch_embed(selected), gather_rows(enc.pos_embed, pos));
    x = reshape(x, {b, q, m});

    Tensor aux = Tensor::scalar(0.0, patches.dtype());
    ForwardContext layer_ctx = ctx;
    for (std::size_t i = 0; i < enc.layers.size(); ++i) {
        layer_ctx.layer = ctx.layer + i;
        auto out = encoder_layer_forward(x, enc.layers[i], layer_ctx);
        x = out.y;
        aux = add(aux, out.aux);
    }
    return {enc.norm(x), aux, q};
}

MLiTClassifier build_mlit(const MLiTConfig& config, DType dtype, RngStream& init) {
    MLiTClassifier model;
    model.encoder = build_encoder(config, dtype, init);
    model.head = make_linear(config.embed, config.classes, true, dtype, init);
    return model;
}

void collect_params(ParamList& out, const MLiTClassifier& model) {
    collect_params(out, "encoder", model.encoder);
    out.add("head", model.head);
}

ClassifyOutput classify_patches(const MLiTClassifier& model, const Tensor& patches, const ForwardContext& ctx) {
    auto enc = encoder_forward(model.encoder, patches, {}, ctx);
    const std::int64_t b = enc.tokens.dim(0), n = enc.tokens.dim(1), m = enc.tokens.dim(2);
    std::vector<std::int64_t> cls(static_cast<std::size_t>(b));
    for (std::int64_t s = 0; s < b; ++s)
        cls[static_cast<std::size_t>(s)] = s * n + n - 1;
    Tensor token = gather_rows(reshape(enc.tokens, {b * n, m}), cls);
    return {model.head(token), enc.aux};
}

ClassifyOutput classify_forward(const MLiTClassifier& model, const Tensor& images, const ForwardContext& ctx) {
    const auto& cfg = model.encoder.config;
    if (images.rank() != 4 || images.dim(1) != cfg.channels || images.dim(2) != cfg.image || images.dim(3) != cfg.image)
        throw ShapeError("classify_forward: expected [b, " + std::to_string(cfg.channels) + ", " +
                         std::to_string(cfg.image) + ", " + std::to_string(cfg.image) + "], got " +
                         shape_str(images.shape()));
    return classify_patches(model, patchify(images, cfg.patch), ctx);
}

Tensor classification_loss(const ClassifyOutput& out, std::span<const int> labels, double beta) {
    return add(cross_entropy(out.logits, labels), scale(out.aux, beta));
}

std::vector<std::pair<std::string, std::int64_t>> param_breakdown(const ParamList& params, int depth) {
    std::vector<std::pair<std::string, std::int64_t>> rows;
    std::map<std::string, std::size_t> index;
    for (const auto& p : params.items()) {
        std::string key;
        std::size_t pos = 0;
        for (int d = 0; d < depth; ++d) {
            const auto next = p.name.find('.', pos);
            if (next == std::string::npos) {
                pos = std::string::npos;
                break;
            }
            pos = next + 1;
        }
        key = pos == std::string::npos ? p.name : p.name.substr(0, pos - 1);
        auto [it, inserted] = index.try_emplace(key, rows.size());
        if (inserted)
            rows.emplace_back(key, 0);
        rows[it->second].second += p.tensor.numel();
    }
    return rows;
}

} // namespace mlit
