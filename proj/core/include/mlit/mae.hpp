#pragma once

#include "mlit/model.hpp"

#include <vector>

namespace mlit {

/// Lightweight MoE decoder used for masked pre-training. The same shape is
/// used for every encoder size.
struct DecoderConfig {
    std::int64_t embed = 108;
    int layers = 4;
    std::int64_t hidden = 72;
    int heads = 6;
    int groups = 3;
    int experts = 3;
    int top_k = 2;
    double dropout = 0.1;
    SharingMode sharing = SharingMode::v_w2;
    double w_importance = 1e-2;
    double w_load = 1e-2;
    bool squared_cv = false;
    /// Adds a decoder-width positional table after the input projection.
    bool separate_pos_embed = false;
    /// Includes the decoder gates' aux losses in the objective.
    bool include_aux = true;
};

DecoderConfig decoder_preset();
void validate(const DecoderConfig& config);

/// Per-sample split of patch indices. Both lists are ascending.
struct MaskPlan {
    std::vector<std::vector<std::int64_t>> visible;
    std::vector<std::vector<std::int64_t>> masked;

    std::size_t batch() const { return visible.size(); }
};

/// Uniform random split of {0..n-1}: floor(n (1 - ratio)) visible, the rest masked.
MaskPlan random_mask(std::int64_t n, double ratio, RngStream& stream, std::size_t batch = 1);

struct MaeDecoder {
    DecoderConfig config;
    Tensor mask_token; // [1, encoder embed]
    Linear project;    // encoder embed -> decoder embed, no bias
    Tensor pos_embed;  // [tokens, decoder embed], only with separate_pos_embed
    std::vector<EncoderLayer> layers;
    LayerNorm norm;
    Linear head; // decoder embed -> patch_dim, no bias
};

struct MaeModel {
    MLiTEncoder encoder;
    MaeDecoder decoder;
};

MaeDecoder build_decoder(const DecoderConfig& config, const MLiTConfig& encoder_config, DType dtype,
                         RngStream& init);
MaeModel build_mae(const MLiTConfig& encoder_config, const DecoderConfig& decoder_config, DType dtype,
                   RngStream& init);

void collect_params(ParamList& out, std::string_view prefix, const MaeDecoder& decoder);
/// Encoder under "encoder.", decoder under "decoder.".
void collect_params(ParamList& out, const MaeModel& model);

/// Closed-form decoder parameter count for an encoder of width `encoder_embed`.
std::int64_t decoder_param_count(const DecoderConfig& config, std::int64_t encoder_embed, std::int64_t tokens,
                                 std::int64_t patch_dim);

struct MaeWeights {
    double alpha = 0.1; // weight of the visible-patch reconstruction term
    double beta = 0.5;  // weight of the gate aux losses
};

struct MaePrediction {
    Tensor patches;     // [b, tokens, patch_dim] targets
    Tensor predictions; // [b, tokens, patch_dim]
    Tensor aux_encoder;
    Tensor aux_decoder;
    std::int64_t encoder_sequence_length = 0;
};

/// Encodes the visible patches plus the classification patch, then decodes the
/// full sequence with mask tokens at masked positions.
MaePrediction mae_predict(const MaeModel& model, const Tensor& images, const MaskPlan& plan,
                          const ForwardContext& ctx);

struct LossBreakdown {
    Tensor mse_masked;
    Tensor mse_unmasked;
    Tensor aux; // aux_encoder + aux_decoder (when enabled)
    Tensor total;
};

/// total = mse_masked + alpha * mse_unmasked + beta * aux. The classification
/// patch is in neither reconstruction term.
LossBreakdown mae_loss(const Tensor& predictions, const Tensor& targets, const MaskPlan& plan, const Tensor& aux,
                       const MaeWeights& weights);

struct MaeOutput {
    LossBreakdown loss;
    MaePrediction prediction;
};

MaeOutput mae_forward(const MaeModel& model, const Tensor& images, const MaskPlan& plan, const ForwardContext& ctx,
                      const MaeWeights& weights = {});

/// Predicted images [b, c, H, W]. With copy_visible the visible patches are
/// taken from the input instead of the decoder.
Tensor reconstruct(const MaeModel& model, const Tensor& images, const MaskPlan& plan, bool copy_visible,
                   const ForwardContext& ctx);

} // namespace mlit
