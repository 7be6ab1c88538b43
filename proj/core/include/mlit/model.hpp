#pragma once

#include "mlit/moe.hpp"
#include "mlit/nn.hpp"

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mlit {

/// Architecture hyperparameters of one encoder size.
struct MLiTConfig {
    std::string name = "XXS";
    std::int64_t embed = 108;
    int layers = 9;
    std::int64_t hidden_first = 81;
    std::int64_t hidden_last = 27;
    int heads = 6;
    int groups = 3;
    int experts_min = 3;
    int experts_max = 5;
    int top_k = 2;
    int stages = 3;
    double dropout = 0.1;
    int image = 36;
    int patch = 3;
    int channels = 3;
    int classes = 100;
    SharingMode sharing = SharingMode::v_w2;
    double w_importance = 1e-2;
    double w_load = 1e-2;
    bool squared_cv = false;

    int grid() const { return image / patch; }
    int num_patches() const { return grid() * grid(); }
    /// Image patches plus the trailing all-zero classification patch.
    int tokens() const { return num_patches() + 1; }
    int patch_dim() const { return channels * patch * patch; }
};

/// "S", "XS", "XXS", plus "micro" (m=36, 3 layers) for desk-scale runs.
MLiTConfig mlit_preset(std::string_view name);
std::vector<std::string> mlit_preset_names();

void validate(const MLiTConfig& config);

/// floor(((L-1-i)/(L-1)) * (first-last)) + last for i = 0..L-1; [first] when L == 1.
std::vector<std::int64_t> hidden_size_schedule(int layers, std::int64_t first, std::int64_t last);

/// Stage s (of equal length L / stages) uses experts_min + s experts.
std::vector<int> expert_count_schedule(int layers, int stages = 3, int experts_min = 3, int experts_max = 5);

std::vector<EncoderLayerSpec> layer_specs(const MLiTConfig& config);

/// images[b, c, H, W] -> [b, (H/p)(W/p) + 1, c p p]. Patches are raster ordered,
/// values within a patch ordered (row, col, channel); the last patch is zeros.
Tensor patchify(const Tensor& images, int patch);

/// Inverse of patchify over the first (H/p)(W/p) patches.
Tensor unpatchify(const Tensor& patches, int channels, int image, int patch);

struct MLiTEncoder {
    MLiTConfig config;
    Linear patch_embed; // no bias
    Tensor pos_embed;   // [tokens, m]
    std::vector<EncoderLayer> layers;
    LayerNorm norm;
};

MLiTEncoder build_encoder(const MLiTConfig& config, DType dtype, RngStream& init);

void collect_params(ParamList& out, std::string_view prefix, const MLiTEncoder& encoder);

/// Closed-form headless encoder parameter count.
std::int64_t encoder_param_count(const MLiTConfig& config);

struct EncoderOutput {
    Tensor tokens; // [b, q, m] after the final norm
    Tensor aux;    // summed gate losses over layers
    std::int64_t sequence_length = 0;
};

/// Runs the encoder on patches[b, tokens, patch_dim]. `positions` selects q
/// token positions per sample (row-major [b, q]); empty keeps every position.
/// Positional rows are added before selection.
EncoderOutput encoder_forward(const MLiTEncoder& encoder, const Tensor& patches,
                              std::span<const std::int64_t> positions, const ForwardContext& ctx);

struct MLiTClassifier {
    MLiTEncoder encoder;
    Linear head;
};

MLiTClassifier build_mlit(const MLiTConfig& config, DType dtype, RngStream& init);

void collect_params(ParamList& out, const MLiTClassifier& model);

struct ClassifyOutput {
    Tensor logits; // [b, classes]
    Tensor aux;
};

/// Logits read from the classification patch's final embedding.
ClassifyOutput classify_patches(const MLiTClassifier& model, const Tensor& patches, const ForwardContext& ctx);
ClassifyOutput classify_forward(const MLiTClassifier& model, const Tensor& images, const ForwardContext& ctx);

/// Cross-entropy (mean over batch) + beta * aux.
Tensor classification_loss(const ClassifyOutput& out, std::span<const int> labels, double beta);

/// Parameter totals grouped by the first `depth` name components.
std::vector<std::pair<std::string, std::int64_t>> param_breakdown(const ParamList& params, int depth);

} // namespace mlit
