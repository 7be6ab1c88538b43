#pragma once

#include "mlit/data.hpp"
#include "mlit/mae.hpp"
#include "mlit/moe.hpp"
#include "mlit/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mlit {

/// Settings of one CLI run. Every field has a flat config-file key.
struct RunConfig {
    std::string command = "train"; // pretrain | finetune | train | eval
    std::string size = "XXS";
    std::string dataset = "synthetic";
    std::string data_root;
    std::int64_t train_limit = 0; // 0 keeps every record
    std::int64_t test_limit = 0;
    std::int64_t synthetic_train = 512;
    std::int64_t synthetic_test = 128;
    int synthetic_classes = 10;
    int classes = 0; // 0 derives from dataset

    double epochs = 300;
    std::int64_t batch = 448;
    double base_lr = 5e-3;
    double warmup_epochs = 20;
    double weight_decay = 0.05;
    double layer_decay = 1.0;
    double alpha = 0.1;
    double beta = 0.5;
    double mask_ratio = 0.75;
    double crop_lo = 0.8;
    double crop_hi = 1.0;
    double hflip = 0.5;
    double dropout = 0.1;
    double w_importance = 1e-2;
    double w_load = 1e-2;
    bool squared_cv = false;
    std::string sharing = "V+W2";
    bool decoder_aux = true;
    bool decoder_pos_embed = false;

    std::uint64_t seed = 0;
    std::string dtype = "f32";
    std::string out_dir = "runs/default";
    std::string init_checkpoint; // finetune: pretrain weights; eval: model to score
    std::string resume;          // continue from this checkpoint
    std::int64_t checkpoint_every = 0; // epochs between numbered checkpoints; 0 = final only
    std::int64_t stop_after_epoch = 0; // stop early (for interrupted runs); 0 = run to the end
    std::string eval_split = "test";
    bool quiet = false;
};

/// Recipe defaults for `command` on `size`:
///   pretrain: Table values for masked pre-training (epochs and batch by size),
///   finetune: the 300-epoch fine-tuning recipe,
///   train: supervised-from-scratch deviations for `dataset`.
RunConfig recipe_defaults(const std::string& command, const std::string& size = "XXS",
                          const std::string& dataset = "cifar100");

/// Per-dataset rows of the transfer fine-tuning and supervised recipes.
struct RecipeRow {
    std::int64_t batch;
    double base_lr;
    double layer_decay;
    double warmup_epochs;
};
std::optional<RecipeRow> transfer_recipe(const std::string& dataset);
std::optional<RecipeRow> supervised_recipe(const std::string& dataset);

/// Applies the transfer fine-tuning row for cfg.dataset (100 epochs).
void apply_transfer_recipe(RunConfig& cfg);

std::vector<std::string> config_keys();
std::map<std::string, std::string> to_map(const RunConfig& cfg);
/// Sets one field from its textual value; unknown keys throw ConfigError.
void set_field(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_map(RunConfig& cfg, const std::map<std::string, std::string>& values);

/// "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& file);
std::string format_config(const RunConfig& cfg);
void write_config_file(const std::filesystem::path& file, const RunConfig& cfg);

void validate(const RunConfig& cfg);

/// Recipe defaults for `command` (with the transfer row when `transfer`), then
/// file values, then command-line values. "size" and "dataset" pick the recipe
/// from the highest layer that sets them. When epochs change but no layer sets
/// warmup_epochs, the recipe warmup is scaled to the same fraction of the run.
/// The result is validated.
RunConfig resolve_run_config(const std::string& command, bool transfer,
                             std::map<std::string, std::string> file_values,
                             const std::map<std::string, std::string>& cli_values);

MLiTConfig model_config(const RunConfig& cfg);
DecoderConfig decoder_config(const RunConfig& cfg);
AugmentConfig augment_config(const RunConfig& cfg);
AdamWOptions optimizer_options(const RunConfig& cfg);
DType run_dtype(const RunConfig& cfg);

/// Dataset root from cfg.data_root, else the MLIT_DATA_ROOT environment variable.
std::filesystem::path resolve_data_root(const RunConfig& cfg);

} // namespace mlit
