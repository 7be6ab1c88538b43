#pragma once

#include "mlit/checkpoint.hpp"
#include "mlit/data.hpp"
#include "mlit/mae.hpp"
#include "mlit/model.hpp"
#include "mlit/run_config.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace mlit {

struct RunHooks {
    /// Receives every CSV line (header first) as it is written.
    std::function<void(const std::string&)> on_line;
    /// Called after each optimizer step with the global step and batch loss.
    std::function<void(std::int64_t, double)> on_step;
};

struct RunResult {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows; // one per completed epoch, first column = epoch
    std::int64_t last_epoch = 0;
    std::int64_t steps = 0;
    /// Coefficient of variation of expert assignments over the last epoch,
    /// averaged over MoE layers.
    double routing_cv = 0.0;
    std::filesystem::path checkpoint;

    double column(const std::string& name, std::size_t row) const;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::int64_t count = 0;
};

struct RunData {
    Dataset train;
    Dataset test;
};

/// Synthetic data is generated from the seed; CIFAR data is read from the
/// resolved root and truncated to the configured limits.
RunData load_run_data(const RunConfig& cfg);

/// CSV formatting shared by file and stdout logs.
std::string csv_line(const std::vector<std::string>& cells);
std::string csv_line(const std::vector<double>& values);

/// Masked pre-training. Writes log.csv, config.txt and checkpoints to out_dir.
RunResult run_pretrain(const RunConfig& cfg, const Dataset& train, const RunHooks& hooks = {});

/// Supervised training ("train") or fine-tuning from cfg.init_checkpoint ("finetune").
RunResult run_supervised(const RunConfig& cfg, const Dataset& train, const RunHooks& hooks = {});

/// Scores the checkpoint in cfg.init_checkpoint on `data` in evaluation mode.
/// Classifiers report cross-entropy and accuracy; pre-training checkpoints
/// report the masked reconstruction objective.
EvalResult run_eval(const RunConfig& cfg, const Dataset& data, const RunHooks& hooks = {});

EvalResult evaluate_classifier(const MLiTClassifier& model, const Dataset& data, const AugmentConfig& aug,
                               std::int64_t batch, DType dtype);

/// Rebuilds the run's model from the config snapshot stored in a checkpoint.
RunConfig config_from_checkpoint(const Checkpoint& ckpt);

} // namespace mlit
