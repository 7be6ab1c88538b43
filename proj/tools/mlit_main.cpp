#include "mlit/checkpoint.hpp"
#include "mlit/data.hpp"
#include "mlit/mae.hpp"
#include "mlit/model.hpp"
#include "mlit/run_config.hpp"
#include "mlit/training.hpp"
#include "mlit/verify.hpp"

#include <CLI11.hpp>

#include <malloc.h>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace {

using namespace mlit;

// Flags shared by the run commands; each maps onto one config key.
struct Flag {
    const char* name;
    const char* key;
    const char* help;
};

constexpr Flag kRunFlags[] = {
    {"--size", "size", "Model size: S, XS, XXS or micro"},
    {"--dataset", "dataset", "cifar10, cifar100 or synthetic"},
    {"--data-root", "data_root", "Directory holding the CIFAR binaries (default: $MLIT_DATA_ROOT)"},
    {"--train-limit", "train_limit", "Use only the first N training records"},
    {"--test-limit", "test_limit", "Use only the first N test records"},
    {"--synthetic-train", "synthetic_train", "Synthetic training set size"},
    {"--synthetic-test", "synthetic_test", "Synthetic test set size"},
    {"--synthetic-classes", "synthetic_classes", "Synthetic class count"},
    {"--epochs", "epochs", "Total epochs"},
    {"--batch", "batch", "Batch size"},
    {"--base-lr", "base_lr", "Base learning rate (scaled by batch / 256)"},
    {"--warmup-epochs", "warmup_epochs", "Linear warm-up epochs"},
    {"--weight-decay", "weight_decay", "AdamW weight decay"},
    {"--layer-decay", "layer_decay", "Layer-wise learning-rate decay"},
    {"--alpha", "alpha", "Weight of the visible-patch reconstruction term"},
    {"--beta", "beta", "Weight of the gate auxiliary losses"},
    {"--mask-ratio", "mask_ratio", "Fraction of patches masked in pre-training"},
    {"--crop-lo", "crop_lo", "Random resized crop: smallest area fraction"},
    {"--crop-hi", "crop_hi", "Random resized crop: largest area fraction"},
    {"--hflip", "hflip", "Horizontal flip probability"},
    {"--dropout", "dropout", "Expert dropout"},
    {"--w-importance", "w_importance", "Importance loss weight"},
    {"--w-load", "w_load", "Load loss weight"},
    {"--sharing", "sharing", "Shared expert projections: V+W2, V+W or W+W2"},
    {"--seed", "seed", "Random seed"},
    {"--dtype", "dtype", "f32 or f64"},
    {"--out-dir", "out_dir", "Directory for log.csv, config.txt and checkpoints"},
    {"--init-checkpoint", "init_checkpoint", "finetune: pre-trained weights; eval: checkpoint to score"},
    {"--resume", "resume", "Continue an interrupted run from this checkpoint"},
    {"--checkpoint-every", "checkpoint_every", "Write epoch_<n>.ckpt every N epochs"},
    {"--stop-after-epoch", "stop_after_epoch", "Stop (with a checkpoint) after this epoch"},
    {"--eval-split", "eval_split", "eval: train or test"},
};

struct RunOptions {
    std::string config_file;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;
    bool transfer = false;
    bool quiet = false;
};

void add_run_options(CLI::App* cmd, RunOptions& opts) {
    cmd->add_option("--config", opts.config_file, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", opts.sets, "Override any config key (key=value), repeatable");
    cmd->add_flag("--quiet", opts.quiet, "Do not echo log lines to stdout");
    for (const auto& f : kRunFlags) {
        const std::string key = f.key;
        cmd->add_option_function<std::string>(
            f.name, [&opts, key](const std::string& v) { opts.flags[key] = v; }, f.help);
    }
}

RunConfig resolve_config(const std::string& command, const RunOptions& opts) {
    std::map<std::string, std::string> file_values;
    if (!opts.config_file.empty())
        file_values = read_config_file(opts.config_file);
    std::map<std::string, std::string> cli = opts.flags;
    for (const auto& s : opts.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + s + "'");
        cli[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (opts.quiet)
        cli["quiet"] = "true";
    return resolve_run_config(command, opts.transfer, std::move(file_values), cli);
}

int cmd_verify() {
    const auto checks = run_verify();
    int failed = 0;
    for (const auto& c : checks) {
        std::cout << (c.passed ? "PASS  " : "FAIL  ") << c.name << ": " << c.detail << '\n';
        failed += c.passed ? 0 : 1;
    }
    std::cout << checks.size() - static_cast<std::size_t>(failed) << "/" << checks.size() << " checks passed\n";
    return failed == 0 ? 0 : 1;
}

int cmd_count_params(const std::string& size, int depth, bool decoder_pos_table) {
    ParamList params;
    std::int64_t total = 0;
    RngStream init(0);
    if (size == "decoder") {
        const auto enc = mlit_preset("XXS");
        DecoderConfig d = decoder_preset();
        d.separate_pos_embed = decoder_pos_table;
        const auto dec = build_decoder(d, enc, DType::f32, init);
        collect_params(params, "decoder", dec);
        total = decoder_param_count(d, d.embed, enc.tokens(), enc.patch_dim());
    } else {
        const auto cfg = mlit_preset(size);
        const auto enc = build_encoder(cfg, DType::f32, init);
        collect_params(params, "encoder", enc);
        total = encoder_param_count(cfg);
    }
    std::cout << "module,params\n";
    std::int64_t sum = 0;
    for (const auto& [name, n] : param_breakdown(params, depth)) {
        std::cout << name << ',' << n << '\n';
        sum += n;
    }
    std::cout << "total," << sum << '\n';
    if (sum != total) {
        std::cerr << "closed-form count " << total << " disagrees with the built model\n";
        return 1;
    }
    for (const auto& ref : param_references())
        if (ref.name == size) {
            const double rel = (static_cast<double>(total) - ref.reference) / ref.reference;
            std::printf("reference,%.0f\nrelative_difference,%.4f%%\nwithin_tolerance,%s\n", ref.reference,
                        rel * 100, std::abs(rel) <= ref.tolerance ? "yes" : "no");
        }
    if (size == "decoder") {
        const auto c = decoder_counts();
        std::cout << "without_decoder_pos_table," << c.without_pos_table << "\nwith_decoder_pos_table,"
                  << c.with_pos_table << '\n';
    }
    return 0;
}

int run_command(const std::string& command, const RunOptions& opts) {
    const RunConfig cfg = resolve_config(command, opts);
    const RunData data = load_run_data(cfg);
    if (command == "pretrain")
        run_pretrain(cfg, data.train);
    else if (command == "eval")
        run_eval(cfg, cfg.eval_split == "train" ? data.train : data.test);
    else
        run_supervised(cfg, data.train);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    // Activations are large and short-lived; keep freed pages in the heap
    // instead of returning them to the kernel after every op.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    CLI::App app{"mlit: mixture-of-experts vision transformer training and verification"};
    app.require_subcommand(1);

    app.add_subcommand("verify", "Replay the reference examples and report pass/fail per check");

    auto* count = app.add_subcommand("count-params", "Per-module parameter breakdown");
    std::string count_size;
    int depth = 2;
    bool decoder_pos_table = false;
    count->add_option("size", count_size, "S, XS, XXS, micro or decoder")
        ->required()
        ->check(CLI::IsMember({"S", "XS", "XXS", "micro", "decoder"}));
    count->add_option("--depth", depth, "Name components per breakdown row")->check(CLI::PositiveNumber);
    count->add_flag("--decoder-pos-table", decoder_pos_table, "Count a decoder-side positional table");

    RunOptions pre, fine, train, eval;
    add_run_options(app.add_subcommand("pretrain", "Masked-autoencoder pre-training"), pre);
    auto* fine_cmd = app.add_subcommand("finetune", "Fine-tune a pre-trained encoder for classification");
    add_run_options(fine_cmd, fine);
    fine_cmd->add_flag("--transfer", fine.transfer, "Use the 100-epoch transfer recipe for --dataset");
    add_run_options(app.add_subcommand("train", "Supervised training from scratch"), train);
    add_run_options(app.add_subcommand("eval", "Evaluate a checkpoint"), eval);

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("verify"))
            return cmd_verify();
        if (app.got_subcommand("count-params"))
            return cmd_count_params(count_size, depth, decoder_pos_table);
        if (app.got_subcommand("pretrain"))
            return run_command("pretrain", pre);
        if (app.got_subcommand("finetune"))
            return run_command("finetune", fine);
        if (app.got_subcommand("train"))
            return run_command("train", train);
        if (app.got_subcommand("eval"))
            return run_command("eval", eval);
    } catch (const mlit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const mlit::IngestError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const mlit::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
