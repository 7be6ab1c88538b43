#include "mlit/training.hpp"

#include "mlit/autodiff.hpp"
#include "mlit/ops.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>

namespace mlit {

namespace fs = std::filesystem;

double RunResult::column(const std::string& name, std::size_t row) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
        throw ContractError("run result has no column '" + name + "'");
    return rows.at(row).at(static_cast<std::size_t>(it - header.begin()));
}

std::string csv_line(const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i)
            out += ',';
        out += cells[i];
    }
    return out;
}

std::string csv_line(const std::vector<double>& values) {
    std::vector<std::string> cells;
    char buf[64];
    for (double v : values) {
        auto res = std::to_chars(buf, buf + sizeof buf, v);
        cells.emplace_back(buf, res.ptr);
    }
    return csv_line(cells);
}

RunData load_run_data(const RunConfig& cfg) {
    RunData d;
    const auto source = parse_source(cfg.dataset);
    if (source == DatasetSource::synthetic) {
        d.train = make_synthetic(cfg.synthetic_train, cfg.synthetic_classes, cfg.seed * 2 + 1);
        d.test = make_synthetic(cfg.synthetic_test, cfg.synthetic_classes, cfg.seed * 2 + 2);
        d.test.split = Split::test;
        return d;
    }
    const auto root = resolve_data_root(cfg);
    if (root.empty())
        throw IngestError("no dataset root: pass --data-root or set MLIT_DATA_ROOT");
    auto limit = [](Dataset ds, std::int64_t n) { return n > 0 && n < ds.size() ? take(ds, n) : ds; };
    if (cfg.command == "eval") {
        const auto split = cfg.eval_split == "train" ? Split::train : Split::test;
        auto ds = limit(load_cifar(root, source, split), split == Split::train ? cfg.train_limit : cfg.test_limit);
        (split == Split::train ? d.train : d.test) = std::move(ds);
        return d;
    }
    d.train = limit(load_cifar(root, source, Split::train), cfg.train_limit);
    return d;
}

namespace {

struct LogSink {
    LogSink(const RunConfig& cfg, const RunHooks& hooks, std::vector<std::string> header, bool append)
        : hooks(hooks), quiet(cfg.quiet) {
        const fs::path path = fs::path(cfg.out_dir) / "log.csv";
        const bool fresh = !append || !fs::exists(path);
        file.open(path, fresh ? std::ios::trunc : std::ios::app);
        if (!file)
            throw ConfigError("cannot write " + path.string());
        if (fresh)
            file << csv_line(header) << '\n';
        emit(csv_line(header), false);
    }
    void row(const std::vector<double>& values) {
        const auto line = csv_line(values);
        file << line << '\n';
        file.flush();
        emit(line, true);
    }
    void emit(const std::string& line, bool) {
        if (hooks.on_line)
            hooks.on_line(line);
        if (!quiet)
            std::cout << line << '\n' << std::flush;
    }
    const RunHooks& hooks;
    bool quiet;
    std::ofstream file;
};

void prepare_out_dir(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    write_config_file(fs::path(cfg.out_dir) / "config.txt", cfg);
}

Checkpoint snapshot(const RunConfig& cfg, const std::string& kind, std::int64_t epoch, const ParamList& params,
                    const AdamW& opt) {
    Checkpoint c;
    c.seed = cfg.seed;
    c.epoch = epoch;
    c.config = to_map(cfg);
    c.config["model"] = kind;
    store_params(c, params);
    store_optimizer(c, opt);
    return c;
}

fs::path write_checkpoints(const RunConfig& cfg, const std::string& kind, std::int64_t epoch, bool last,
                           const ParamList& params, const AdamW& opt) {
    const bool periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
    if (!periodic && !last)
        return {};
    const auto ckpt = snapshot(cfg, kind, epoch, params, opt);
    if (periodic)
        save_checkpoint(fs::path(cfg.out_dir) / ("epoch_" + std::to_string(epoch) + ".ckpt"), ckpt);
    const auto path = fs::path(cfg.out_dir) / "last.ckpt";
    save_checkpoint(path, ckpt);
    return path;
}

struct Resume {
    std::int64_t first_epoch = 1;
    std::uint64_t seed = 0;
};

Resume resume_from(const RunConfig& cfg, const std::string& kind, const ParamList& params, AdamW& opt) {
    Resume r{1, cfg.seed};
    if (cfg.resume.empty())
        return r;
    const auto ckpt = load_checkpoint(cfg.resume);
    if (auto it = ckpt.config.find("model"); it == ckpt.config.end() || it->second != kind)
        throw CheckpointError(cfg.resume + ": not a " + kind + " checkpoint");
    if (ckpt.seed != cfg.seed)
        throw CheckpointError(cfg.resume + ": checkpoint seed " + std::to_string(ckpt.seed) +
                              " differs from run seed " + std::to_string(cfg.seed));
    restore_params(ckpt, params);
    restore_optimizer(ckpt, opt);
    r.first_epoch = ckpt.epoch + 1;
    return r;
}

std::int64_t total_epochs(const RunConfig& cfg) { return static_cast<std::int64_t>(std::llround(cfg.epochs)); }

std::int64_t steps_per_epoch(std::int64_t n, std::int64_t batch) { return (n + batch - 1) / batch; }

Schedule make_schedule(const RunConfig& cfg, std::int64_t n) {
    Schedule s;
    s.base_lr = cfg.base_lr;
    s.batch_size = cfg.batch;
    s.total_epochs = cfg.epochs;
    s.warmup_epochs = cfg.warmup_epochs;
    s.steps_per_epoch = steps_per_epoch(n, cfg.batch);
    validate(s);
    return s;
}

std::vector<std::int64_t> slice(const std::vector<std::int64_t>& order, std::int64_t step, std::int64_t batch) {
    const auto begin = step * batch;
    const auto end = std::min<std::int64_t>(begin + batch, static_cast<std::int64_t>(order.size()));
    return {order.begin() + begin, order.begin() + end};
}

int argmax_row(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace

RunResult run_pretrain(const RunConfig& cfg, const Dataset& train, const RunHooks& hooks) {
    validate(cfg);
    if (train.size() == 0)
        throw IngestError("pre-training set is empty");
    const DType dtype = run_dtype(cfg);
    const Rng rng(cfg.seed);
    RngStream init = rng.stream(streams::init);
    MaeModel model = build_mae(model_config(cfg), decoder_config(cfg), dtype, init);
    ParamList params;
    collect_params(params, model);
    AdamW opt(params, optimizer_options(cfg));
    const Resume resume = resume_from(cfg, "mae", params, opt);

    const auto n = train.size();
    const Schedule sched = make_schedule(cfg, n);
    const auto aug = augment_config(cfg);
    const MaeWeights weights{cfg.alpha, cfg.beta};
    const auto patches = model.encoder.config.num_patches();

    prepare_out_dir(cfg);
    RunResult result;
    result.header = {"epoch", "total", "mse_masked", "mse_unmasked", "aux", "lr", "routing_cv"};
    LogSink log(cfg, hooks, result.header, !cfg.resume.empty());

    std::int64_t global_step = opt.steps();
    const auto last = total_epochs(cfg);
    for (std::int64_t epoch = resume.first_epoch; epoch <= last; ++epoch) {
        const auto e = static_cast<std::uint64_t>(epoch);
        RngStream order_rng = rng.stream(streams::data_order, e);
        RngStream aug_rng = rng.stream(streams::augment, e);
        RngStream mask_rng = rng.stream(streams::masking, e);
        RngStream noise_rng = rng.stream(streams::gate_noise, e);
        RngStream drop_rng = rng.stream(streams::dropout, e);
        const auto order = epoch_order(n, order_rng);
        RoutingStats routing;
        ForwardContext ctx{true, &noise_rng, &drop_rng, DispatchMode::sparse, &routing, 0};

        double sums[4] = {0, 0, 0, 0};
        double lr = 0;
        for (std::int64_t step = 0; step < sched.steps_per_epoch; ++step) {
            const auto idx = slice(order, step, cfg.batch);
            const auto batch = make_batch(train, idx, aug, true, &aug_rng, dtype);
            const auto plan = random_mask(patches, cfg.mask_ratio, mask_rng, idx.size());
            Tape tape;
            MaeOutput out;
            {
                auto rec = tape.record();
                out = mae_forward(model, batch.images, plan, ctx, weights);
            }
            const auto grads = tape.backward(out.loss.total);
            lr = lr_at(global_step, sched);
            opt.step(grads, lr);
            ++global_step;
            const double b = static_cast<double>(idx.size());
            sums[0] += b * out.loss.total.item();
            sums[1] += b * out.loss.mse_masked.item();
            sums[2] += b * out.loss.mse_unmasked.item();
            sums[3] += b * out.loss.aux.item();
            if (hooks.on_step)
                hooks.on_step(global_step, out.loss.total.item());
        }
        const double nn = static_cast<double>(n);
        std::vector<double> row = {static_cast<double>(epoch), sums[0] / nn, sums[1] / nn, sums[2] / nn,
                                   sums[3] / nn, lr, routing.mean_cv()};
        log.row(row);
        result.rows.push_back(row);
        result.last_epoch = epoch;
        result.routing_cv = routing.mean_cv();
        const bool stop = cfg.stop_after_epoch > 0 && epoch >= cfg.stop_after_epoch;
        auto path = write_checkpoints(cfg, "mae", epoch, stop || epoch == last, params, opt);
        if (!path.empty())
            result.checkpoint = path;
        if (stop)
            break;
    }
    result.steps = global_step;
    return result;
}

RunResult run_supervised(const RunConfig& cfg, const Dataset& train, const RunHooks& hooks) {
    validate(cfg);
    if (train.size() == 0)
        throw IngestError("training set is empty");
    const DType dtype = run_dtype(cfg);
    const Rng rng(cfg.seed);
    RngStream init = rng.stream(streams::init);
    const MLiTConfig mcfg = model_config(cfg);
    MLiTClassifier model = build_mlit(mcfg, dtype, init);
    ParamList params;
    collect_params(params, model);

    if (cfg.command == "finetune" && cfg.resume.empty()) {
        if (cfg.init_checkpoint.empty())
            throw ConfigError("finetune needs init_checkpoint (a pre-training checkpoint)");
        const auto ckpt = load_checkpoint(cfg.init_checkpoint);
        ParamList encoder_params;
        collect_params(encoder_params, "encoder", model.encoder);
        restore_params(ckpt, encoder_params);
    }

    AdamW opt(params, optimizer_options(cfg));
    const Resume resume = resume_from(cfg, "classifier", params, opt);

    const auto lrs = layerwise_lrs(cfg.layer_decay, mcfg.layers);
    std::vector<double> multipliers;
    for (const auto& p : params.items())
        multipliers.push_back(layerwise_multiplier(p.name, lrs));

    const auto n = train.size();
    const Schedule sched = make_schedule(cfg, n);
    const auto aug = augment_config(cfg);

    prepare_out_dir(cfg);
    RunResult result;
    result.header = {"epoch", "loss", "cross_entropy", "aux", "train_accuracy", "lr", "routing_cv"};
    LogSink log(cfg, hooks, result.header, !cfg.resume.empty());

    std::int64_t global_step = opt.steps();
    const auto last = total_epochs(cfg);
    for (std::int64_t epoch = resume.first_epoch; epoch <= last; ++epoch) {
        const auto e = static_cast<std::uint64_t>(epoch);
        RngStream order_rng = rng.stream(streams::data_order, e);
        RngStream aug_rng = rng.stream(streams::augment, e);
        RngStream noise_rng = rng.stream(streams::gate_noise, e);
        RngStream drop_rng = rng.stream(streams::dropout, e);
        const auto order = epoch_order(n, order_rng);
        RoutingStats routing;
        ForwardContext ctx{true, &noise_rng, &drop_rng, DispatchMode::sparse, &routing, 0};

        double loss_sum = 0, ce_sum = 0, aux_sum = 0, lr = 0;
        std::int64_t correct = 0;
        for (std::int64_t step = 0; step < sched.steps_per_epoch; ++step) {
            const auto idx = slice(order, step, cfg.batch);
            const auto batch = make_batch(train, idx, aug, true, &aug_rng, dtype);
            Tape tape;
            Tensor ce, aux, loss, logits;
            {
                auto rec = tape.record();
                auto out = classify_forward(model, batch.images, ctx);
                ce = cross_entropy(out.logits, batch.labels);
                aux = out.aux;
                loss = add(ce, scale(aux, cfg.beta));
                logits = out.logits;
            }
            const auto grads = tape.backward(loss);
            lr = lr_at(global_step, sched);
            opt.step(grads, lr, multipliers);
            ++global_step;

            const auto lv = logits.to(DType::f64).to_vector();
            const auto classes = static_cast<std::size_t>(logits.dim(1));
            for (std::size_t s = 0; s < idx.size(); ++s)
                correct += argmax_row(std::span<const double>(lv.data() + s * classes, classes)) == batch.labels[s];
            const double b = static_cast<double>(idx.size());
            loss_sum += b * loss.item();
            ce_sum += b * ce.item();
            aux_sum += b * aux.item();
            if (hooks.on_step)
                hooks.on_step(global_step, loss.item());
        }
        const double nn = static_cast<double>(n);
        std::vector<double> row = {static_cast<double>(epoch), loss_sum / nn, ce_sum / nn, aux_sum / nn,
                                   static_cast<double>(correct) / nn, lr, routing.mean_cv()};
        log.row(row);
        result.rows.push_back(row);
        result.last_epoch = epoch;
        result.routing_cv = routing.mean_cv();
        const bool stop = cfg.stop_after_epoch > 0 && epoch >= cfg.stop_after_epoch;
        auto path = write_checkpoints(cfg, "classifier", epoch, stop || epoch == last, params, opt);
        if (!path.empty())
            result.checkpoint = path;
        if (stop)
            break;
    }
    result.steps = global_step;
    return result;
}

EvalResult evaluate_classifier(const MLiTClassifier& model, const Dataset& data, const AugmentConfig& aug,
                               std::int64_t batch, DType dtype) {
    autodiff::NoGrad guard;
    EvalResult r;
    const ForwardContext ctx{};
    double loss_sum = 0;
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < data.size(); start += batch) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < std::min(start + batch, data.size()); ++i)
            idx.push_back(i);
        const auto b = make_batch(data, idx, aug, false, nullptr, dtype);
        const auto out = classify_forward(model, b.images, ctx);
        loss_sum += static_cast<double>(idx.size()) * cross_entropy(out.logits, b.labels).item();
        const auto lv = out.logits.to(DType::f64).to_vector();
        const auto classes = static_cast<std::size_t>(out.logits.dim(1));
        for (std::size_t s = 0; s < idx.size(); ++s)
            correct += argmax_row(std::span<const double>(lv.data() + s * classes, classes)) == b.labels[s];
    }
    r.count = data.size();
    r.loss = r.count ? loss_sum / static_cast<double>(r.count) : 0.0;
    r.accuracy = r.count ? static_cast<double>(correct) / static_cast<double>(r.count) : 0.0;
    return r;
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
    RunConfig cfg;
    auto values = ckpt.config;
    values.erase("model");
    apply_map(cfg, values);
    return cfg;
}

EvalResult run_eval(const RunConfig& cfg, const Dataset& data, const RunHooks& hooks) {
    if (cfg.init_checkpoint.empty())
        throw ConfigError("eval needs init_checkpoint");
    const auto ckpt = load_checkpoint(cfg.init_checkpoint);
    const auto it = ckpt.config.find("model");
    if (it == ckpt.config.end())
        throw CheckpointError(cfg.init_checkpoint + ": checkpoint does not record its model kind");
    const RunConfig trained = config_from_checkpoint(ckpt);
    const DType dtype = run_dtype(trained);
    RngStream init(0);

    EvalResult r;
    if (it->second == "classifier") {
        MLiTClassifier model = build_mlit(model_config(trained), dtype, init);
        ParamList params;
        collect_params(params, model);
        restore_params(ckpt, params);
        r = evaluate_classifier(model, data, augment_config(trained), std::max<std::int64_t>(cfg.batch, 1), dtype);
    } else if (it->second == "mae") {
        MaeModel model = build_mae(model_config(trained), decoder_config(trained), dtype, init);
        ParamList params;
        collect_params(params, model);
        restore_params(ckpt, params);
        autodiff::NoGrad guard;
        RngStream mask_rng = Rng(cfg.seed).stream(streams::masking);
        const ForwardContext ctx{};
        const auto aug = augment_config(trained);
        double sum = 0;
        const auto batch = std::max<std::int64_t>(cfg.batch, 1);
        for (std::int64_t start = 0; start < data.size(); start += batch) {
            std::vector<std::int64_t> idx;
            for (std::int64_t i = start; i < std::min(start + batch, data.size()); ++i)
                idx.push_back(i);
            const auto b = make_batch(data, idx, aug, false, nullptr, dtype);
            const auto plan = random_mask(model.encoder.config.num_patches(), trained.mask_ratio, mask_rng, idx.size());
            const auto out = mae_forward(model, b.images, plan, ctx, MaeWeights{trained.alpha, trained.beta});
            sum += static_cast<double>(idx.size()) * out.loss.total.item();
        }
        r.count = data.size();
        r.loss = r.count ? sum / static_cast<double>(r.count) : 0.0;
        r.accuracy = std::nan("");
    } else {
        throw CheckpointError(cfg.init_checkpoint + ": unknown model kind '" + it->second + "'");
    }

    const std::vector<std::string> header = {"split", "count", "loss", "accuracy"};
    const std::string line = cfg.eval_split + "," + std::to_string(r.count) + "," +
                             csv_line(std::vector<double>{r.loss, r.accuracy});
    for (const auto& l : {csv_line(header), line}) {
        if (hooks.on_line)
            hooks.on_line(l);
        if (!cfg.quiet)
            std::cout << l << '\n';
    }
    return r;
}

} // namespace mlit
