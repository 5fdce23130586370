#include "uvit/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "uvit/errors.hpp"

namespace uvit {

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

// Errors raised while checking user input, reported with exit code 2.
struct UsageError : Error {
    using Error::Error;
};

std::string keys_footer() {
    std::string s = "Config keys (key = value, one per line, # comments):\n";
    for (const auto& k : run_config_keys()) s += "  " + k.name + std::string(20 - std::min<std::size_t>(19, k.name.size()), ' ') + k.help + "\n";
    s += "\nEnvironment: UVIT_THREADS caps worker threads (0 = auto).\nExit codes: 0 success, 1 runtime failure, 2 usage or config error.";
    return s;
}

RunConfig read_config(const std::string& path, const std::vector<std::string>& overrides) {
    try {
        RunConfig cfg = load_run_config(path);
        for (const auto& o : overrides) apply_override(cfg, o);
        cfg.validate();
        return cfg;
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

NoiseSchedule schedule_for(const UViTConfig& c) { return linear_beta_schedule(c.diffusion_steps, 1e-4, 0.02); }

std::string padded(std::int64_t v, int width) {
    std::ostringstream os;
    os << std::setw(width) << std::setfill('0') << v;
    return os.str();
}

// ---- train ----

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    const RunConfig rc = read_config(a.config, a.overrides);
    const Dataset data = build_dataset(rc);
    UViTModel model(rc.model, rc.model_seed);
    const auto schedule = schedule_for(rc.model);

    std::filesystem::create_directories(rc.output_dir);
    const auto log_path = rc.output_dir / "metrics.tsv";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw PersistenceError("cannot open " + log_path.string());
    log.precision(10);

    std::vector<std::pair<std::string, std::string>> meta;
    for (auto& kv : rc.to_key_values()) {
        UViTConfig probe;
        if (!probe.apply(kv.first, kv.second)) meta.push_back(kv);
    }

    TrainCallbacks cb;
    cb.on_step = [&](const TrainEvent& e) {
        log << e.iteration << '\t' << e.loss << '\t' << e.lr << '\n';
        if (!log) throw PersistenceError("write failed for " + log_path.string());
    };
    cb.on_checkpoint = [&](std::int64_t it, const OptimizerState& st) {
        Checkpoint ckpt = make_checkpoint(model, static_cast<std::uint64_t>(it), &st);
        ckpt.metadata.insert(ckpt.metadata.begin(), meta.begin(), meta.end());
        const auto path = rc.output_dir / ("checkpoint_" + padded(it, 8) + ".uvtc");
        save_checkpoint(ckpt, path);
        out << "checkpoint " << path.string() << '\n';
    };
    const auto losses = train(model, data, schedule, rc.train, cb);
    out << "trained " << losses.size() << " iterations, final loss " << losses.back() << '\n';
    return kOk;
}

// ---- sample ----

struct SampleArgs {
    std::string checkpoint;
    std::string sampler = "dpm_solver";
    std::int64_t steps = 50;
    int order = 2;
    std::string placement = "uniform_lambda";
    std::int64_t count = 16;
    std::string grid;
    std::string out = "samples.ppm";
    std::uint64_t seed = 0;
    std::optional<double> guidance;
    std::optional<std::int64_t> label;
    std::optional<std::string> prompt;
};

std::pair<std::int64_t, std::int64_t> parse_grid(const std::string& g, std::int64_t count) {
    if (g.empty()) {
        const auto cols = std::max<std::int64_t>(1, std::llround(std::ceil(std::sqrt(static_cast<double>(count)))));
        return {std::max<std::int64_t>(1, count / cols), cols};
    }
    const auto x = g.find('x');
    if (x == std::string::npos) throw UsageError("--grid expects RxC, got '" + g + "'");
    try {
        return {parse_int("grid", g.substr(0, x)), parse_int("grid", g.substr(x + 1))};
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

std::uint64_t meta_seed(const Checkpoint& ckpt, const char* key) {
    const auto* v = ckpt.meta(key);
    return v ? static_cast<std::uint64_t>(parse_int(key, *v)) : 0;
}

struct Prepared {
    UViTModel model;
    SamplerSpec spec;
    std::vector<ConditionInput> conditions;
};

Prepared prepare_sampling(const SampleArgs& a, std::int64_t count) {
    Checkpoint ckpt;
    try {
        ckpt = load_checkpoint(a.checkpoint);
    } catch (const PersistenceError& e) {
        throw UsageError(e.what());
    }
    UViTModel model = model_from_checkpoint(ckpt);
    const auto& c = model.config();
    SamplerSpec spec;
    try {
        spec.kind = parse_sampler_kind(a.sampler);
        spec.placement = parse_step_placement(a.placement);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    spec.steps = a.steps;
    spec.order = a.order;
    spec.seed = a.seed;
    if (spec.steps < 1) throw UsageError("--steps must be positive");
    if (spec.kind == SamplerKind::ddpm_ancestral && spec.steps != c.diffusion_steps) {
        throw UsageError("ddpm_ancestral needs --steps " + std::to_string(c.diffusion_steps) + " for this checkpoint");
    }
    if (spec.kind == SamplerKind::dpm_solver && spec.order != 1 && spec.order != 2) throw UsageError("--order must be 1 or 2");
    if (count < 1) throw UsageError("--count must be positive");

    std::vector<ConditionInput> conds;
    switch (c.condition_kind) {
        case ConditionKind::none:
            if (a.label || a.prompt || a.guidance) {
                throw UsageError("checkpoint is unconditional; --label, --prompt and --guidance-strength do not apply");
            }
            break;
        case ConditionKind::class_label:
            if (a.prompt) throw UsageError("checkpoint is class-conditional; use --label instead of --prompt");
            if (a.label) {
                if (*a.label < 0 || *a.label >= c.num_classes) {
                    throw UsageError("--label must lie in [0, " + std::to_string(c.num_classes) + ")");
                }
                conds.push_back(ClassLabel{*a.label});
            } else {
                for (std::int64_t i = 0; i < count; ++i) conds.push_back(ClassLabel{i % c.num_classes});
            }
            break;
        case ConditionKind::context: {
            if (a.label) throw UsageError("checkpoint is text-conditional; use --prompt instead of --label");
            if (!a.prompt) throw UsageError("checkpoint is text-conditional; --prompt is required");
            const auto vocab = ToyVocab::standard(c.context_dim, meta_seed(ckpt, "vocab_seed"));
            Context ctx = toy_text_encode(*a.prompt, vocab, c.context_dim, c.max_context_len);
            if (ctx.valid_len == 0) throw UsageError("--prompt is empty");
            conds.push_back(std::move(ctx));
            break;
        }
    }
    if (a.guidance) spec.guidance = Guidance{conds.empty() ? ConditionInput{} : conds.front(), *a.guidance};
    return {std::move(model), spec, std::move(conds)};
}

int cmd_sample(const SampleArgs& a, std::ostream& out) {
    const auto [rows, cols] = parse_grid(a.grid, a.count);
    if (rows < 1 || cols < 1 || rows * cols > a.count) {
        throw UsageError("--grid " + std::to_string(rows) + "x" + std::to_string(cols) + " needs at most --count images");
    }
    Prepared p = prepare_sampling(a, a.count);
    const auto schedule = schedule_for(p.model.config());
    const Tensor images = sample_model(p.model, schedule, p.spec, a.count, p.conditions);
    sample_grid(images, rows, cols, a.out);
    out << "wrote " << rows << "x" << cols << " grid to " << a.out << '\n';
    return kOk;
}

// ---- evaluate ----

struct EvaluateArgs {
    SampleArgs sample;
    std::string config;
    std::vector<std::string> overrides;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
    const RunConfig rc = read_config(a.config, a.overrides);
    const Dataset data = build_dataset(rc);
    Prepared p = prepare_sampling(a.sample, a.sample.count);
    const auto schedule = schedule_for(p.model.config());
    const auto extractor = build_extractor(rc);
    const Tensor images = sample_model(p.model, schedule, p.spec, a.sample.count, p.conditions);
    const double fd = frechet_distance(feature_stats(images, extractor), feature_stats(data.images, extractor));
    out << "frechet_distance\t" << std::setprecision(10) << fd << "\t(" << extractor.name()
        << " features; desk-scale, compare only within one setup)\n";
    return kOk;
}

// ---- ablate ----

struct AblateArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string axis;
    std::vector<std::string> variants;
    std::string out;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
    const RunConfig rc = read_config(a.config, a.overrides);
    AblationProtocol protocol;
    try {
        protocol.axis = parse_ablation_axis(a.axis);
        for (const auto& v : a.variants) apply_variant(rc.model, protocol.axis, v);
        protocol.threads = resolve_threads(rc);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    protocol.variants = a.variants;
    protocol.eval_every = std::min(rc.eval_every, rc.train.total_iterations);
    protocol.eval_samples = rc.eval_samples;
    protocol.sampler = rc.sampler_spec();
    protocol.extractor = build_extractor(rc);
    protocol.model_seed = rc.model_seed;

    const Dataset data = build_dataset(rc);
    const auto report = run_ablation(protocol, rc.model, data, rc.train, schedule_for(rc.model));
    std::filesystem::create_directories(rc.output_dir);
    const std::filesystem::path csv = a.out.empty() ? rc.output_dir / ("ablation_" + a.axis + ".csv") : std::filesystem::path(a.out);
    write_ablation_csv(report, csv);

    std::ostringstream summary;
    summary << "Ablation over " << a.axis << ". Metric: Frechet distance on " << protocol.extractor.name()
            << " features against the training set. Desk-scale values; compare only rows of this report.\n";
    summary << "variant\tfinal_loss(mean of last 100)\n";
    for (const auto& v : a.variants) {
        if (auto it = report.final_loss.find(v); it != report.final_loss.end()) {
            summary << v << '\t' << std::setprecision(10) << it->second << '\n';
        }
        if (auto it = report.errors.find(v); it != report.errors.end()) summary << v << "\tFAILED: " << it->second << '\n';
    }
    std::ofstream(csv.parent_path() / ("ablation_" + a.axis + "_summary.txt")) << summary.str();
    out << summary.str() << "wrote " << csv.string() << '\n';
    return report.errors.empty() ? kOk : kFailure;
}

// ---- inspect ----

int cmd_inspect(const std::string& path, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(path);
    out << "format version: " << ckpt.version << '\n';
    out << "iteration: " << ckpt.iteration << '\n';
    out << "config:\n";
    for (const auto& [k, v] : ckpt.config.to_key_values()) out << "  " << k << " = " << v << '\n';
    for (const auto& [k, v] : ckpt.metadata) out << "  " << k << " = " << v << '\n';
    std::int64_t params = 0;
    for (const auto& t : ckpt.tensors) {
        if (t.name.rfind("optim.", 0) != 0) params += t.value.size();
    }
    out << "parameters: " << params << " (" << std::fixed << std::setprecision(1) << static_cast<double>(params) / 1e6
        << "M)\n";
    out << "tensors: " << ckpt.tensors.size() << '\n';
    for (const auto& t : ckpt.tensors) out << "  " << t.name << ' ' << shape_string(t.value.shape()) << '\n';
    return kOk;
}

void add_sample_flags(CLI::App* cmd, SampleArgs& s) {
    cmd->add_option("--checkpoint", s.checkpoint, "checkpoint file")->required();
    cmd->add_option("--sampler", s.sampler, "ddpm_ancestral, euler_maruyama, dpm_solver")->capture_default_str();
    cmd->add_option("--steps", s.steps, "sampling steps")->capture_default_str();
    cmd->add_option("--order", s.order, "dpm_solver order (1 or 2)")->capture_default_str();
    cmd->add_option("--placement", s.placement, "dpm_solver time points: uniform_lambda, uniform_time")
        ->capture_default_str();
    cmd->add_option("--count", s.count, "number of samples")->capture_default_str();
    cmd->add_option("--seed", s.seed, "sampling seed")->capture_default_str();
    cmd->add_option("--guidance-strength", s.guidance, "classifier-free guidance strength s");
    cmd->add_option("--label", s.label, "class label (class-conditional checkpoints)");
    cmd->add_option("--prompt", s.prompt, "text prompt (text-conditional checkpoints)");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"U-ViT diffusion toolkit: train, sample, evaluate, ablate, inspect"};
    app.footer(keys_footer());
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("config", train_args.config, "config file")->required();
    train_cmd->add_option("--override", train_args.overrides, "key=value, applied left to right");

    SampleArgs sample_args;
    auto* sample_cmd = app.add_subcommand("sample", "draw samples from a checkpoint into a PPM grid");
    add_sample_flags(sample_cmd, sample_args);
    sample_cmd->add_option("--grid", sample_args.grid, "RxC tiling (default: near-square)");
    sample_cmd->add_option("--out", sample_args.out, "output PPM path")->capture_default_str();

    EvaluateArgs eval_args;
    auto* eval_cmd = app.add_subcommand("evaluate", "Frechet distance of checkpoint samples to the config's dataset");
    add_sample_flags(eval_cmd, eval_args.sample);
    eval_cmd->add_option("--config", eval_args.config, "config file naming the dataset and extractor")->required();
    eval_cmd->add_option("--override", eval_args.overrides, "key=value, applied left to right");

    AblateArgs ablate_args;
    auto* ablate_cmd = app.add_subcommand("ablate", "train one model per variant and report metrics as CSV");
    ablate_cmd->add_option("config", ablate_args.config, "config file")->required();
    ablate_cmd->add_option("--axis", ablate_args.axis,
                           "skip_mode, time_mode, conv_mode, patch_embed_mode, pos_embed_mode, depth, width, patch_size")
        ->required();
    ablate_cmd->add_option("--variants", ablate_args.variants, "comma-separated variant values")
        ->required()
        ->delimiter(',');
    ablate_cmd->add_option("--override", ablate_args.overrides, "key=value, applied left to right");
    ablate_cmd->add_option("--out", ablate_args.out, "CSV path (default: <output_dir>/ablation_<axis>.csv)");

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect", "print a checkpoint's config, parameter count and tensors");
    inspect_cmd->add_option("checkpoint", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsage;
    }

    const bool inspecting = inspect_cmd->parsed();
    try {
        if (train_cmd->parsed()) return cmd_train(train_args, out);
        if (sample_cmd->parsed()) return cmd_sample(sample_args, out);
        if (eval_cmd->parsed()) return cmd_evaluate(eval_args, out);
        if (ablate_cmd->parsed()) return cmd_ablate(ablate_args, out);
        if (inspecting) return cmd_inspect(inspect_path, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kUsage;
}

}  // namespace uvit
