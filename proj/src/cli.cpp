#include "hcct/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "hcct/checkpoint.hpp"
#include "hcct/data.hpp"
#include "hcct/explain.hpp"
#include "hcct/metrics.hpp"
#include "hcct/train.hpp"

namespace fs = std::filesystem;

namespace hcct {

namespace {

// Validation failures that map to exit code 1.
struct CliUsage : std::runtime_error {
    explicit CliUsage(const std::string& msg) : std::runtime_error(msg) {}
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::size_t> parse_csv_sizes(const std::string& text, const char* what) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            long long v = std::stoll(item);
            if (v < 0) throw std::out_of_range("negative");
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw CliUsage(std::string(what) + ": cannot parse '" + item + "' in '" + text + "'");
        }
    }
    if (out.empty()) throw CliUsage(std::string(what) + ": empty list");
    return out;
}

std::vector<double> parse_csv_doubles(const std::string& text, const char* what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw CliUsage(std::string(what) + ": cannot parse '" + item + "' in '" + text + "'");
        }
    }
    return out;
}

// The fully resolved configuration, echoed to stdout and written next to the
// outputs in the same key=value grammar the --config option reads.
class ConfigEcho {
public:
    explicit ConfigEcho(std::string command) : command_(std::move(command)) {}

    void add(const std::string& key, const std::string& value) { kv_.emplace_back(key, value); }
    void add(const std::string& key, const char* value) { kv_.emplace_back(key, value); }
    void add(const std::string& key, std::uint64_t value) { kv_.emplace_back(key, std::to_string(value)); }
    void add(const std::string& key, double value) { kv_.emplace_back(key, fmt_double(value)); }
    void add(const std::string& key, bool value) { kv_.emplace_back(key, value ? "true" : "false"); }

    void emit(const fs::path& out_dir) const {
        std::ostringstream text;
        text << "# resolved " << command_ << " configuration\n";
        for (const auto& [k, v] : kv_) text << k << '=' << v << '\n';
        std::cout << text.str();
        std::ofstream os(out_dir / "config.txt");
        if (!os) throw IoError("cannot write " + (out_dir / "config.txt").string());
        os << text.str();
    }

private:
    std::string command_;
    std::vector<std::pair<std::string, std::string>> kv_;
};

// Expands `--config FILE` (key=value lines, # comments) into ordinary flags.
// Flags given on the command line take precedence over file entries.
std::vector<std::string> merge_config_args(const std::vector<std::string>& args) {
    if (args.empty()) return args;
    std::string config_path;
    std::vector<std::string> out{args[0]};
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        } else {
            out.push_back(args[i]);
        }
    }
    if (config_path.empty()) return out;
    std::ifstream is(config_path);
    if (!is) throw CliUsage("cannot open config file " + config_path);
    auto has_flag = [&out](const std::string& flag) {
        for (const std::string& a : out) {
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        }
        return false;
    };
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw CliUsage("config file: expected key=value, got '" + line + "'");
        }
        std::string flag = "--" + line.substr(0, eq);
        if (!has_flag(flag)) {
            out.push_back(flag);
            out.push_back(line.substr(eq + 1));
        }
    }
    return out;
}

fs::path require_out_dir(const std::string& out) {
    if (out.empty()) throw CliUsage("--out is required");
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw CliUsage("cannot create output directory " + dir.string());
    return dir;
}

fs::path require_existing(const std::string& path, const char* what) {
    if (path.empty()) throw CliUsage(std::string("--") + what + " is required");
    fs::path p(path);
    if (!fs::exists(p)) throw CliUsage(std::string(what) + " file does not exist: " + p.string());
    return p;
}

struct ModelFlags {
    std::size_t extent = 24;
    std::string channels = "16,32,64";
    std::size_t kernel = 3;
    std::size_t pool_window = 2;
    std::size_t embed_dim = 32;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_ratio = 2;
    double dropout = 0.2;
    std::size_t classes = 3;
    bool pos_embed = true;

    void apply_paper_preset(const CLI::App* sub) {
        auto unset = [sub](const char* name) { return sub->count(name) == 0; };
        if (unset("--extent")) extent = 192;
        if (unset("--channels")) channels = "32,64,128,256,512";
        if (unset("--embed-dim")) embed_dim = 240;
        if (unset("--layers")) layers = 3;
        if (unset("--heads")) heads = 8;
    }

    ModelConfig to_config() const {
        ModelConfig cfg;
        cfg.input_extent = extent;
        cfg.conv_channels = parse_csv_sizes(channels, "--channels");
        cfg.conv_kernel = kernel;
        cfg.pool_window = pool_window;
        cfg.embed_dim = embed_dim;
        cfg.num_layers = layers;
        cfg.num_heads = heads;
        cfg.ffn_ratio = ffn_ratio;
        cfg.dropout_p = dropout;
        cfg.num_classes = classes;
        cfg.positional_embedding = pos_embed;
        try {
            cfg.validate();
        } catch (const ValueError& e) {
            throw CliUsage(e.what());
        }
        return cfg;
    }

    void register_options(CLI::App* sub) {
        sub->add_option("--extent", extent, "cubic volume extent")->capture_default_str();
        sub->add_option("--channels", channels, "conv channels per block, comma separated")
            ->capture_default_str();
        sub->add_option("--kernel", kernel, "conv kernel size (odd)")->capture_default_str();
        sub->add_option("--pool-window", pool_window, "max-pool window")->capture_default_str();
        sub->add_option("--embed-dim", embed_dim, "token embedding width")->capture_default_str();
        sub->add_option("--layers", layers, "transformer encoder layers")->capture_default_str();
        sub->add_option("--heads", heads, "attention heads")->capture_default_str();
        sub->add_option("--ffn-ratio", ffn_ratio, "feed-forward expansion ratio")->capture_default_str();
        sub->add_option("--dropout", dropout, "dropout rate")->capture_default_str();
        sub->add_option("--classes", classes, "number of classes")->capture_default_str();
        sub->add_option("--pos-embed", pos_embed, "learnable positional embedding")->capture_default_str();
    }

    void echo(ConfigEcho& echo) const {
        echo.add("extent", extent);
        echo.add("channels", channels);
        echo.add("kernel", kernel);
        echo.add("pool-window", pool_window);
        echo.add("embed-dim", embed_dim);
        echo.add("layers", layers);
        echo.add("heads", heads);
        echo.add("ffn-ratio", ffn_ratio);
        echo.add("dropout", dropout);
        echo.add("classes", classes);
        echo.add("pos-embed", pos_embed);
    }

    void load_from(const ModelConfig& cfg) {
        extent = cfg.input_extent;
        std::string joined;
        for (std::size_t c : cfg.conv_channels) {
            if (!joined.empty()) joined += ',';
            joined += std::to_string(c);
        }
        channels = joined;
        kernel = cfg.conv_kernel;
        pool_window = cfg.pool_window;
        embed_dim = cfg.embed_dim;
        layers = cfg.num_layers;
        heads = cfg.num_heads;
        ffn_ratio = cfg.ffn_ratio;
        dropout = cfg.dropout_p;
        classes = cfg.num_classes;
        pos_embed = cfg.positional_embedding;
    }
};

struct TrainFlags {
    std::size_t epochs = 30;
    std::size_t batch = 4;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::size_t decay_step = 20;
    double decay_gamma = 0.1;
    std::uint64_t seed = 42;

    void apply_paper_preset(const CLI::App* sub) {
        auto unset = [sub](const char* name) { return sub->count(name) == 0; };
        if (unset("--epochs")) epochs = 100;
        if (unset("--batch")) batch = 3;
        if (unset("--lr")) lr = 4e-5;
        if (unset("--decay-step")) decay_step = 50;
    }

    TrainConfig to_config() const {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.lr = lr;
        cfg.weight_decay = weight_decay;
        cfg.decay_step = decay_step;
        cfg.decay_gamma = decay_gamma;
        cfg.seed = seed;
        try {
            cfg.validate();
        } catch (const ValueError& e) {
            throw CliUsage(e.what());
        }
        return cfg;
    }

    void register_options(CLI::App* sub) {
        sub->add_option("--epochs", epochs, "training epochs")->capture_default_str();
        sub->add_option("--batch", batch, "volumes per batch")->capture_default_str();
        sub->add_option("--lr", lr, "base learning rate")->capture_default_str();
        sub->add_option("--weight-decay", weight_decay, "decoupled weight decay")->capture_default_str();
        sub->add_option("--decay-step", decay_step, "epochs between lr decays")->capture_default_str();
        sub->add_option("--decay-gamma", decay_gamma, "lr decay multiplier")->capture_default_str();
        sub->add_option("--seed", seed, "run seed")->capture_default_str();
    }

    void echo(ConfigEcho& echo) const {
        echo.add("epochs", epochs);
        echo.add("batch", batch);
        echo.add("lr", lr);
        echo.add("weight-decay", weight_decay);
        echo.add("decay-step", decay_step);
        echo.add("decay-gamma", decay_gamma);
        echo.add("seed", seed);
    }
};

std::vector<Volume> load_split_checked(const Manifest& manifest, SplitKind kind,
                                       std::size_t expected_extent, const char* what) {
    std::vector<Volume> volumes;
    try {
        volumes = load_split(manifest, kind);
    } catch (const IoError& e) {
        throw CliUsage(e.what());
    }
    for (const Volume& v : volumes) {
        if (v.extent != expected_extent) {
            throw CliUsage(std::string(what) + " volume '" + v.source_id + "' has extent " +
                           std::to_string(v.extent) + " but the model is configured for " +
                           std::to_string(expected_extent));
        }
    }
    return volumes;
}

int run_synth(const std::string& out, std::size_t classes, std::size_t per_class,
              std::size_t extent, std::uint64_t seed, const std::string& fractions_text) {
    if (per_class == 0) throw CliUsage("--per-class must be >= 1");
    if (classes < 2) throw CliUsage("--classes must be >= 2");
    std::vector<double> f = parse_csv_doubles(fractions_text, "--fractions");
    if (f.size() != 3) throw CliUsage("--fractions needs exactly three values (train,val,test)");

    fs::path dir = require_out_dir(out);
    ConfigEcho echo("synth");
    echo.add("out", out);
    echo.add("classes", classes);
    echo.add("per-class", per_class);
    echo.add("extent", extent);
    echo.add("seed", seed);
    echo.add("fractions", fractions_text);
    echo.emit(dir);

    fs::create_directories(dir / "vols");
    std::vector<Volume> volumes = synth_dataset(per_class, extent, classes, seed);
    std::vector<std::pair<std::string, int>> items;
    for (const Volume& v : volumes) {
        std::string rel = "vols/" + v.source_id + ".hvol";
        save_volume(v, dir / rel);
        items.emplace_back(rel, v.label);
    }
    SplitFractions fr{f[0], f[1], f[2]};
    Manifest manifest;
    try {
        manifest = stratified_split(items, fr, seed);
    } catch (const Error& e) {
        throw CliUsage(e.what());
    }
    manifest.base_dir = dir;
    save_manifest(manifest, dir / "manifest.csv");
    std::cout << "wrote " << volumes.size() << " volumes and " << (dir / "manifest.csv").string()
              << "\n";
    return 0;
}

int run_train(const CLI::App* sub, const ModelFlags& model_flags_in, const TrainFlags& train_flags,
              const std::string& manifest_path, const std::string& out,
              const std::string& resume_path) {
    fs::path dir = require_out_dir(out);
    Manifest manifest = load_manifest(require_existing(manifest_path, "manifest"));

    ModelFlags model_flags = model_flags_in;
    HcctModel<float> model;
    TrainState<float> state;
    if (!resume_path.empty()) {
        auto loaded = load_train_state<float>(require_existing(resume_path, "resume"));
        model = std::move(loaded.first);
        state = std::move(loaded.second);
        model_flags.load_from(model.config); // echo what the state restored
    } else {
        model = HcctModel<float>::init(model_flags.to_config(), train_flags.seed);
    }
    TrainConfig cfg = train_flags.to_config();

    ConfigEcho echo("train");
    echo.add("manifest", manifest_path);
    echo.add("out", out);
    if (!resume_path.empty()) echo.add("resume", resume_path);
    model_flags.echo(echo);
    train_flags.echo(echo);
    echo.emit(dir);

    std::vector<Volume> train_split =
        load_split_checked(manifest, SplitKind::Train, model.config.input_extent, "train");
    std::vector<Volume> val_split =
        load_split_checked(manifest, SplitKind::Val, model.config.input_extent, "val");
    if (train_split.empty()) throw CliUsage("manifest has an empty train split");

    TrainReport report = train_model(model, train_split, val_split, cfg, state);

    HcctModel<float> best = best_model(model, state);
    save_checkpoint(best, dir / "checkpoint.hcct");
    save_train_state(dir / "state.hcts", model, state);
    write_train_report(report, dir / "train_report.csv", dir / "timing.csv");

    if (state.has_best) {
        std::cout << "best val accuracy " << state.best_val_acc << " at epoch " << state.best_epoch
                  << "\n";
    }
    std::cout << "trained " << report.epochs.size() << " epochs; checkpoint at "
              << (dir / "checkpoint.hcct").string() << "\n";
    (void)sub;
    return 0;
}

int run_finetune(const TrainFlags& train_flags, double lr_factor, const std::string& manifest_path,
                 const std::string& checkpoint_path, const std::string& out) {
    fs::path dir = require_out_dir(out);
    Manifest manifest = load_manifest(require_existing(manifest_path, "manifest"));
    HcctModel<float> model = load_checkpoint<float>(require_existing(checkpoint_path, "checkpoint"));

    TrainConfig cfg = train_flags.to_config();
    cfg.finetune_lr_factor = lr_factor;

    ConfigEcho echo("finetune");
    echo.add("manifest", manifest_path);
    echo.add("checkpoint", checkpoint_path);
    echo.add("out", out);
    echo.add("lr-factor", lr_factor);
    train_flags.echo(echo);
    echo.emit(dir);

    std::vector<Volume> train_split =
        load_split_checked(manifest, SplitKind::Train, model.config.input_extent, "train");
    std::vector<Volume> val_split =
        load_split_checked(manifest, SplitKind::Val, model.config.input_extent, "val");
    if (train_split.empty()) throw CliUsage("manifest has an empty train split");

    TrainState<float> state;
    TrainReport report = finetune_model(model, train_split, val_split, cfg, state);

    HcctModel<float> best = best_model(model, state);
    save_checkpoint(best, dir / "checkpoint.hcct");
    save_train_state(dir / "state.hcts", model, state);
    write_train_report(report, dir / "train_report.csv", dir / "timing.csv");
    std::cout << "fine-tuned " << report.epochs.size() << " epochs; checkpoint at "
              << (dir / "checkpoint.hcct").string() << "\n";
    return 0;
}

int run_eval(const std::string& manifest_path, const std::string& checkpoint_path,
             const std::string& out, const std::string& split_text, std::size_t batch) {
    fs::path dir = require_out_dir(out);
    Manifest manifest = load_manifest(require_existing(manifest_path, "manifest"));
    HcctModel<float> model = load_checkpoint<float>(require_existing(checkpoint_path, "checkpoint"));

    ConfigEcho echo("eval");
    echo.add("manifest", manifest_path);
    echo.add("checkpoint", checkpoint_path);
    echo.add("out", out);
    echo.add("split", split_text);
    echo.add("batch", batch);
    echo.emit(dir);

    SplitKind kind = parse_split(split_text);
    std::vector<Volume> volumes =
        load_split_checked(manifest, kind, model.config.input_extent, split_text.c_str());
    if (volumes.empty()) throw CliUsage("manifest has an empty " + split_text + " split");

    ConfusionMatrix cm = evaluate(model, volumes, batch);
    MetricsSummary summary = summarize(cm);
    write_confusion_csv(cm, dir / "confusion.csv");
    write_metrics_csv(summary, dir / "metrics.csv");
    std::cout << format_metrics_table(cm, summary);
    return 0;
}

int run_explain(const std::string& checkpoint_path, const std::string& volume_path,
                const std::string& out, const std::string& mode_text) {
    fs::path dir = require_out_dir(out);
    HcctModel<float> model = load_checkpoint<float>(require_existing(checkpoint_path, "checkpoint"));
    Volume volume = load_volume(require_existing(volume_path, "volume"));
    if (volume.extent != model.config.input_extent) {
        throw CliUsage("volume extent " + std::to_string(volume.extent) +
                       " does not match checkpoint input_extent " +
                       std::to_string(model.config.input_extent));
    }

    ConfigEcho echo("explain");
    echo.add("checkpoint", checkpoint_path);
    echo.add("volume", volume_path);
    echo.add("out", out);
    echo.add("attention-mode", mode_text);
    echo.emit(dir);

    ImportanceMode mode =
        mode_text == "cls" ? ImportanceMode::ClsQuery : ImportanceMode::MeanQueries;
    Heatmap heat = render_heatmap(model, volume, mode);
    export_slices(heat, volume, dir);
    std::cout << "wrote 6 slice images and " << heat.source_id << "_heatmap.hvol under "
              << dir.string() << "\n";
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"3D hybrid compact convolutional transformer workbench"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a labeled synthetic dataset");
    std::string synth_out;
    std::size_t synth_classes = 3, synth_per_class = 8, synth_extent = 24;
    std::uint64_t synth_seed = 42;
    std::string synth_fractions = "0.7,0.15,0.15";
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--classes", synth_classes, "number of classes")->capture_default_str();
    synth->add_option("--per-class", synth_per_class, "volumes per class")->capture_default_str();
    synth->add_option("--extent", synth_extent, "cubic extent")->capture_default_str();
    synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
    synth->add_option("--fractions", synth_fractions, "train,val,test fractions")->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "train a model from a manifest");
    std::string train_manifest, train_out, train_resume, train_preset = "desk";
    ModelFlags train_model_flags;
    TrainFlags train_train_flags;
    train->add_option("--manifest", train_manifest, "dataset manifest CSV")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--resume", train_resume, "training state to resume from");
    train->add_option("--preset", train_preset, "configuration preset")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    train_model_flags.register_options(train);
    train_train_flags.register_options(train);

    // finetune
    auto* finetune = app.add_subcommand("finetune", "fine-tune embedding and classifier layers");
    std::string ft_manifest, ft_out, ft_checkpoint, ft_preset = "desk";
    double ft_lr_factor = 0.1;
    TrainFlags ft_train_flags;
    ft_train_flags.epochs = 50;
    finetune->add_option("--manifest", ft_manifest, "dataset manifest CSV")->required();
    finetune->add_option("--checkpoint", ft_checkpoint, "base checkpoint to start from")->required();
    finetune->add_option("--out", ft_out, "output directory")->required();
    finetune->add_option("--lr-factor", ft_lr_factor, "learning-rate reduction factor")
        ->capture_default_str();
    finetune->add_option("--preset", ft_preset, "configuration preset")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    ft_train_flags.register_options(finetune);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string eval_manifest, eval_out, eval_checkpoint, eval_split = "test";
    std::size_t eval_batch = 4;
    eval->add_option("--manifest", eval_manifest, "dataset manifest CSV")->required();
    eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint")->required();
    eval->add_option("--out", eval_out, "output directory")->required();
    eval->add_option("--split", eval_split, "split to evaluate")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    eval->add_option("--batch", eval_batch, "evaluation batch size")->capture_default_str();

    // explain
    auto* explain = app.add_subcommand("explain", "render an attention heatmap for one volume");
    std::string ex_checkpoint, ex_volume, ex_out, ex_mode = "mean";
    explain->add_option("--checkpoint", ex_checkpoint, "model checkpoint")->required();
    explain->add_option("--volume", ex_volume, "HVOL scan to explain")->required();
    explain->add_option("--out", ex_out, "output directory")->required();
    explain->add_option("--attention-mode", ex_mode, "importance source: mean over queries or cls query")
        ->check(CLI::IsMember({"mean", "cls"}))
        ->capture_default_str();

    for (CLI::App* sub : {synth, train, finetune, eval, explain}) {
        sub->add_option("--config", "key=value file of defaults (flags override)")
            ->configurable(false);
    }

    std::vector<std::string> merged;
    try {
        merged = merge_config_args(args);
    } catch (const CliUsage& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::vector<const char*> argv;
    argv.push_back("hcct");
    for (const std::string& a : merged) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*synth) {
            return run_synth(synth_out, synth_classes, synth_per_class, synth_extent, synth_seed,
                             synth_fractions);
        }
        if (*train) {
            if (train_preset == "paper") {
                train_model_flags.apply_paper_preset(train);
                train_train_flags.apply_paper_preset(train);
            }
            return run_train(train, train_model_flags, train_train_flags, train_manifest, train_out,
                             train_resume);
        }
        if (*finetune) {
            if (ft_preset == "paper") ft_train_flags.apply_paper_preset(finetune);
            return run_finetune(ft_train_flags, ft_lr_factor, ft_manifest, ft_checkpoint, ft_out);
        }
        if (*eval) return run_eval(eval_manifest, eval_checkpoint, eval_out, eval_split, eval_batch);
        if (*explain) return run_explain(ex_checkpoint, ex_volume, ex_out, ex_mode);
    } catch (const CliUsage& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace hcct
