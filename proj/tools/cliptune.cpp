#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"

#include "cliptune/experiment.hpp"
#include "cliptune/fitness.hpp"
#include "cliptune/service.hpp"
#include "cliptune/textfmt.hpp"

using namespace cliptune;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void add_task_flags(CLI::App* cmd, RunConfig& cfg, std::string& config_path) {
    cmd->add_option("--config", config_path, "JSON run config to start from; flags override");
    cmd->add_option("--task", cfg.task, "planted | synthetic | file");
    cmd->add_option("--model", cfg.model_path, "weights file (file task)");
    cmd->add_option("--data", cfg.data_path, "TSV rows (file task)");
    cmd->add_option("--vocab", cfg.vocab_path, "vocabulary, one token per line (file task)");
    cmd->add_option("--classes", cfg.num_classes, "number of classes");
    cmd->add_option("--emb-dim", cfg.emb_dim, "embedding width");
    cmd->add_option("--layers", cfg.layers, "encoder layers");
    cmd->add_option("--heads", cfg.heads, "attention heads (synthetic task)");
    cmd->add_option("--ffn-dim", cfg.ffn_dim, "feed-forward width (synthetic task)");
    cmd->add_option("--vocab-size", cfg.vocab_size, "vocabulary size");
    cmd->add_option("--max-seq", cfg.max_seq, "maximum sequence length");
    cmd->add_option("--seq-len", cfg.seq_len, "content tokens per generated sample");
    cmd->add_option("--samples-per-class", cfg.samples_per_class, "generated pool size per class");
    cmd->add_option("--separability", cfg.separability, "synthetic task class separation [0,1]");
    cmd->add_option("--shots", cfg.shots, "examples per class, train and dev each");
    cmd->add_option("--seed", cfg.seed, "experiment seed");
}

void add_search_flags(CLI::App* cmd, RunConfig& cfg) {
    cmd->add_option("--agent", cfg.agent, "cma | random");
    cmd->add_option("--fitness", cfg.fitness, "hinge | ce");
    cmd->add_option("--mode", cfg.mode, "static | dynamic | off");
    cmd->add_option("--prompt-init", cfg.prompt_init, "random_tokens | zeros | file");
    cmd->add_option("--prompt-path", cfg.prompt_path, "prompt file for --prompt-init file");
    cmd->add_option("--intrinsic-dim", cfg.intrinsic_dim, "search dimensionality d");
    cmd->add_option("--prompt-len", cfg.prompt_len, "virtual tokens in the soft prompt");
    cmd->add_option("--clip-ratio", cfg.clip_ratio, "clipping probability at dropout sites");
    cmd->add_option("--subnetworks", cfg.subnetworks, "ensemble size N");
    cmd->add_option("--margin", cfg.margin, "hinge margin");
    cmd->add_option("--population", cfg.population, "candidates per generation");
    cmd->add_option("--steps", cfg.steps, "generations");
    cmd->add_option("--sigma0", cfg.sigma0, "initial step size");
    cmd->add_option("--threads", cfg.threads, "parallel candidate evaluations");
    cmd->add_option("--stop-train-accuracy", cfg.stop_train_accuracy,
                    "early-stop bar on train accuracy (values above 1 disable)");
    cmd->add_option("--stop-dev-accuracy", cfg.stop_dev_accuracy,
                    "early-stop bar on dev accuracy (values above 1 disable)");
    cmd->add_option("--run-id", cfg.run_id, "run directory name (default: derived)");
}

std::pair<std::string, int> parse_endpoint(const std::string& endpoint) {
    const std::size_t colon = endpoint.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == endpoint.size()) {
        throw std::invalid_argument("endpoint must be host:port, got '" + endpoint + "'");
    }
    const int port = std::stoi(endpoint.substr(colon + 1));
    if (port <= 0 || port > 65535) throw std::invalid_argument("endpoint port out of range");
    return {endpoint.substr(0, colon), port};
}

int cmd_tune(const RunConfig& cfg, const std::string& out) {
    const RunArtifacts art = run_tune(cfg, out);
    const TuneResult& r = art.result;
    std::cout << "run_dir: " << art.run_dir << "\n"
              << "steps_run: " << r.history.size() << "\n"
              << "budget_used: " << r.budget_used << "\n"
              << "best_fitness: " << format_double(r.best_train_fitness) << "\n"
              << "best_train_accuracy: " << format_double(r.best_train_accuracy) << "\n"
              << "best_dev_accuracy: " << format_double(r.best_dev_accuracy) << "\n";
    if (r.aborted) {
        std::cerr << "error: tuning aborted: " << r.error << std::endl;
        return 1;
    }
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& sweep, std::size_t seeds,
               const std::string& out) {
    const AblateKind kind = ablate_kind_from_name(sweep);
    const AblateTable table = ablate(kind, cfg, seeds);
    const std::string path = write_ablation(table, cfg, out);
    std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_serve(const std::string& model_path, const std::string& host, int port,
              std::size_t threads) {
    const FrozenModel model = load_weights(model_path);
    ModelService service(model, threads);
    std::cout << "serving " << model.fingerprint() << " on " << host << ":" << port
              << std::endl;
    if (!service.serve(host, port)) {
        std::cerr << "error: cannot bind " << host << ":" << port << std::endl;
        return 1;
    }
    return 0;
}

int cmd_eval(RunConfig cfg, const std::string& split_arg, const std::string& endpoint,
             const std::string& prompt_file) {
    if (!prompt_file.empty()) {
        cfg.prompt_init = "file";
        cfg.prompt_path = prompt_file;
    }
    if (split_arg != "train" && split_arg != "dev") {
        throw std::invalid_argument("--split must be train or dev");
    }
    PreparedRun run = prepare_run(cfg);
    const Split split = split_arg == "dev" ? Split::dev : Split::train;
    const ClipMode mode = clip_mode_from_name(cfg.mode);
    double p = cfg.clip_ratio;
    std::vector<std::string> tags;
    if (mode == ClipMode::off) {
        tags = {"net-0"};
        p = 0.0;
    } else {
        for (std::size_t j = 0; j < cfg.subnetworks; ++j) {
            tags.push_back((mode == ClipMode::dynamic ? "eval-" : "net-") + std::to_string(j));
        }
    }
    FitnessReport rep;
    if (endpoint.empty()) {
        const FewShotDataset& data = split == Split::dev ? run.dev : run.train;
        rep = evaluate_prompt(run.model, data, run.p0, tags, p, run.tune_config.fitness, "eval");
    } else {
        const auto [host, port] = parse_endpoint(endpoint);
        RemoteEvaluator::Options options;
        options.expected_emb_dim = run.p0.emb_dim();
        options.expected_num_classes = run.train.num_classes;
        RemoteEvaluator evaluator(host, port, run.train, run.dev, options);
        rep = evaluator.score(split, run.p0, tags, p, run.tune_config.fitness, "eval");
    }
    std::cout << FitnessReport::csv_header() << "\n" << rep.csv_row() << "\n";
    return 0;
}

int cmd_report(const std::string& dir) {
    const ReportOutputs outputs = report(dir);
    std::cout << "summary: " << outputs.summary_path << "\n";
    for (const auto& p : outputs.plot_paths) std::cout << "plot: " << p << "\n";
    return 0;
}

int cmd_export(const RunConfig& cfg, const std::string& out) {
    export_task(cfg, out);
    std::cout << "exported task to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig cfg;
    // Load --config before CLI11 binds flags, so explicit flags override the
    // file and untouched fields keep the file's values.
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        try {
            if (arg == "--config" && i + 1 < argc) {
                cfg = RunConfig::from_json(read_file(argv[i + 1]));
            } else if (arg.rfind("--config=", 0) == 0) {
                cfg = RunConfig::from_json(read_file(arg.substr(9)));
            }
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << std::endl;
            return 1;
        }
    }

    CLI::App app{"derivative-free soft-prompt tuning over a frozen model"};
    app.require_subcommand(1);
    std::string config_path;

    auto* tune = app.add_subcommand("tune", "optimize a prompt and write run artifacts");
    std::string tune_out = "out";
    add_task_flags(tune, cfg, config_path);
    add_search_flags(tune, cfg);
    tune->add_option("--out", tune_out, "output root (artifacts under <out>/runs/<id>)");

    auto* ablate_cmd = app.add_subcommand("ablate", "sweep one dimension, write a CSV grid");
    std::string sweep;
    std::size_t ablate_seeds = 3;
    std::string ablate_out = "out";
    add_task_flags(ablate_cmd, cfg, config_path);
    add_search_flags(ablate_cmd, cfg);
    ablate_cmd->add_option("--sweep", sweep,
                           "clip_ratio | num_subnetworks | static_dynamic | data_size")
        ->required();
    ablate_cmd->add_option("--seeds", ablate_seeds, "runs per grid point");
    ablate_cmd->add_option("--out", ablate_out, "output directory");

    auto* serve = app.add_subcommand("serve", "serve a model over HTTP");
    std::string serve_model;
    std::string serve_host = "127.0.0.1";
    int serve_port = 8080;
    std::size_t serve_threads = 0;
    serve->add_option("--model", serve_model, "weights file")->required();
    serve->add_option("--host", serve_host, "bind address");
    serve->add_option("--port", serve_port, "bind port");
    serve->add_option("--threads", serve_threads, "worker threads (0 = library default)");

    auto* eval = app.add_subcommand("eval", "score one prompt and print its report");
    std::string eval_split = "dev";
    std::string eval_endpoint;
    std::string eval_prompt;
    add_task_flags(eval, cfg, config_path);
    add_search_flags(eval, cfg);
    eval->add_option("--split", eval_split, "train | dev");
    eval->add_option("--endpoint", eval_endpoint, "score remotely via host:port");
    eval->add_option("--prompt", eval_prompt, "prompt file (shorthand for --prompt-init file)");

    auto* report_cmd = app.add_subcommand("report", "summarize a run directory into text + SVG");
    std::string report_dir;
    report_cmd->add_option("dir", report_dir, "run directory")->required();

    auto* export_cmd = app.add_subcommand("export-task", "materialize a generated task as files");
    std::string export_out;
    add_task_flags(export_cmd, cfg, config_path);
    add_search_flags(export_cmd, cfg);
    export_cmd->add_option("--out", export_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (tune->parsed()) return cmd_tune(cfg, tune_out);
        if (ablate_cmd->parsed()) return cmd_ablate(cfg, sweep, ablate_seeds, ablate_out);
        if (serve->parsed()) return cmd_serve(serve_model, serve_host, serve_port, serve_threads);
        if (eval->parsed()) return cmd_eval(cfg, eval_split, eval_endpoint, eval_prompt);
        if (report_cmd->parsed()) return cmd_report(report_dir);
        if (export_cmd->parsed()) return cmd_export(cfg, export_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
