#include "cliptune/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>

#include "json.hpp"

#include "cliptune/cma.hpp"
#include "cliptune/planted.hpp"
#include "cliptune/sha1.hpp"
#include "cliptune/textfmt.hpp"

namespace fs = std::filesystem;

namespace cliptune {

namespace {

using nlohmann::json;

json config_to_json(const RunConfig& c) {
    return json{{"run_id", c.run_id},
                {"task", c.task},
                {"model_path", c.model_path},
                {"data_path", c.data_path},
                {"vocab_path", c.vocab_path},
                {"num_classes", c.num_classes},
                {"emb_dim", c.emb_dim},
                {"layers", c.layers},
                {"heads", c.heads},
                {"ffn_dim", c.ffn_dim},
                {"vocab_size", c.vocab_size},
                {"max_seq", c.max_seq},
                {"seq_len", c.seq_len},
                {"samples_per_class", c.samples_per_class},
                {"separability", c.separability},
                {"shots", c.shots},
                {"agent", c.agent},
                {"fitness", c.fitness},
                {"mode", c.mode},
                {"prompt_init", c.prompt_init},
                {"prompt_path", c.prompt_path},
                {"intrinsic_dim", c.intrinsic_dim},
                {"prompt_len", c.prompt_len},
                {"clip_ratio", c.clip_ratio},
                {"subnetworks", c.subnetworks},
                {"margin", c.margin},
                {"population", c.population},
                {"steps", c.steps},
                {"sigma0", c.sigma0},
                {"seed", c.seed},
                {"threads", c.threads},
                {"stop_train_accuracy", c.stop_train_accuracy},
                {"stop_dev_accuracy", c.stop_dev_accuracy}};
}

std::string git_describe() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    std::string out;
    char buf[256];
    while (fgets(buf, sizeof buf, pipe)) out += buf;
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out.good()) throw std::runtime_error("cannot write " + path.string());
}

double sample_mean(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / double(xs.size());
}

double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = sample_mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / double(xs.size() - 1));
}

// Model + full data pool for a config, before few-shot sampling. The
// projection is built here because the planted optimum is solved against it.
struct BuiltTask {
    FrozenModel model;
    FewShotDataset full;
    Projection w;
    std::optional<IntrinsicVector> optimum;
    double attainable = 0.0;
};

BuiltTask build_task(const RunConfig& cfg, const DerivedSeeds& seeds) {
    if (cfg.task == "planted") {
        ModelConfig mc = planted_model_config(cfg.num_classes, cfg.emb_dim, cfg.layers,
                                              cfg.vocab_size, cfg.max_seq);
        Projection w =
            init_projection(cfg.intrinsic_dim, cfg.prompt_len * cfg.emb_dim, seeds.projection);
        RngStream rng(seeds.model);
        PlantedParams params;
        params.samples_per_class = cfg.samples_per_class;
        params.seq_len = cfg.seq_len;
        auto built = build_planted_oracle(mc, cfg.intrinsic_dim, w, rng, params);
        return BuiltTask{std::move(built.first.model), std::move(built.second), std::move(w),
                         std::move(built.first.optimal_intrinsic),
                         built.first.attainable_accuracy};
    }
    if (cfg.task == "synthetic") {
        ModelConfig mc;
        mc.vocab_size = cfg.vocab_size;
        mc.emb_dim = cfg.emb_dim;
        mc.layers = cfg.layers;
        mc.heads = cfg.heads;
        mc.ffn_dim = cfg.ffn_dim;
        mc.max_seq = cfg.max_seq;
        mc.num_classes = cfg.num_classes;
        mc.dropout_sites = ModelConfig::all_dropout_sites(cfg.layers);
        FrozenModel model = build_toy_model(mc, seeds.model);
        FewShotDataset full = gen_synthetic_task(cfg.num_classes, cfg.samples_per_class,
                                                 cfg.vocab_size, cfg.seq_len, seeds.data,
                                                 cfg.separability);
        Projection w = init_projection(cfg.intrinsic_dim, cfg.prompt_len * cfg.emb_dim,
                                       seeds.projection);
        return BuiltTask{std::move(model), std::move(full), std::move(w), std::nullopt, 0.0};
    }
    // file task
    FrozenModel model = load_weights(cfg.model_path);
    Vocab vocab = load_vocab(cfg.vocab_path);
    FewShotDataset full = load_tsv(cfg.data_path, vocab);
    if (full.num_classes > model.config().num_classes) {
        throw std::invalid_argument("dataset has " + std::to_string(full.num_classes) +
                                    " classes, model serves " +
                                    std::to_string(model.config().num_classes));
    }
    full.num_classes = model.config().num_classes;
    Projection w = init_projection(cfg.intrinsic_dim, cfg.prompt_len * model.config().emb_dim,
                                   seeds.projection);
    return BuiltTask{std::move(model), std::move(full), std::move(w), std::nullopt, 0.0};
}

std::string run_identifier(const RunConfig& cfg) {
    return cfg.run_id.empty() ? cfg.derived_run_id() : cfg.run_id;
}

}  // namespace

void RunConfig::validate() const {
    if (task != "planted" && task != "synthetic" && task != "file") {
        throw std::invalid_argument("config: unknown task '" + task + "'");
    }
    if (task == "file") {
        if (model_path.empty()) throw std::invalid_argument("config: file task needs model_path");
        if (data_path.empty()) throw std::invalid_argument("config: file task needs data_path");
        if (vocab_path.empty()) throw std::invalid_argument("config: file task needs vocab_path");
    } else {
        if (num_classes < 2) throw std::invalid_argument("config: num_classes must be at least 2");
        if (emb_dim == 0 || layers == 0 || heads == 0 || ffn_dim == 0) {
            throw std::invalid_argument("config: model dimensions must be positive");
        }
        if (vocab_size <= kNumReservedTokens) {
            throw std::invalid_argument("config: vocab_size leaves no content tokens");
        }
        if (seq_len == 0) throw std::invalid_argument("config: seq_len must be positive");
        if (prompt_len + 1 + seq_len > max_seq) {
            throw std::invalid_argument("config: prompt_len + 1 + seq_len exceeds max_seq");
        }
        if (samples_per_class < 2 * shots) {
            throw std::invalid_argument("config: samples_per_class must be at least 2 * shots");
        }
        if (!(separability >= 0.0 && separability <= 1.0)) {
            throw std::invalid_argument("config: separability outside [0, 1]");
        }
    }
    agent_from_name(agent);
    clip_mode_from_name(mode);
    FitnessFunction fn;
    fn.kind = fitness_kind_from_name(fitness);
    fn.margin = margin;
    fn.validate();
    if (prompt_init_from_name(prompt_init) == PromptInit::file && prompt_path.empty()) {
        throw std::invalid_argument("config: prompt_init file needs prompt_path");
    }
    if (shots == 0) throw std::invalid_argument("config: shots must be positive");
    if (intrinsic_dim == 0) throw std::invalid_argument("config: intrinsic_dim must be positive");
    if (prompt_len == 0) throw std::invalid_argument("config: prompt_len must be positive");
    if (!(clip_ratio >= 0.0 && clip_ratio < 1.0)) {
        throw std::invalid_argument("config: clip_ratio outside [0, 1)");
    }
    if (subnetworks == 0) throw std::invalid_argument("config: subnetworks must be positive");
    if (population < 2) throw std::invalid_argument("config: population must be at least 2");
    if (steps == 0) throw std::invalid_argument("config: steps must be positive");
    if (!(sigma0 > 0.0)) throw std::invalid_argument("config: sigma0 must be positive");
}

std::string RunConfig::to_json() const { return config_to_json(*this).dump(2) + "\n"; }

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    RunConfig c;
    const json defaults = config_to_json(c);
    for (const auto& item : j.items()) {
        if (!defaults.contains(item.key())) {
            throw std::invalid_argument("config: unknown field '" + item.key() + "'");
        }
    }
    const auto get_string = [&](const char* key, std::string& out) {
        if (!j.contains(key)) return;
        if (!j[key].is_string()) {
            throw std::invalid_argument(std::string("config: ") + key + " must be a string");
        }
        out = j[key].get<std::string>();
    };
    const auto get_size = [&](const char* key, std::size_t& out) {
        if (!j.contains(key)) return;
        if (!j[key].is_number_unsigned()) {
            throw std::invalid_argument(std::string("config: ") + key +
                                        " must be a non-negative integer");
        }
        out = j[key].get<std::size_t>();
    };
    const auto get_double = [&](const char* key, double& out) {
        if (!j.contains(key)) return;
        if (!j[key].is_number()) {
            throw std::invalid_argument(std::string("config: ") + key + " must be a number");
        }
        out = j[key].get<double>();
    };
    get_string("run_id", c.run_id);
    get_string("task", c.task);
    get_string("model_path", c.model_path);
    get_string("data_path", c.data_path);
    get_string("vocab_path", c.vocab_path);
    get_size("num_classes", c.num_classes);
    get_size("emb_dim", c.emb_dim);
    get_size("layers", c.layers);
    get_size("heads", c.heads);
    get_size("ffn_dim", c.ffn_dim);
    get_size("vocab_size", c.vocab_size);
    get_size("max_seq", c.max_seq);
    get_size("seq_len", c.seq_len);
    get_size("samples_per_class", c.samples_per_class);
    get_double("separability", c.separability);
    get_size("shots", c.shots);
    get_string("agent", c.agent);
    get_string("fitness", c.fitness);
    get_string("mode", c.mode);
    get_string("prompt_init", c.prompt_init);
    get_string("prompt_path", c.prompt_path);
    get_size("intrinsic_dim", c.intrinsic_dim);
    get_size("prompt_len", c.prompt_len);
    get_double("clip_ratio", c.clip_ratio);
    get_size("subnetworks", c.subnetworks);
    get_double("margin", c.margin);
    get_size("population", c.population);
    get_size("steps", c.steps);
    get_double("sigma0", c.sigma0);
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) {
            throw std::invalid_argument("config: seed must be a non-negative integer");
        }
        c.seed = j["seed"].get<uint64_t>();
    }
    get_size("threads", c.threads);
    get_double("stop_train_accuracy", c.stop_train_accuracy);
    get_double("stop_dev_accuracy", c.stop_dev_accuracy);
    return c;
}

std::string RunConfig::digest() const {
    return Sha1::hex(Sha1::hash(to_json())).substr(0, 12);
}

std::string RunConfig::derived_run_id() const {
    return task + "-" + agent + "-s" + std::to_string(seed) + "-" + digest();
}

DerivedSeeds derive_seeds(uint64_t seed) {
    const auto derive = [&](const char* role) {
        return seed_from_string(std::string("cliptune:") + role + ":" + std::to_string(seed));
    };
    DerivedSeeds s;
    s.model = derive("model");
    s.data = derive("data");
    s.few_shot = derive("few-shot");
    s.projection = derive("projection");
    s.prompt = derive("prompt");
    s.tune = derive("tune");
    return s;
}

PreparedRun prepare_run(const RunConfig& cfg) {
    cfg.validate();
    const DerivedSeeds seeds = derive_seeds(cfg.seed);
    BuiltTask task = build_task(cfg, seeds);
    auto splits = sample_few_shot(task.full, cfg.shots, seeds.few_shot);

    PromptEmbedding p0 = init_prompt(prompt_init_from_name(cfg.prompt_init), task.model,
                                     cfg.prompt_len, seeds.prompt, cfg.prompt_path);

    std::size_t longest = 0;
    for (const auto& s : splits.first.samples) longest = std::max(longest, s.tokens.size());
    for (const auto& s : splits.second.samples) longest = std::max(longest, s.tokens.size());
    if (cfg.prompt_len + 1 + longest > task.model.config().max_seq) {
        throw std::invalid_argument("config: prompt plus longest sample exceeds the model's "
                                    "max_seq " +
                                    std::to_string(task.model.config().max_seq));
    }

    TuneConfig tc;
    tc.agent = agent_from_name(cfg.agent);
    tc.intrinsic_dim = cfg.intrinsic_dim;
    tc.population = cfg.population;
    tc.steps = cfg.steps;
    tc.subnetworks = cfg.subnetworks;
    tc.p_clip = cfg.clip_ratio;
    tc.mode = clip_mode_from_name(cfg.mode);
    tc.fitness.kind = fitness_kind_from_name(cfg.fitness);
    tc.fitness.margin = cfg.margin;
    tc.sigma0 = cfg.sigma0;
    tc.seed = seeds.tune;
    tc.threads = cfg.threads == 0 ? 1 : cfg.threads;
    tc.stop_train_accuracy = cfg.stop_train_accuracy;
    tc.stop_dev_accuracy = cfg.stop_dev_accuracy;

    return PreparedRun{std::move(task.model),
                       std::move(splits.first),
                       std::move(splits.second),
                       std::move(p0),
                       std::move(task.w),
                       tc,
                       seeds,
                       std::move(task.optimum),
                       task.attainable};
}

RunArtifacts run_tune(const RunConfig& cfg, const std::string& out_root) {
    if (out_root.empty()) throw std::invalid_argument("run_tune: out_root required");
    PreparedRun run = prepare_run(cfg);
    LocalEvaluator evaluator(run.model, run.train, run.dev);

    const auto t0 = std::chrono::steady_clock::now();
    TuneResult result = tune(evaluator, run.p0, run.w, run.tune_config);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    const std::string id = run_identifier(cfg);
    const fs::path dir = fs::path(out_root) / "runs" / id;
    fs::create_directories(dir);
    write_text(dir / "history.csv", history_csv(result.history));
    if (!result.best_z.values.empty()) {
        save_prompt(compose_prompt(run.p0, result.best_z, run.w), (dir / "best_prompt").string());
    }

    json meta{{"run_id", id},
              {"config", json::parse(cfg.to_json())},
              {"seeds",
               {{"model", run.seeds.model},
                {"data", run.seeds.data},
                {"few_shot", run.seeds.few_shot},
                {"projection", run.seeds.projection},
                {"prompt", run.seeds.prompt},
                {"tune", run.seeds.tune}}},
              {"fingerprints",
               {{"model", run.model.fingerprint()},
                {"train", run.train.fingerprint()},
                {"dev", run.dev.fingerprint()}}},
              {"git", git_describe()},
              {"result",
               {{"best_fitness", result.best_train_fitness},
                {"best_dev_accuracy", result.best_dev_accuracy},
                {"best_train_accuracy", result.best_train_accuracy},
                {"budget_used", result.budget_used},
                {"dev_evals", result.dev_evals},
                {"repair_count", result.repair_count},
                {"aborted", result.aborted},
                {"error", result.error},
                {"steps_run", result.history.size()},
                {"wall_time_ms", wall_ms}}},
              {"best_z", result.best_z.values}};
    if (run.planted_optimum) {
        double norm = 0.0;
        for (double v : run.planted_optimum->values) norm += v * v;
        meta["planted"] = json{{"attainable_accuracy", run.attainable_accuracy},
                               {"optimum_norm", std::sqrt(norm)}};
    }
    if (run.tune_config.agent == AgentKind::cma) {
        const CmaState s = cma_init(run.tune_config.intrinsic_dim, run.tune_config.population,
                                    run.tune_config.sigma0, {}, run.tune_config.seed);
        meta["cma"] = json{{"mu", s.mu},           {"mu_eff", s.mu_eff},
                           {"c_sigma", s.c_sigma}, {"d_sigma", s.d_sigma},
                           {"c_c", s.c_c},         {"c1", s.c1},
                           {"c_mu", s.c_mu},       {"chi_n", s.chi_n},
                           {"eigen_interval", s.eigen_interval}};
    }
    write_text(dir / "metadata.json", meta.dump(2) + "\n");

    return RunArtifacts{dir.string(), std::move(result), wall_ms};
}

void export_task(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    if (cfg.task == "file") {
        throw std::invalid_argument("export_task: task is already file-backed");
    }
    const DerivedSeeds seeds = derive_seeds(cfg.seed);
    BuiltTask task = build_task(cfg, seeds);

    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    save_weights(task.model, (dir / "model.pfwt").string());

    // Vocabulary line k names token id k + 2, matching load_vocab's
    // assignment, so "w<id>" round-trips to the same id.
    std::string vocab_text;
    for (std::size_t id = kNumReservedTokens; id < task.model.config().vocab_size; ++id) {
        vocab_text += "w" + std::to_string(id) + "\n";
    }
    write_text(dir / "vocab.txt", vocab_text);

    // Samples are emitted class-major by the generators, so first-appearance
    // label indexing recovers the same class numbering.
    std::string tsv;
    for (const auto& s : task.full.samples) {
        std::string text;
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            if (i) text += ' ';
            text += "w" + std::to_string(s.tokens[i]);
        }
        tsv += text + "\t" + "c" + std::to_string(s.label) + "\n";
    }
    write_text(dir / "data.tsv", tsv);

    json meta{{"task", cfg.task},
              {"config", json::parse(cfg.to_json())},
              {"num_classes", task.full.num_classes},
              {"model_fingerprint", task.model.fingerprint()},
              {"dataset_fingerprint", task.full.fingerprint()}};
    if (task.optimum) {
        meta["optimal_intrinsic"] = task.optimum->values;
        meta["attainable_accuracy"] = task.attainable;
    }
    write_text(dir / "task.json", meta.dump(2) + "\n");
}

const char* ablate_kind_name(AblateKind kind) {
    switch (kind) {
        case AblateKind::clip_ratio: return "clip_ratio";
        case AblateKind::num_subnetworks: return "num_subnetworks";
        case AblateKind::static_dynamic: return "static_dynamic";
        case AblateKind::data_size: return "data_size";
    }
    return "?";
}

AblateKind ablate_kind_from_name(const std::string& name) {
    if (name == "clip_ratio") return AblateKind::clip_ratio;
    if (name == "num_subnetworks") return AblateKind::num_subnetworks;
    if (name == "static_dynamic") return AblateKind::static_dynamic;
    if (name == "data_size") return AblateKind::data_size;
    throw std::invalid_argument("unknown ablation '" + name + "'");
}

namespace {

// Sample variance of the ensemble reward over 20 repeated evaluations of the
// tuned prompt. Pinned tags repeat the identical computation; fresh tags per
// repetition re-draw every mask.
double reward_variance(LocalEvaluator& evaluator, const PreparedRun& run, const RunConfig& cfg,
                       const TuneResult& result) {
    IntrinsicVector z = result.best_z;
    if (z.values.empty()) z.values.assign(cfg.intrinsic_dim, 0.0);
    const PromptEmbedding prompt = compose_prompt(run.p0, z, run.w);
    const ClipMode mode = clip_mode_from_name(cfg.mode);
    std::vector<double> rewards;
    for (std::size_t rep = 0; rep < 20; ++rep) {
        std::vector<std::string> tags;
        double p = cfg.clip_ratio;
        if (mode == ClipMode::off) {
            tags = {"net-0"};
            p = 0.0;
        } else if (mode == ClipMode::static_) {
            for (std::size_t j = 0; j < cfg.subnetworks; ++j) {
                tags.push_back("net-" + std::to_string(j));
            }
        } else {
            for (std::size_t j = 0; j < cfg.subnetworks; ++j) {
                tags.push_back("var-" + std::to_string(rep) + "-" + std::to_string(j));
            }
        }
        rewards.push_back(evaluator
                              .score(Split::train, prompt, tags, p, run.tune_config.fitness,
                                     "variance-probe")
                              .mean_loss);
    }
    const double m = sample_mean(rewards);
    double v = 0.0;
    for (double r : rewards) v += (r - m) * (r - m);
    return v / double(rewards.size() - 1);
}

}  // namespace

AblateTable ablate(AblateKind kind, const RunConfig& base, std::size_t num_seeds) {
    if (num_seeds == 0) throw std::invalid_argument("ablate: num_seeds must be positive");
    base.validate();

    struct GridPoint {
        std::string value;
        std::function<void(RunConfig&)> apply;
    };
    std::vector<GridPoint> grid;
    switch (kind) {
        case AblateKind::clip_ratio:
            for (int i = 0; i <= 5; ++i) {
                const double v = 0.1 * i;
                grid.push_back({format_double(v), [v](RunConfig& c) { c.clip_ratio = v; }});
            }
            break;
        case AblateKind::num_subnetworks:
            for (std::size_t n = 1; n <= 10; ++n) {
                grid.push_back(
                    {std::to_string(n), [n](RunConfig& c) { c.subnetworks = n; }});
            }
            break;
        case AblateKind::static_dynamic:
            for (const char* m : {"dynamic", "off", "static"}) {
                const std::string mode = m;
                grid.push_back({mode, [mode](RunConfig& c) { c.mode = mode; }});
            }
            break;
        case AblateKind::data_size:
            for (std::size_t k : {std::size_t{4}, std::size_t{8}, std::size_t{16},
                                  std::size_t{32}}) {
                grid.push_back({std::to_string(k), [k](RunConfig& c) { c.shots = k; }});
            }
            break;
    }

    AblateTable table;
    table.kind = kind;
    for (const auto& point : grid) {
        std::vector<double> dev_accs;
        std::vector<double> fits;
        std::vector<double> variances;
        for (std::size_t si = 0; si < num_seeds; ++si) {
            RunConfig cfg = base;
            cfg.run_id.clear();
            point.apply(cfg);
            cfg.seed = base.seed + si;
            cfg.validate();
            PreparedRun run = prepare_run(cfg);
            LocalEvaluator evaluator(run.model, run.train, run.dev);
            TuneResult result = tune(evaluator, run.p0, run.w, run.tune_config);
            if (result.aborted) {
                throw std::runtime_error("ablate: run aborted: " + result.error);
            }
            dev_accs.push_back(result.best_dev_accuracy);
            fits.push_back(result.best_train_fitness);
            if (kind == AblateKind::static_dynamic) {
                variances.push_back(reward_variance(evaluator, run, cfg, result));
            }
        }
        AblateCell cell;
        cell.value = point.value;
        cell.seeds = num_seeds;
        cell.dev_accuracy_mean = sample_mean(dev_accs);
        cell.dev_accuracy_std = sample_std(dev_accs);
        cell.best_fitness_mean = sample_mean(fits);
        cell.best_fitness_std = sample_std(fits);
        if (!variances.empty()) cell.reward_variance = sample_mean(variances);
        table.cells.push_back(std::move(cell));
    }
    return table;
}

std::string AblateTable::csv() const {
    std::string out =
        "# cliptune ablation v1\n"
        "sweep,value,seeds,dev_accuracy_mean,dev_accuracy_std,best_fitness_mean,"
        "best_fitness_std,reward_variance\n";
    for (const auto& c : cells) {
        out += std::string(ablate_kind_name(kind)) + "," + c.value + "," +
               std::to_string(c.seeds) + "," + format_double(c.dev_accuracy_mean) + "," +
               format_double(c.dev_accuracy_std) + "," + format_double(c.best_fitness_mean) +
               "," + format_double(c.best_fitness_std) + ",";
        if (c.reward_variance) out += format_double(*c.reward_variance);
        out += "\n";
    }
    return out;
}

std::string write_ablation(const AblateTable& table, const RunConfig& base,
                           const std::string& out_root) {
    if (out_root.empty()) throw std::invalid_argument("write_ablation: out_root required");
    fs::create_directories(out_root);
    const fs::path csv_path =
        fs::path(out_root) / (std::string("ablate_") + ablate_kind_name(table.kind) + ".csv");
    write_text(csv_path, table.csv());
    json meta{{"sweep", ablate_kind_name(table.kind)},
              {"config", json::parse(base.to_json())},
              {"cells", table.cells.size()},
              {"git", git_describe()}};
    write_text(fs::path(out_root) /
                   (std::string("ablate_") + ablate_kind_name(table.kind) + ".meta.json"),
               meta.dump(2) + "\n");
    return csv_path.string();
}

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') {
            out += "&amp;";
        } else if (c == '<') {
            out += "&lt;";
        } else if (c == '>') {
            out += "&gt;";
        } else {
            out += c;
        }
    }
    return out;
}

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

}  // namespace

std::string render_line_plot(const std::string& title, const std::string& x_label,
                             const std::string& y_label,
                             const std::vector<PlotSeries>& series) {
    constexpr double kWidth = 640, kHeight = 400;
    constexpr double kLeft = 62, kRight = 20, kTop = 36, kBottom = 48;
    const double plot_w = kWidth - kLeft - kRight;
    const double plot_h = kHeight - kTop - kBottom;

    double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
    bool any = false;
    for (const auto& s : series) {
        if (!s.y_err.empty() && s.y_err.size() != s.points.size()) {
            throw std::invalid_argument("plot: y_err length must match points");
        }
        for (std::size_t i = 0; i < s.points.size(); ++i) {
            const auto& p = s.points[i];
            if (!std::isfinite(p.first) || !std::isfinite(p.second)) continue;
            const double err = s.y_err.empty() ? 0.0 : s.y_err[i];
            if (!any) {
                x_min = x_max = p.first;
                y_min = p.second - err;
                y_max = p.second + err;
                any = true;
            } else {
                x_min = std::min(x_min, p.first);
                x_max = std::max(x_max, p.first);
                y_min = std::min(y_min, p.second - err);
                y_max = std::max(y_max, p.second + err);
            }
        }
    }
    if (!any) throw std::invalid_argument("plot: no finite points");
    if (x_max == x_min) {
        x_min -= 1.0;
        x_max += 1.0;
    }
    if (y_max == y_min) {
        y_min -= 1.0;
        y_max += 1.0;
    }
    const double x_pad = 0.02 * (x_max - x_min);
    const double y_pad = 0.06 * (y_max - y_min);
    x_min -= x_pad;
    x_max += x_pad;
    y_min -= y_pad;
    y_max += y_pad;

    const auto sx = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * plot_w; };
    const auto sy = [&](double y) {
        return kTop + plot_h - (y - y_min) / (y_max - y_min) * plot_h;
    };

    static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                     "#ff7f0e", "#8c564b"};
    constexpr std::size_t kPaletteSize = 6;

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
           "viewBox=\"0 0 640 400\">\n";
    svg += "<rect width=\"640\" height=\"400\" fill=\"#ffffff\"/>\n";
    svg += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"15\" fill=\"#111111\">" +
           xml_escape(title) + "</text>\n";

    for (int i = 0; i <= 4; ++i) {
        const double xv = x_min + (x_max - x_min) * i / 4.0;
        const double yv = y_min + (y_max - y_min) * i / 4.0;
        const std::string gx = px(sx(xv));
        const std::string gy = px(sy(yv));
        svg += "<line x1=\"" + gx + "\" y1=\"" + px(kTop) + "\" x2=\"" + gx + "\" y2=\"" +
               px(kTop + plot_h) + "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
        svg += "<line x1=\"" + px(kLeft) + "\" y1=\"" + gy + "\" x2=\"" + px(kLeft + plot_w) +
               "\" y2=\"" + gy + "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + gx + "\" y=\"" + px(kTop + plot_h + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
               "fill=\"#333333\">" +
               tick_label(xv) + "</text>\n";
        svg += "<text x=\"" + px(kLeft - 8) + "\" y=\"" + px(sy(yv) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
               "fill=\"#333333\">" +
               tick_label(yv) + "</text>\n";
    }
    svg += "<line x1=\"" + px(kLeft) + "\" y1=\"" + px(kTop) + "\" x2=\"" + px(kLeft) +
           "\" y2=\"" + px(kTop + plot_h) + "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
    svg += "<line x1=\"" + px(kLeft) + "\" y1=\"" + px(kTop + plot_h) + "\" x2=\"" +
           px(kLeft + plot_w) + "\" y2=\"" + px(kTop + plot_h) +
           "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + px(kLeft + plot_w / 2) + "\" y=\"" + px(kHeight - 10) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
           "fill=\"#111111\">" +
           xml_escape(x_label) + "</text>\n";
    svg += "<text x=\"16\" y=\"" + px(kTop + plot_h / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
           "fill=\"#111111\" transform=\"rotate(-90 16 " +
           px(kTop + plot_h / 2) + ")\">" + xml_escape(y_label) + "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kPalette[si % kPaletteSize];
        std::string poly;
        std::size_t finite = 0;
        for (const auto& p : s.points) {
            if (!std::isfinite(p.first) || !std::isfinite(p.second)) continue;
            poly += px(sx(p.first)) + "," + px(sy(p.second)) + " ";
            ++finite;
        }
        if (finite == 0) continue;
        if (!s.y_err.empty()) {
            for (std::size_t i = 0; i < s.points.size(); ++i) {
                const auto& p = s.points[i];
                if (!std::isfinite(p.first) || !std::isfinite(p.second)) continue;
                if (!(s.y_err[i] > 0.0)) continue;
                const std::string cx = px(sx(p.first));
                const std::string y1 = px(sy(p.second - s.y_err[i]));
                const std::string y2 = px(sy(p.second + s.y_err[i]));
                svg += "<line x1=\"" + cx + "\" y1=\"" + y1 + "\" x2=\"" + cx + "\" y2=\"" + y2 +
                       "\" stroke=\"" + color + "\" stroke-width=\"1\"/>\n";
                svg += "<line x1=\"" + px(sx(p.first) - 3) + "\" y1=\"" + y1 + "\" x2=\"" +
                       px(sx(p.first) + 3) + "\" y2=\"" + y1 + "\" stroke=\"" + color +
                       "\" stroke-width=\"1\"/>\n";
                svg += "<line x1=\"" + px(sx(p.first) - 3) + "\" y1=\"" + y2 + "\" x2=\"" +
                       px(sx(p.first) + 3) + "\" y2=\"" + y2 + "\" stroke=\"" + color +
                       "\" stroke-width=\"1\"/>\n";
            }
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"1.5\" points=\"" + poly + "\"/>\n";
        if (finite <= 64) {
            for (const auto& p : s.points) {
                if (!std::isfinite(p.first) || !std::isfinite(p.second)) continue;
                svg += "<circle cx=\"" + px(sx(p.first)) + "\" cy=\"" + px(sy(p.second)) +
                       "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
            }
        }
        const double ly = kTop + 10 + 16.0 * double(si);
        svg += "<line x1=\"" + px(kLeft + plot_w - 130) + "\" y1=\"" + px(ly) + "\" x2=\"" +
               px(kLeft + plot_w - 112) + "\" y2=\"" + px(ly) + "\" stroke=\"" + color +
               "\" stroke-width=\"2\"/>\n";
        svg += "<text x=\"" + px(kLeft + plot_w - 106) + "\" y=\"" + px(ly + 4) +
               "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333333\">" +
               xml_escape(s.name) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

namespace {

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name, const std::string& path) const {
        for (std::size_t i = 0; i < columns.size(); ++i) {
            if (columns[i] == name) return i;
        }
        throw std::runtime_error("report: " + path + " lacks column '" + name + "'");
    }
};

CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("report: cannot open " + path.string());
    CsvTable table;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        if (table.columns.empty()) {
            table.columns = std::move(fields);
        } else {
            table.rows.push_back(std::move(fields));
        }
    }
    return table;
}

double csv_number(const std::string& field) {
    if (field.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::strtod(field.c_str(), nullptr);
}

}  // namespace

ReportOutputs report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("report: no such directory " + run_dir);
    }
    const fs::path history_path = dir / "history.csv";
    const bool have_history = fs::exists(history_path);
    std::vector<fs::path> ablations;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("ablate_", 0) == 0 && name.size() > 4 &&
            name.substr(name.size() - 4) == ".csv") {
            ablations.push_back(entry.path());
        }
    }
    std::sort(ablations.begin(), ablations.end());
    if (!have_history && ablations.empty()) {
        throw std::runtime_error("report: nothing to summarize in " + run_dir +
                                 "; expected history.csv or ablate_<sweep>.csv");
    }

    ReportOutputs outputs;
    fs::create_directories(dir / "plots");
    std::string summary = "cliptune report: " + dir.filename().string() + "\n";

    if (have_history) {
        const CsvTable t = read_csv(history_path);
        const std::size_t c_step = t.column("step", "history.csv");
        const std::size_t c_best = t.column("best_fitness", "history.csv");
        const std::size_t c_gen = t.column("step_best_fitness", "history.csv");
        const std::size_t c_dev = t.column("dev_accuracy", "history.csv");
        const std::size_t c_budget = t.column("budget_used", "history.csv");
        if (t.rows.empty()) throw std::runtime_error("report: history.csv has no rows");

        PlotSeries best{"best fitness", {}, {}};
        PlotSeries gen{"generation best", {}, {}};
        PlotSeries dev{"dev accuracy", {}, {}};
        for (const auto& row : t.rows) {
            const double step = csv_number(row.at(c_step));
            best.points.emplace_back(step, csv_number(row.at(c_best)));
            gen.points.emplace_back(step, csv_number(row.at(c_gen)));
            dev.points.emplace_back(step, csv_number(row.at(c_dev)));
        }
        const fs::path fitness_svg = dir / "plots" / "fitness.svg";
        write_text(fitness_svg,
                   render_line_plot("training fitness", "step", "fitness", {best, gen}));
        outputs.plot_paths.push_back(fitness_svg.string());
        const fs::path dev_svg = dir / "plots" / "dev_accuracy.svg";
        write_text(dev_svg, render_line_plot("dev accuracy", "step", "accuracy", {dev}));
        outputs.plot_paths.push_back(dev_svg.string());

        const auto& last = t.rows.back();
        summary += "history: " + std::to_string(t.rows.size()) + " steps\n";
        summary += "final best_fitness: " + last.at(c_best) + "\n";
        summary += "final dev_accuracy: " + last.at(c_dev) + "\n";
        summary += "budget_used: " + last.at(c_budget) + "\n";
    }

    for (const auto& path : ablations) {
        const CsvTable t = read_csv(path);
        const std::string fname = path.filename().string();
        const std::size_t c_value = t.column("value", fname);
        const std::size_t c_dev_mean = t.column("dev_accuracy_mean", fname);
        const std::size_t c_dev_std = t.column("dev_accuracy_std", fname);
        const std::size_t c_fit_mean = t.column("best_fitness_mean", fname);
        const std::size_t c_fit_std = t.column("best_fitness_std", fname);
        const std::size_t c_var = t.column("reward_variance", fname);
        if (t.rows.empty()) throw std::runtime_error("report: " + fname + " has no rows");

        bool numeric_x = true;
        for (const auto& row : t.rows) {
            const std::string& v = row.at(c_value);
            char* end = nullptr;
            std::strtod(v.c_str(), &end);
            if (v.empty() || end != v.c_str() + v.size()) {
                numeric_x = false;
                break;
            }
        }
        PlotSeries dev{"dev accuracy", {}, {}};
        for (std::size_t i = 0; i < t.rows.size(); ++i) {
            const double x = numeric_x ? csv_number(t.rows[i].at(c_value)) : double(i);
            dev.points.emplace_back(x, csv_number(t.rows[i].at(c_dev_mean)));
            dev.y_err.push_back(csv_number(t.rows[i].at(c_dev_std)));
        }
        const std::string stem = fname.substr(0, fname.size() - 4);
        const fs::path svg_path = dir / "plots" / (stem + ".svg");
        write_text(svg_path, render_line_plot(stem, numeric_x ? "value" : "grid index",
                                              "dev accuracy", {dev}));
        outputs.plot_paths.push_back(svg_path.string());

        summary += "ablation " + stem.substr(7) + ":\n";
        for (const auto& row : t.rows) {
            summary += "  " + row.at(c_value) + ": dev_accuracy " + row.at(c_dev_mean) +
                       " +- " + row.at(c_dev_std) + ", best_fitness " + row.at(c_fit_mean) +
                       " +- " + row.at(c_fit_std);
            if (!row.at(c_var).empty()) summary += ", reward_variance " + row.at(c_var);
            summary += "\n";
        }
    }

    const fs::path summary_path = dir / "summary.txt";
    write_text(summary_path, summary);
    outputs.summary_path = summary_path.string();
    return outputs;
}

}  // namespace cliptune
