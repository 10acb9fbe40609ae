#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cliptune/dataset.hpp"
#include "cliptune/model.hpp"
#include "cliptune/prompting.hpp"
#include "cliptune/tune.hpp"

namespace cliptune {

// One run, fully specified. Serialized verbatim into the run's metadata so
// every artifact names the exact configuration that produced it.
struct RunConfig {
    std::string run_id;            // empty: derived from the config digest
    std::string task = "planted";  // planted | synthetic | file

    // file task inputs
    std::string model_path;
    std::string data_path;
    std::string vocab_path;

    // generated-task model spec (planted pins heads = num_classes)
    std::size_t num_classes = 4;
    std::size_t emb_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = 1000;
    std::size_t max_seq = 128;
    std::size_t seq_len = 16;
    std::size_t samples_per_class = 64;
    double separability = 0.9;  // synthetic task only

    std::size_t shots = 16;  // k examples per class, train and dev each

    // search
    std::string agent = "cma";
    std::string fitness = "hinge";
    std::string mode = "static";
    std::string prompt_init = "random_tokens";
    std::string prompt_path;  // prompt_init == "file"
    std::size_t intrinsic_dim = 500;
    std::size_t prompt_len = 50;
    double clip_ratio = 0.1;
    std::size_t subnetworks = 5;
    double margin = 2.0;
    std::size_t population = 20;
    std::size_t steps = 10000;
    double sigma0 = 1.0;
    uint64_t seed = 0;
    std::size_t threads = 1;
    double stop_train_accuracy = 2.0;  // values above 1 disable early stop
    double stop_dev_accuracy = 2.0;

    void validate() const;
    std::string to_json() const;  // stable key order, 2-space indent
    static RunConfig from_json(const std::string& text);
    std::string digest() const;  // 12 hex chars over the serialized config
    std::string derived_run_id() const;
};

// Per-purpose seeds fanned out from the experiment seed, so changing one
// stage (say the prompt draw) cannot silently reshuffle another.
struct DerivedSeeds {
    uint64_t model = 0;
    uint64_t data = 0;
    uint64_t few_shot = 0;
    uint64_t projection = 0;
    uint64_t prompt = 0;
    uint64_t tune = 0;
};

DerivedSeeds derive_seeds(uint64_t seed);

// Everything a run needs, built and validated before any artifact exists.
struct PreparedRun {
    FrozenModel model;
    FewShotDataset train;
    FewShotDataset dev;
    PromptEmbedding p0;
    Projection w;
    TuneConfig tune_config;
    DerivedSeeds seeds;

    // planted task only
    std::optional<IntrinsicVector> planted_optimum;
    double attainable_accuracy = 0.0;
};

PreparedRun prepare_run(const RunConfig& config);

struct RunArtifacts {
    std::string run_dir;
    TuneResult result;
    double wall_time_ms = 0.0;
};

// prepare + tune + write <out_root>/runs/<id>/{metadata.json, history.csv,
// best_prompt}. No directory is created until preparation succeeds, so a
// bad config or missing input leaves no partial artifacts. The history file
// is a pure function of the config, byte-identical across reruns.
RunArtifacts run_tune(const RunConfig& config, const std::string& out_root);

// Materialize a generated task as files (model.pfwt, vocab.txt, data.tsv,
// task.json) so the serve/eval/file-task paths can consume it.
void export_task(const RunConfig& config, const std::string& out_dir);

enum class AblateKind { clip_ratio, num_subnetworks, static_dynamic, data_size };

const char* ablate_kind_name(AblateKind kind);
AblateKind ablate_kind_from_name(const std::string& name);

struct AblateCell {
    std::string value;  // grid point, as printed in the CSV
    std::size_t seeds = 0;
    double dev_accuracy_mean = 0.0;
    double dev_accuracy_std = 0.0;
    double best_fitness_mean = 0.0;
    double best_fitness_std = 0.0;
    // static_dynamic sweep only: sample variance of the ensemble reward over
    // repeated evaluations of the final prompt (0 exactly when masks are
    // pinned by tag, positive when every pass draws fresh tags).
    std::optional<double> reward_variance;
};

struct AblateTable {
    AblateKind kind = AblateKind::clip_ratio;
    std::vector<AblateCell> cells;

    std::string csv() const;
};

// Sweeps one dimension over its canonical grid (clip_ratio {0..0.5},
// subnetworks {1..10}, mode {dynamic, off, static}, shots {4, 8, 16, 32}),
// num_seeds runs per cell with seeds base.seed, base.seed+1, ...
AblateTable ablate(AblateKind kind, const RunConfig& base, std::size_t num_seeds = 3);

// Writes <out_root>/ablate_<kind>.csv (plus a sidecar metadata JSON) and
// returns the CSV path.
std::string write_ablation(const AblateTable& table, const RunConfig& base,
                           const std::string& out_root);

struct PlotSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;
    std::vector<double> y_err;  // empty, or one entry per point
};

// Self-contained SVG line chart; output bytes depend only on the inputs.
std::string render_line_plot(const std::string& title, const std::string& x_label,
                             const std::string& y_label,
                             const std::vector<PlotSeries>& series);

struct ReportOutputs {
    std::string summary_path;
    std::vector<std::string> plot_paths;
};

// Renders summary.txt and plots/*.svg from the CSVs found in run_dir
// (history.csv and/or ablate_*.csv). Pure function of those files, so
// re-running is idempotent; errors list what was expected when none exist.
ReportOutputs report(const std::string& run_dir);

}  // namespace cliptune
