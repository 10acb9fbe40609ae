// Final acceptance gate. Each criterion prints exactly one PASS/FAIL line;
// the process exits nonzero if any criterion fails. Tolerances and budgets
// are pinned as constants next to the check they guard.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cliptune/clipping.hpp"
#include "cliptune/cma.hpp"
#include "cliptune/experiment.hpp"
#include "cliptune/fitness.hpp"
#include "cliptune/model.hpp"
#include "cliptune/prompting.hpp"
#include "cliptune/rng.hpp"
#include "cliptune/service.hpp"
#include "cliptune/textfmt.hpp"
#include "cliptune/tune.hpp"

using namespace cliptune;
namespace fs = std::filesystem;

namespace {

// Thrown by a criterion to fail with a reason on its status line.
struct Failure {
    std::string reason;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Failure{"cannot open " + path.string()};
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch_dir() {
    const fs::path dir = fs::temp_directory_path() / "cliptune_acceptance";
    fs::create_directories(dir);
    return dir;
}

std::string fmt(double v) { return format_double(v); }

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return xs[xs.size() / 2];
}

// ---------------------------------------------------------------------------
// Criterion 1 fixture: a model, prompt and batch pinned here, reproduced
// bit-for-bit by every process that runs --emit-determinism.

ModelConfig c1_config() {
    ModelConfig c;
    c.vocab_size = 32;
    c.emb_dim = 16;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 32;
    c.max_seq = 24;
    c.num_classes = 3;
    c.dropout_sites = ModelConfig::all_dropout_sites(2);
    return c;
}

// Mask bits plus clipped and unclipped logits, serialized as raw bytes.
std::string c1_blob() {
    const FrozenModel model = build_toy_model(c1_config(), 99);

    PromptEmbedding prompt;
    prompt.values = MatF(3, 16);
    RngStream rng(7);
    for (auto& v : prompt.values.data()) v = float(rng.next_gaussian() * 0.1);

    const std::vector<std::vector<uint32_t>> batch{{2, 3, 4, 5, 6}, {7, 8}};

    std::string blob;
    const ClipMask mask =
        generate_mask(derive_seed("acc1-net", "enc.0.attn.probs"), {2, 9, 9}, 0.1);
    blob.append(reinterpret_cast<const char*>(mask.bits.data()), mask.bits.size());

    for (const ClipSpec& spec : {ClipSpec{"acc1-net", 0.1, ClipMode::static_},
                                 ClipSpec{"", 0.0, ClipMode::off}}) {
        for (const auto& out : forward_batch(model, prompt, batch, spec)) {
            blob.append(reinterpret_cast<const char*>(out.logits.data()),
                        out.logits.size() * sizeof(float));
        }
    }
    return blob;
}

int emit_determinism(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    const std::string blob = c1_blob();
    out.write(blob.data(), std::streamsize(blob.size()));
    return out.good() ? 0 : 1;
}

std::string self_path(const char* argv0) {
    std::error_code ec;
    const fs::path exe = fs::read_symlink("/proc/self/exe", ec);
    return ec ? std::string(argv0) : exe.string();
}

std::string g_self;

// Masks and logits must be bit-identical across separate processes.
std::string criterion1() {
    const fs::path dir = scratch_dir();
    const fs::path a = dir / "determinism_a.bin";
    const fs::path b = dir / "determinism_b.bin";
    fs::remove(a);
    fs::remove(b);
    for (const fs::path& p : {a, b}) {
        const std::string cmd = g_self + " --emit-determinism " + p.string();
        if (std::system(cmd.c_str()) != 0) throw Failure{"child process failed: " + cmd};
    }
    const std::string blob_a = read_file(a);
    const std::string blob_b = read_file(b);
    const std::string local = c1_blob();
    if (blob_a.empty()) throw Failure{"child emitted an empty blob"};
    if (blob_a != blob_b) throw Failure{"two process runs disagree bit-for-bit"};
    if (blob_a != local) throw Failure{"child blob differs from this process"};
    return std::to_string(local.size()) + " bytes of masks+logits bit-identical across "
           "2 fresh processes";
}

// Mean of the rescaled clipped vector over fresh masks must reproduce the
// unclipped vector to within kRescaleRelTol per element.
std::string criterion2() {
    constexpr std::size_t kDim = 1024;
    constexpr std::size_t kMasks = 100000;
    constexpr double kPClip = 0.1;
    constexpr double kRescaleRelTol = 0.01;  // 1% relative error, per element

    std::vector<float> v(kDim);
    RngStream rng(11);
    double norm = 0.0;
    for (auto& x : v) {
        x = float(rng.next_gaussian());
        norm += double(x) * double(x);
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x = float(double(x) / norm);  // unit vector

    std::vector<double> sum(kDim, 0.0);
    for (std::size_t k = 0; k < kMasks; ++k) {
        const uint64_t seed = derive_seed("acc2-" + std::to_string(k), "expectation.site");
        const ClipMask mask = generate_mask(seed, {kDim}, kPClip);
        const std::vector<float> clipped = apply_clip(v, mask, kPClip);
        for (std::size_t i = 0; i < kDim; ++i) sum[i] += double(clipped[i]);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < kDim; ++i) {
        const double mean = sum[i] / double(kMasks);
        worst = std::max(worst, std::abs(mean - double(v[i])) / std::abs(double(v[i])));
    }
    if (worst > kRescaleRelTol) {
        throw Failure{"max per-element relative error " + fmt(worst) + " exceeds " +
                      fmt(kRescaleRelTol)};
    }
    return "mean over " + std::to_string(kMasks) + " masks within " + fmt(worst) +
           " relative error (tolerance " + fmt(kRescaleRelTol) + ")";
}

// Empirical keep fraction of one million mask bits at p_clip = 0.1.
std::string criterion3() {
    constexpr std::size_t kBits = 1000000;
    constexpr double kLow = 0.899, kHigh = 0.901;  // pinned acceptance band

    const ClipMask mask = generate_mask(derive_seed("acc3", "keep.rate"), {kBits}, 0.1);
    std::size_t kept = 0;
    for (uint8_t b : mask.bits) kept += b;
    const double fraction = double(kept) / double(kBits);
    if (fraction < kLow || fraction > kHigh) {
        throw Failure{"keep fraction " + fmt(fraction) + " outside [" + fmt(kLow) + ", " +
                      fmt(kHigh) + "]"};
    }
    return "keep fraction " + fmt(fraction) + " within [" + fmt(kLow) + ", " + fmt(kHigh) + "]";
}

// The ensemble reward must equal the arithmetic mean of per-subnetwork
// losses and be invariant under tag order.
std::string criterion4() {
    constexpr double kMeanTol = 1e-12;

    const FrozenModel model = build_toy_model(c1_config(), 42);
    const FewShotDataset data = gen_synthetic_task(3, 4, 32, 6, 17);
    PromptEmbedding prompt;
    prompt.values = MatF(3, 16);
    RngStream rng(13);
    for (auto& v : prompt.values.data()) v = float(rng.next_gaussian() * 0.2);

    const FitnessFunction fn{FitnessKind::hinge, 2.0};
    const FitnessReport r =
        evaluate_prompt(model, data, prompt, {"e", "a", "c"}, 0.2, fn, "acc4");
    double mean = 0.0;
    for (double l : r.per_subnetwork_loss) mean += l;
    mean /= double(r.per_subnetwork_loss.size());
    const double diff = std::abs(r.mean_loss - mean);
    if (diff > kMeanTol) {
        throw Failure{"mean_loss deviates from the per-subnetwork average by " + fmt(diff)};
    }

    const FitnessReport p =
        evaluate_prompt(model, data, prompt, {"c", "e", "a"}, 0.2, fn, "acc4");
    if (p.mean_loss != r.mean_loss || p.per_subnetwork_loss != r.per_subnetwork_loss ||
        p.accuracy != r.accuracy) {
        throw Failure{"reward changed under a permutation of subnetwork tags"};
    }
    return "ensemble mean within " + fmt(diff) + " of the per-subnetwork average, "
           "tag-order invariant";
}

// Optimizer oracle functions with pinned budgets, median over 5 seeds.
std::string criterion5() {
    constexpr double kSphereTol = 1e-10;   // within 5000 evaluations
    constexpr double kRosenTol = 1e-6;     // within 30000 evaluations
    constexpr std::size_t kLambda = 20;

    const auto sphere = [](const std::vector<double>& x) {
        double s = 0.0;
        for (double v : x) s += v * v;
        return s;
    };
    const auto rosenbrock = [](const std::vector<double>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i + 1 < x.size(); ++i) {
            s += 100.0 * (x[i + 1] - x[i] * x[i]) * (x[i + 1] - x[i] * x[i]) +
                 (1.0 - x[i]) * (1.0 - x[i]);
        }
        return s;
    };

    const auto minimize = [&](const std::function<double(const std::vector<double>&)>& f,
                              std::size_t dim, const std::vector<double>& m0,
                              std::size_t max_evals, uint64_t seed) {
        CmaState state = cma_init(dim, kLambda, 0.5, m0, seed);
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t evals = 0; evals + kLambda <= max_evals; evals += kLambda) {
            const std::vector<IntrinsicVector> candidates = cma_ask(state);
            std::vector<double> fitness(candidates.size());
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                fitness[i] = f(candidates[i].values);
                best = std::min(best, fitness[i]);
            }
            cma_tell(state, candidates, fitness);
        }
        return best;
    };

    std::vector<double> sphere_best, rosen_best;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        sphere_best.push_back(minimize(sphere, 20, std::vector<double>(20, 0.5), 5000, seed));
        rosen_best.push_back(minimize(rosenbrock, 5, std::vector<double>(5, 0.0), 30000, seed));
    }
    const double sphere_med = median(sphere_best);
    const double rosen_med = median(rosen_best);
    if (sphere_med > kSphereTol) {
        throw Failure{"sphere d=20 median " + fmt(sphere_med) + " above " + fmt(kSphereTol) +
                      " after 5000 evaluations"};
    }
    if (rosen_med > kRosenTol) {
        throw Failure{"rosenbrock d=5 median " + fmt(rosen_med) + " above " + fmt(kRosenTol) +
                      " after 30000 evaluations"};
    }
    return "sphere median " + fmt(sphere_med) + " <= " + fmt(kSphereTol) +
           ", rosenbrock median " + fmt(rosen_med) + " <= " + fmt(kRosenTol) + " (5 seeds)";
}

// End-to-end recovery of the planted optimum at the reference settings.
std::string criterion6() {
    constexpr double kDevBar = 0.95;  // median over 3 seeds; train must hit 1.0

    RunConfig cfg;
    cfg.task = "planted";
    cfg.num_classes = 4;
    cfg.emb_dim = 32;
    cfg.layers = 1;
    cfg.vocab_size = 64;
    cfg.max_seq = 32;
    cfg.seq_len = 8;
    cfg.samples_per_class = 32;
    cfg.shots = 16;
    cfg.intrinsic_dim = 50;
    cfg.prompt_len = 10;
    cfg.population = 20;
    cfg.steps = 300;
    cfg.subnetworks = 5;
    cfg.clip_ratio = 0.1;
    cfg.fitness = "hinge";
    cfg.margin = 2.0;
    cfg.prompt_init = "zeros";
    cfg.sigma0 = 1.0;
    cfg.stop_train_accuracy = 1.0;
    cfg.stop_dev_accuracy = kDevBar;
    cfg.threads = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 8);

    std::vector<double> train_acc, dev_acc;
    std::string gens;
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        cfg.seed = seed;
        PreparedRun run = prepare_run(cfg);
        if (run.attainable_accuracy != 1.0) {
            throw Failure{"planted construction reports attainable accuracy " +
                          fmt(run.attainable_accuracy)};
        }
        LocalEvaluator evaluator(run.model, run.train, run.dev);
        const TuneResult result = tune(evaluator, run.p0, run.w, run.tune_config);
        if (result.aborted) throw Failure{"tuning aborted: " + result.error};
        train_acc.push_back(result.best_train_accuracy);
        dev_acc.push_back(result.best_dev_accuracy);
        if (!gens.empty()) gens += "/";
        gens += std::to_string(result.history.size());
    }
    const double train_med = median(train_acc);
    const double dev_med = median(dev_acc);
    if (train_med != 1.0) {
        throw Failure{"median training accuracy " + fmt(train_med) + " != 1.0 within 300 "
                      "generations (per-seed generations " + gens + ")"};
    }
    if (dev_med < kDevBar) {
        throw Failure{"median dev accuracy " + fmt(dev_med) + " below " + fmt(kDevBar)};
    }
    return "median train accuracy 1.0, median dev accuracy " + fmt(dev_med) +
           " (generations " + gens + ", 3 seeds)";
}

// Re-evaluating one fixed prompt: zero reward variance with pinned masks,
// positive with fresh masks.
std::string criterion7() {
    constexpr std::size_t kReps = 20;

    const FrozenModel model = build_toy_model(c1_config(), 42);
    const FewShotDataset data = gen_synthetic_task(3, 4, 32, 6, 17);
    PromptEmbedding prompt;
    prompt.values = MatF(3, 16);
    RngStream rng(19);
    for (auto& v : prompt.values.data()) v = float(rng.next_gaussian() * 0.2);
    const FitnessFunction fn{FitnessKind::hinge, 2.0};

    const auto variance = [](const std::vector<double>& xs) {
        double m = 0.0;
        for (double x : xs) m += x;
        m /= double(xs.size());
        double v = 0.0;
        for (double x : xs) v += (x - m) * (x - m);
        return v / double(xs.size() - 1);
    };

    std::vector<double> static_r, dynamic_r;
    for (std::size_t rep = 0; rep < kReps; ++rep) {
        std::vector<std::string> pinned, fresh;
        for (std::size_t j = 0; j < 5; ++j) {
            pinned.push_back("net-" + std::to_string(j));
            fresh.push_back("rep" + std::to_string(rep) + "-" + std::to_string(j));
        }
        static_r.push_back(evaluate_prompt(model, data, prompt, pinned, 0.1, fn).mean_loss);
        dynamic_r.push_back(evaluate_prompt(model, data, prompt, fresh, 0.1, fn).mean_loss);
    }
    const double vs = variance(static_r);
    const double vd = variance(dynamic_r);
    if (vs != 0.0) throw Failure{"static-mode reward variance " + fmt(vs) + " != 0"};
    if (!(vd > 0.0)) throw Failure{"dynamic-mode reward variance " + fmt(vd) + " not > 0"};
    return "variance over " + std::to_string(kReps) + " re-evaluations: static 0, dynamic " +
           fmt(vd);
}

// Both agents must beat the z = 0 baseline at the same budget; their
// relative ranking is reported in a CSV, not asserted.
std::string criterion8() {
    RunConfig cfg;
    cfg.task = "planted";
    cfg.num_classes = 2;
    cfg.emb_dim = 16;
    cfg.layers = 1;
    cfg.vocab_size = 64;
    cfg.max_seq = 32;
    cfg.seq_len = 6;
    cfg.samples_per_class = 16;
    cfg.shots = 4;
    cfg.intrinsic_dim = 16;
    cfg.prompt_len = 4;
    cfg.population = 8;
    cfg.steps = 30;
    cfg.subnetworks = 3;
    cfg.prompt_init = "zeros";
    cfg.seed = 11;

    PreparedRun run = prepare_run(cfg);
    LocalEvaluator evaluator(run.model, run.train, run.dev);

    std::vector<std::string> tags;
    for (std::size_t j = 0; j < cfg.subnetworks; ++j) tags.push_back("net-" + std::to_string(j));
    const double baseline = evaluator
                                .score(Split::train, run.p0, tags, cfg.clip_ratio,
                                       run.tune_config.fitness, "baseline")
                                .mean_loss;

    std::string csv = "agent,best_fitness,baseline_fitness,budget_used\n";
    std::vector<std::pair<std::string, double>> bests;
    for (AgentKind agent : {AgentKind::cma, AgentKind::random_search}) {
        TuneConfig tc = run.tune_config;
        tc.agent = agent;
        const TuneResult result = tune(evaluator, run.p0, run.w, tc);
        if (result.aborted) throw Failure{"tuning aborted: " + result.error};
        bests.emplace_back(agent_name(agent), result.best_train_fitness);
        csv += std::string(agent_name(agent)) + "," + fmt(result.best_train_fitness) + "," +
               fmt(baseline) + "," + std::to_string(result.budget_used) + "\n";
    }

    const fs::path csv_path = scratch_dir() / "agent_comparison.csv";
    std::ofstream out(csv_path, std::ios::binary);
    out << csv;
    if (!out.good()) throw Failure{"cannot write " + csv_path.string()};

    for (const auto& [name, best] : bests) {
        if (!(best < baseline)) {
            throw Failure{std::string(name) + " best fitness " + fmt(best) +
                          " does not improve on the z=0 baseline " + fmt(baseline)};
        }
    }
    const bool cma_leads = bests[0].second < bests[1].second;
    return "both agents beat baseline " + fmt(baseline) + " at equal budget (" +
           bests[0].first + " " + fmt(bests[0].second) + (cma_leads ? " < " : " >= ") +
           bests[1].first + " " + fmt(bests[1].second) + "), csv: " + csv_path.string();
}

// The tuning trajectory must not depend on which side of the wire the
// evaluator lives on.
std::string criterion9() {
    constexpr std::size_t kSteps = 100;
    constexpr double kFitnessTol = 1e-9;

    ModelConfig mc;
    mc.vocab_size = 32;
    mc.emb_dim = 16;
    mc.layers = 1;
    mc.heads = 2;
    mc.ffn_dim = 32;
    mc.max_seq = 16;
    mc.num_classes = 2;
    mc.dropout_sites = ModelConfig::all_dropout_sites(1);
    const FrozenModel model = build_toy_model(mc, 5);

    const FewShotDataset pool = gen_synthetic_task(2, 8, 32, 4, 21);
    const auto [train, dev] = sample_few_shot(pool, 4, 3);

    PromptEmbedding p0;
    p0.values = MatF(2, 16);
    const Projection w = init_projection(8, 32, 44);

    TuneConfig tc;
    tc.agent = AgentKind::cma;
    tc.intrinsic_dim = 8;
    tc.population = 6;
    tc.steps = kSteps;
    tc.subnetworks = 2;
    tc.p_clip = 0.1;
    tc.fitness = FitnessFunction{FitnessKind::hinge, 2.0};
    tc.sigma0 = 1.0;
    tc.seed = 31;

    LocalEvaluator local(model, train, dev);
    const TuneResult lr = tune(local, p0, w, tc);

    ModelService service(model);
    const int port = service.start();
    if (port <= 0) throw Failure{"service failed to bind an ephemeral port"};
    TuneResult rr;
    try {
        RemoteEvaluator remote("127.0.0.1", port, train, dev);
        rr = tune(remote, p0, w, tc);
    } catch (...) {
        service.stop();
        throw;
    }
    service.stop();

    if (lr.aborted || rr.aborted) throw Failure{"a tuning run aborted"};
    if (lr.history.size() != kSteps || rr.history.size() != kSteps) {
        throw Failure{"expected " + std::to_string(kSteps) + " generations, got " +
                      std::to_string(lr.history.size()) + " local / " +
                      std::to_string(rr.history.size()) + " remote"};
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < kSteps; ++i) {
        const HistoryRecord& l = lr.history[i];
        const HistoryRecord& r = rr.history[i];
        worst = std::max(worst, std::abs(l.step_best_fitness - r.step_best_fitness));
        if (l.step_best_index != r.step_best_index) {
            throw Failure{"best-candidate index diverges at generation " +
                          std::to_string(i + 1)};
        }
    }
    if (worst > kFitnessTol) {
        throw Failure{"per-step best fitness diverges by " + fmt(worst) + " (tolerance " +
                      fmt(kFitnessTol) + ")"};
    }
    return std::to_string(kSteps) + " generations: identical best indices, max fitness "
           "difference " + fmt(worst) + " <= " + fmt(kFitnessTol);
}

// Shipped defaults: reference hyperparameters, frozen as a golden file.
std::string criterion10() {
    const RunConfig d;
    if (d.intrinsic_dim != 500) throw Failure{"default intrinsic_dim != 500"};
    if (d.prompt_len != 50) throw Failure{"default prompt_len != 50"};
    if (d.clip_ratio != 0.1) throw Failure{"default clip_ratio != 0.1"};
    if (d.subnetworks != 5) throw Failure{"default subnetworks != 5"};
    if (d.population != 20) throw Failure{"default population != 20"};
    if (d.fitness != "hinge" || d.margin != 2.0) {
        throw Failure{"default fitness is not hinge with margin 2"};
    }
    const fs::path golden = fs::path(CLIPTUNE_GOLDEN_DIR) / "default_config.json";
    if (d.to_json() != read_file(golden)) {
        throw Failure{"serialized defaults differ from " + golden.string()};
    }
    return "defaults d=500, prompt_len=50, p_clip=0.1, N=5, population=20, hinge margin 2 "
           "match the golden snapshot";
}

struct Criterion {
    int id;
    const char* title;
    std::function<std::string()> run;
};

}  // namespace

int main(int argc, char** argv) {
    if (argc == 3 && std::string(argv[1]) == "--emit-determinism") {
        return emit_determinism(argv[2]);
    }
    g_self = self_path(argv[0]);

    const std::vector<Criterion> criteria{
        {1, "static-mask cross-process determinism", criterion1},
        {2, "inverted-dropout rescaling expectation", criterion2},
        {3, "mask keep-rate at p_clip 0.1", criterion3},
        {4, "ensemble reward equals per-subnetwork mean", criterion4},
        {5, "optimizer oracle functions", criterion5},
        {6, "planted-optimum recovery end to end", criterion6},
        {7, "static vs dynamic reward variance", criterion7},
        {8, "agent comparison beats the z=0 baseline", criterion8},
        {9, "wire-level tuning equivalence", criterion9},
        {10, "default configuration fidelity", criterion10},
    };

    int failures = 0;
    for (const auto& criterion : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string status, detail;
        try {
            detail = criterion.run();
            status = "PASS";
        } catch (const Failure& f) {
            detail = f.reason;
            status = "FAIL";
            ++failures;
        } catch (const std::exception& e) {
            detail = std::string("unexpected error: ") + e.what();
            status = "FAIL";
            ++failures;
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %2d %s %-46s %s [%.1fs]\n", criterion.id, status.c_str(),
                    criterion.title, detail.c_str(), secs);
        std::fflush(stdout);
    }
    if (failures > 0) {
        std::printf("acceptance: %d of %zu criteria failed\n", failures, criteria.size());
        return 1;
    }
    std::printf("acceptance: all %zu criteria passed\n", criteria.size());
    return 0;
}
