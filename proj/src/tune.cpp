#include "cliptune/tune.hpp"

#include <atomic>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "cliptune/cma.hpp"
#include "cliptune/textfmt.hpp"

namespace cliptune {

const char* agent_name(AgentKind a) {
    switch (a) {
        case AgentKind::cma: return "cma";
        case AgentKind::random_search: return "random";
    }
    return "?";
}

AgentKind agent_from_name(const std::string& name) {
    if (name == "cma") return AgentKind::cma;
    if (name == "random" || name == "random_search") return AgentKind::random_search;
    throw std::invalid_argument("unknown agent '" + name + "'");
}

LocalEvaluator::LocalEvaluator(const FrozenModel& model, FewShotDataset train,
                               FewShotDataset dev)
    : model_(model), train_(std::move(train)), dev_(std::move(dev)) {
    train_.validate();
    dev_.validate();
}

const FewShotDataset& LocalEvaluator::dataset(Split split) const {
    return split == Split::dev ? dev_ : train_;
}

FitnessReport LocalEvaluator::score(Split split, const PromptEmbedding& prompt,
                                    const std::vector<std::string>& tags, double p_clip,
                                    const FitnessFunction& fn,
                                    const std::string& candidate_id) {
    return evaluate_prompt(model_, dataset(split), prompt, tags, p_clip, fn, candidate_id);
}

std::string history_csv_header() {
    return "# cliptune history v1\n"
           "step,best_fitness,step_best_fitness,step_best_index,dev_accuracy,sigma,budget_used\n";
}

std::string history_csv(const std::vector<HistoryRecord>& history) {
    std::string out = history_csv_header();
    for (const auto& h : history) {
        out += std::to_string(h.step) + "," + format_double(h.best_fitness) + "," +
               format_double(h.step_best_fitness) + "," + std::to_string(h.step_best_index) +
               "," + format_double(h.dev_accuracy) + "," + format_double(h.sigma) + "," +
               std::to_string(h.budget_used) + "\n";
    }
    return out;
}

namespace {

struct Incumbent {
    bool valid = false;
    IntrinsicVector z;
    double train_fitness = std::numeric_limits<double>::infinity();
    double train_accuracy = 0.0;
    double dev_accuracy = 0.0;
};

// Evaluate all candidates, joining results in candidate order so the
// reduction is identical for any thread count.
void score_generation(Evaluator& evaluator, const PromptEmbedding& p0, const Projection& w,
                      const std::vector<IntrinsicVector>& candidates,
                      const std::vector<std::vector<std::string>>& tags, double p_clip,
                      const FitnessFunction& fn, std::size_t step, std::size_t threads,
                      std::vector<FitnessReport>& reports) {
    const std::size_t n = candidates.size();
    reports.assign(n, FitnessReport{});
    const auto score_one = [&](std::size_t i) {
        const PromptEmbedding prompt = compose_prompt(p0, candidates[i], w);
        const std::string id = "g" + std::to_string(step) + "-c" + std::to_string(i);
        reports[i] = evaluator.score(Split::train, prompt, tags[i], p_clip, fn, id);
    };
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) score_one(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    const std::size_t workers = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t wi = 0; wi < workers; ++wi) {
        pool.emplace_back([&] {
            while (!failed.load()) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    score_one(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    failed.store(true);
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

TuneResult tune(Evaluator& evaluator, const PromptEmbedding& p0, const Projection& w,
                const TuneConfig& config) {
    if (config.steps < 1) throw std::invalid_argument("tune: steps must be at least 1");
    if (config.population < 2) throw std::invalid_argument("tune: population must be at least 2");
    if (config.subnetworks < 1) {
        throw std::invalid_argument("tune: subnetworks must be at least 1");
    }
    if (!(config.p_clip >= 0.0 && config.p_clip < 1.0)) {
        throw std::invalid_argument("tune: p_clip outside [0, 1)");
    }
    if (w.d != config.intrinsic_dim) {
        throw std::invalid_argument("tune: projection.d " + std::to_string(w.d) +
                                    " != intrinsic_dim " + std::to_string(config.intrinsic_dim));
    }
    if (w.D != p0.values.size()) {
        throw std::invalid_argument("tune: projection.D does not match the base prompt");
    }
    config.fitness.validate();

    // mode=off scores the unclipped network; a single zero-ratio tag walks
    // the same code path and is exactly the identity.
    const bool off = config.mode == ClipMode::off;
    const double p_eff = off ? 0.0 : config.p_clip;
    std::vector<std::string> static_tags;
    const std::size_t n_tags = off ? 1 : config.subnetworks;
    for (std::size_t j = 0; j < n_tags; ++j) {
        static_tags.push_back("net-" + std::to_string(j));
    }
    std::size_t dynamic_draws = 0;

    CmaState cma;
    RandomSearchState rs;
    if (config.agent == AgentKind::cma) {
        cma = cma_init(config.intrinsic_dim, config.population, config.sigma0, {}, config.seed);
    } else {
        rs = random_search_init(config.intrinsic_dim, config.sigma0, config.seed);
    }

    TuneResult result;
    Incumbent incumbent;
    Incumbent best;  // by dev accuracy, train fitness tie-break
    double best_fitness = std::numeric_limits<double>::infinity();

    for (std::size_t step = 1; step <= config.steps; ++step) {
        std::vector<IntrinsicVector> candidates;
        if (config.agent == AgentKind::cma) {
            candidates = cma_ask(cma);
        } else {
            candidates.reserve(config.population);
            for (std::size_t i = 0; i < config.population; ++i) {
                candidates.push_back(random_search_propose(rs));
            }
        }

        std::vector<std::vector<std::string>> tags(candidates.size(), static_tags);
        if (config.mode == ClipMode::dynamic) {
            for (auto& per_candidate : tags) {
                for (auto& tag : per_candidate) {
                    tag = "dyn-" + std::to_string(dynamic_draws++);
                }
            }
        }

        std::vector<FitnessReport> reports;
        try {
            score_generation(evaluator, p0, w, candidates, tags, p_eff, config.fitness, step,
                             config.threads, reports);
        } catch (const std::exception& e) {
            result.aborted = true;
            result.error = e.what();
            break;
        }
        result.budget_used += candidates.size();

        std::vector<double> fitnesses(candidates.size());
        std::size_t step_best = 0;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            fitnesses[i] = reports[i].mean_loss;
            if (fitnesses[i] < fitnesses[step_best]) step_best = i;
        }

        if (config.agent == AgentKind::cma) {
            cma_tell(cma, candidates, fitnesses);
        } else {
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                random_search_update(rs, candidates[i], fitnesses[i]);
            }
        }

        if (fitnesses[step_best] < best_fitness) {
            best_fitness = fitnesses[step_best];
            incumbent.valid = true;
            incumbent.z = candidates[step_best];
            incumbent.train_fitness = fitnesses[step_best];
            incumbent.train_accuracy = reports[step_best].accuracy;
            const PromptEmbedding prompt = compose_prompt(p0, incumbent.z, w);
            FitnessReport dev;
            try {
                dev = evaluator.score(Split::dev, prompt, {"dev"}, 0.0, config.fitness,
                                      "g" + std::to_string(step) + "-incumbent");
            } catch (const std::exception& e) {
                result.aborted = true;
                result.error = e.what();
                break;
            }
            ++result.dev_evals;
            incumbent.dev_accuracy = dev.accuracy;
            if (!best.valid || incumbent.dev_accuracy > best.dev_accuracy ||
                (incumbent.dev_accuracy == best.dev_accuracy &&
                 incumbent.train_fitness < best.train_fitness)) {
                best = incumbent;
            }
        }

        HistoryRecord rec;
        rec.step = step;
        rec.best_fitness = best_fitness;
        rec.step_best_fitness = fitnesses[step_best];
        rec.step_best_index = step_best;
        rec.dev_accuracy = incumbent.dev_accuracy;
        rec.sigma = config.agent == AgentKind::cma ? cma.sigma : rs.sigma;
        rec.budget_used = result.budget_used;
        result.history.push_back(rec);

        if (incumbent.valid && incumbent.train_accuracy >= config.stop_train_accuracy &&
            incumbent.dev_accuracy >= config.stop_dev_accuracy) {
            break;
        }
    }

    if (best.valid) {
        result.best_z = best.z;
        result.best_dev_accuracy = best.dev_accuracy;
        result.best_train_fitness = best.train_fitness;
        result.best_train_accuracy = best.train_accuracy;
    }
    if (config.agent == AgentKind::cma) result.repair_count = cma.repair_count;
    return result;
}

}  // namespace cliptune
