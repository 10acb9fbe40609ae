#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cliptune/clipping.hpp"
#include "cliptune/dataset.hpp"
#include "cliptune/fitness.hpp"
#include "cliptune/model.hpp"
#include "cliptune/prompting.hpp"

namespace cliptune {

enum class AgentKind { cma, random_search };

const char* agent_name(AgentKind a);
AgentKind agent_from_name(const std::string& name);

// Where candidate prompts get scored. The local implementation runs the
// model in-process; the service module provides a remote one with identical
// semantics, so the tuning loop never knows which side of the wire it is on.
class Evaluator {
public:
    virtual ~Evaluator() = default;

    // evaluate_prompt against the split's dataset. Must be safe to call from
    // several threads at once.
    virtual FitnessReport score(Split split, const PromptEmbedding& prompt,
                                const std::vector<std::string>& tags, double p_clip,
                                const FitnessFunction& fn, const std::string& candidate_id) = 0;
};

class LocalEvaluator : public Evaluator {
public:
    LocalEvaluator(const FrozenModel& model, FewShotDataset train, FewShotDataset dev);

    FitnessReport score(Split split, const PromptEmbedding& prompt,
                        const std::vector<std::string>& tags, double p_clip,
                        const FitnessFunction& fn, const std::string& candidate_id) override;

    const FewShotDataset& dataset(Split split) const;

private:
    const FrozenModel& model_;
    FewShotDataset train_;
    FewShotDataset dev_;
};

struct TuneConfig {
    AgentKind agent = AgentKind::cma;
    std::size_t intrinsic_dim = 500;
    std::size_t population = 20;  // candidates per generation
    std::size_t steps = 10000;    // generations
    std::size_t subnetworks = 5;  // ensemble size N
    double p_clip = 0.1;
    ClipMode mode = ClipMode::static_;
    FitnessFunction fitness{};
    double sigma0 = 1.0;
    uint64_t seed = 0;
    std::size_t threads = 1;
    // Optional early stop once the incumbent clears both bars; values above
    // 1 leave it disabled.
    double stop_train_accuracy = 2.0;
    double stop_dev_accuracy = 2.0;
};

struct HistoryRecord {
    std::size_t step = 0;             // 1-based generation index
    double best_fitness = 0.0;        // best-so-far training fitness
    double step_best_fitness = 0.0;   // best candidate of this generation
    std::size_t step_best_index = 0;  // its position within the generation
    double dev_accuracy = 0.0;        // incumbent's dev accuracy
    double sigma = 0.0;               // current search step size
    std::size_t budget_used = 0;      // cumulative training evaluations
};

std::string history_csv_header();
std::string history_csv(const std::vector<HistoryRecord>& history);

struct TuneResult {
    IntrinsicVector best_z;  // best incumbent by dev accuracy, fitness tie-break
    double best_dev_accuracy = 0.0;
    double best_train_fitness = std::numeric_limits<double>::infinity();
    double best_train_accuracy = 0.0;
    std::vector<HistoryRecord> history;
    std::size_t budget_used = 0;
    std::size_t dev_evals = 0;
    std::size_t repair_count = 0;
    bool aborted = false;
    std::string error;
};

// Ask -> compose -> ensemble-score -> tell, with the incumbent re-checked on
// the dev split (clipping off) whenever training fitness improves. The
// returned history is a pure function of (config, datasets, p0, w).
TuneResult tune(Evaluator& evaluator, const PromptEmbedding& p0, const Projection& w,
                const TuneConfig& config);

}  // namespace cliptune
