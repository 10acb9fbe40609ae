#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cliptune/dataset.hpp"
#include "cliptune/model.hpp"
#include "cliptune/prompting.hpp"

namespace cliptune {

enum class FitnessKind { hinge, cross_entropy };

const char* fitness_kind_name(FitnessKind k);
FitnessKind fitness_kind_from_name(const std::string& name);

struct FitnessFunction {
    FitnessKind kind = FitnessKind::hinge;
    double margin = 2.0;  // hinge only

    void validate() const;
};

// One candidate's reward snapshot. mean_loss is the optimization objective;
// accuracy and macro_f1 always come from the unclipped pass.
struct FitnessReport {
    std::vector<double> per_subnetwork_loss;  // sorted-tag order
    double mean_loss = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::string candidate_id;

    static std::string csv_header();
    std::string csv_row() const;
};

// Sum over non-true classes of max(0, margin - (logits[label] - logits[j])).
double hinge_loss(const std::vector<float>& logits, std::size_t label, double margin);

// -log softmax(logits)[label], evaluated via log-sum-exp.
double cross_entropy(const std::vector<float>& logits, std::size_t label);

double sample_loss(const std::vector<float>& logits, std::size_t label,
                   const FitnessFunction& fn);

// argmax with ties broken toward the lowest class index.
std::size_t predict(const std::vector<float>& logits);

// (accuracy, macro F1); classes absent from both lists are excluded from F1.
std::pair<double, double> metrics(const std::vector<uint32_t>& predictions,
                                  const std::vector<uint32_t>& labels);

// Ensemble fitness: per tag, the mean sample loss under that tag's static
// masks; mean_loss averages the tags. Aggregation runs in sorted-tag and
// dataset order so the result is a pure function of the inputs.
FitnessReport evaluate_prompt(const FrozenModel& model, const FewShotDataset& data,
                              const PromptEmbedding& prompt,
                              const std::vector<std::string>& tags, double p_clip,
                              const FitnessFunction& fn, const std::string& candidate_id = "");

}  // namespace cliptune
