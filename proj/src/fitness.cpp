#include "cliptune/fitness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cliptune/textfmt.hpp"

namespace cliptune {

const char* fitness_kind_name(FitnessKind k) {
    switch (k) {
        case FitnessKind::hinge: return "hinge";
        case FitnessKind::cross_entropy: return "ce";
    }
    return "?";
}

FitnessKind fitness_kind_from_name(const std::string& name) {
    if (name == "hinge") return FitnessKind::hinge;
    if (name == "ce" || name == "cross_entropy") return FitnessKind::cross_entropy;
    throw std::invalid_argument("unknown fitness kind '" + name + "'");
}

void FitnessFunction::validate() const {
    if (kind == FitnessKind::hinge && !(margin > 0.0)) {
        throw std::invalid_argument("hinge margin must be positive");
    }
}

std::string FitnessReport::csv_header() {
    return "candidate_id,mean_loss,accuracy,macro_f1,subnetworks,per_subnetwork_loss";
}

std::string FitnessReport::csv_row() const {
    std::string row = candidate_id + "," + format_double(mean_loss) + "," +
                      format_double(accuracy) + "," + format_double(macro_f1) + "," +
                      std::to_string(per_subnetwork_loss.size()) + ",";
    for (std::size_t i = 0; i < per_subnetwork_loss.size(); ++i) {
        if (i) row += ';';
        row += format_double(per_subnetwork_loss[i]);
    }
    return row;
}

double hinge_loss(const std::vector<float>& logits, std::size_t label, double margin) {
    if (label >= logits.size()) {
        throw std::invalid_argument("hinge_loss: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(logits.size()) +
                                    " logits");
    }
    if (!(margin > 0.0)) throw std::invalid_argument("hinge_loss: margin must be positive");
    const double target = logits[label];
    double loss = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (j == label) continue;
        loss += std::max(0.0, margin - (target - double(logits[j])));
    }
    return loss;
}

double cross_entropy(const std::vector<float>& logits, std::size_t label) {
    if (label >= logits.size()) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(logits.size()) +
                                    " logits");
    }
    double max_logit = logits[0];
    for (float v : logits) max_logit = std::max(max_logit, double(v));
    double sum = 0.0;
    for (float v : logits) sum += std::exp(double(v) - max_logit);
    return std::log(sum) + max_logit - double(logits[label]);
}

double sample_loss(const std::vector<float>& logits, std::size_t label,
                   const FitnessFunction& fn) {
    return fn.kind == FitnessKind::hinge ? hinge_loss(logits, label, fn.margin)
                                         : cross_entropy(logits, label);
}

std::size_t predict(const std::vector<float>& logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j) {
        if (logits[j] > logits[best]) best = j;
    }
    return best;
}

std::pair<double, double> metrics(const std::vector<uint32_t>& predictions,
                                  const std::vector<uint32_t>& labels) {
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("metrics: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(labels.size()) +
                                    " labels");
    }
    if (labels.empty()) throw std::invalid_argument("metrics: empty inputs");

    std::size_t correct = 0;
    uint32_t max_class = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (predictions[i] == labels[i]) ++correct;
        max_class = std::max({max_class, predictions[i], labels[i]});
    }
    const double accuracy = double(correct) / double(labels.size());

    double f1_sum = 0.0;
    std::size_t f1_classes = 0;
    for (uint32_t c = 0; c <= max_class; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const bool pred_c = predictions[i] == c;
            const bool true_c = labels[i] == c;
            if (pred_c && true_c) ++tp;
            if (pred_c && !true_c) ++fp;
            if (!pred_c && true_c) ++fn;
        }
        if (tp + fp + fn == 0) continue;  // class absent everywhere
        const double precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
        const double recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
        const double f1 =
            precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        f1_sum += f1;
        ++f1_classes;
    }
    return {accuracy, f1_classes ? f1_sum / double(f1_classes) : 0.0};
}

FitnessReport evaluate_prompt(const FrozenModel& model, const FewShotDataset& data,
                              const PromptEmbedding& prompt,
                              const std::vector<std::string>& tags, double p_clip,
                              const FitnessFunction& fn, const std::string& candidate_id) {
    if (tags.empty()) throw std::invalid_argument("evaluate_prompt: tags must be non-empty");
    if (data.samples.empty()) throw std::invalid_argument("evaluate_prompt: empty dataset");
    fn.validate();
    data.validate();

    std::vector<std::string> sorted_tags = tags;
    std::sort(sorted_tags.begin(), sorted_tags.end());

    FitnessReport report;
    report.candidate_id = candidate_id;
    report.per_subnetwork_loss.reserve(sorted_tags.size());
    for (const auto& tag : sorted_tags) {
        ClipSpec clip{tag, p_clip, ClipMode::static_};
        double sum = 0.0;
        for (const auto& sample : data.samples) {
            const ForwardResult res = forward(model, prompt, sample.tokens, clip);
            sum += sample_loss(res.logits, sample.label, fn);
        }
        report.per_subnetwork_loss.push_back(sum / double(data.samples.size()));
    }
    double total = 0.0;
    for (double l : report.per_subnetwork_loss) total += l;
    report.mean_loss = total / double(report.per_subnetwork_loss.size());

    ClipSpec off{"", 0.0, ClipMode::off};
    std::vector<uint32_t> predictions, labels;
    predictions.reserve(data.samples.size());
    labels.reserve(data.samples.size());
    for (const auto& sample : data.samples) {
        const ForwardResult res = forward(model, prompt, sample.tokens, off);
        predictions.push_back(uint32_t(predict(res.logits)));
        labels.push_back(sample.label);
    }
    const auto [accuracy, macro_f1] = metrics(predictions, labels);
    report.accuracy = accuracy;
    report.macro_f1 = macro_f1;
    return report;
}

}  // namespace cliptune
