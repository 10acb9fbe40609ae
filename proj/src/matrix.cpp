#include "cliptune/matrix.hpp"

#include <algorithm>
#include <cmath>

namespace cliptune {

std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) return {};
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

}  // namespace cliptune
