#include "cliptune/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cliptune/binio.hpp"
#include "cliptune/model.hpp"
#include "cliptune/rng.hpp"
#include "cliptune/sha1.hpp"

namespace cliptune {

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::test: return "test";
    }
    return "?";
}

void FewShotDataset::validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].label >= num_classes) {
            throw std::invalid_argument("sample " + std::to_string(i) + " has label " +
                                        std::to_string(samples[i].label) + " >= num_classes " +
                                        std::to_string(num_classes));
        }
    }
}

std::string FewShotDataset::fingerprint() const {
    std::vector<uint8_t> bytes;
    binio::put_u32(bytes, uint32_t(num_classes));
    binio::put_u32(bytes, uint32_t(samples.size()));
    for (const auto& s : samples) {
        binio::put_u32(bytes, s.label);
        binio::put_u32(bytes, uint32_t(s.tokens.size()));
        for (uint32_t t : s.tokens) binio::put_u32(bytes, t);
    }
    return Sha1::hex(Sha1::hash(bytes.data(), bytes.size()));
}

std::pair<FewShotDataset, FewShotDataset> sample_few_shot(const FewShotDataset& full,
                                                          std::size_t k, uint64_t seed) {
    if (k == 0) throw std::invalid_argument("sample_few_shot: k must be positive");
    full.validate();
    std::vector<std::vector<std::size_t>> by_class(full.num_classes);
    for (std::size_t i = 0; i < full.samples.size(); ++i) {
        by_class[full.samples[i].label].push_back(i);
    }
    for (std::size_t c = 0; c < full.num_classes; ++c) {
        if (by_class[c].size() < 2 * k) {
            throw std::invalid_argument("class " + std::to_string(c) + " has " +
                                        std::to_string(by_class[c].size()) + " samples, need " +
                                        std::to_string(2 * k));
        }
    }

    RngStream rng(seed);
    FewShotDataset train, dev;
    train.num_classes = dev.num_classes = full.num_classes;
    train.split = Split::train;
    dev.split = Split::dev;
    const std::string tail = "#k=" + std::to_string(k) + ",seed=" + std::to_string(seed);
    train.provenance = full.provenance + tail;
    dev.provenance = full.provenance + tail;
    for (std::size_t c = 0; c < full.num_classes; ++c) {
        auto& idx = by_class[c];
        // Fisher-Yates with the shared stream; index via floor(u*n) so no
        // modulo bias sneaks in.
        for (std::size_t i = idx.size() - 1; i > 0; --i) {
            const std::size_t j = std::size_t(rng.next_uniform() * double(i + 1));
            std::swap(idx[i], idx[j]);
        }
        for (std::size_t i = 0; i < k; ++i) train.samples.push_back(full.samples[idx[i]]);
        for (std::size_t i = k; i < 2 * k; ++i) dev.samples.push_back(full.samples[idx[i]]);
    }
    return {std::move(train), std::move(dev)};
}

FewShotDataset gen_synthetic_task(std::size_t num_classes, std::size_t samples_per_class,
                                  std::size_t vocab_size, std::size_t seq_len, uint64_t seed,
                                  double separability) {
    if (num_classes == 0 || samples_per_class == 0 || seq_len == 0) {
        throw std::invalid_argument("gen_synthetic_task: counts must be positive");
    }
    if (vocab_size < num_classes * 2) {
        throw std::invalid_argument("gen_synthetic_task: vocab_size " +
                                    std::to_string(vocab_size) + " < 2 * num_classes");
    }
    if (!(separability >= 0.0 && separability <= 1.0)) {
        throw std::invalid_argument("gen_synthetic_task: separability outside [0, 1]");
    }
    const std::size_t content = vocab_size - kNumReservedTokens;
    if (content < num_classes) {
        throw std::invalid_argument("gen_synthetic_task: vocabulary too small for class blocks");
    }
    const std::size_t block = content / num_classes;

    RngStream rng(seed);
    FewShotDataset ds;
    ds.num_classes = num_classes;
    ds.split = Split::test;
    ds.provenance = "synthetic:seed=" + std::to_string(seed) +
                    ",classes=" + std::to_string(num_classes) +
                    ",per_class=" + std::to_string(samples_per_class);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t lo = kNumReservedTokens + c * block;
        for (std::size_t s = 0; s < samples_per_class; ++s) {
            Sample sample;
            sample.label = uint32_t(c);
            sample.tokens.reserve(seq_len);
            for (std::size_t t = 0; t < seq_len; ++t) {
                const bool in_class = rng.next_uniform() < separability;
                std::size_t id;
                if (in_class) {
                    id = lo + std::size_t(rng.next_uniform() * double(block));
                } else {
                    id = kNumReservedTokens + std::size_t(rng.next_uniform() * double(content));
                }
                sample.tokens.push_back(uint32_t(id));
            }
            ds.samples.push_back(std::move(sample));
        }
    }
    return ds;
}

Vocab load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open vocabulary file");
    Vocab vocab;
    std::string line;
    uint32_t next_id = uint32_t(kNumReservedTokens);
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (vocab.emplace(line, next_id).second) ++next_id;
    }
    return vocab;
}

FewShotDataset load_tsv(const std::string& path, const Vocab& vocab,
                        const std::map<std::string, uint32_t>* label_map) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open file");

    FewShotDataset ds;
    ds.provenance = path;
    std::map<std::string, uint32_t> labels;  // first-appearance indexing
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected text<TAB>label");
        }
        const std::string text = line.substr(0, tab);
        const std::string label_str = line.substr(tab + 1);
        if (label_str.empty() || label_str.find('\t') != std::string::npos) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed label field");
        }

        Sample sample;
        std::istringstream words(text);
        std::string word;
        while (words >> word) {
            auto it = vocab.find(word);
            sample.tokens.push_back(it != vocab.end() ? it->second : uint32_t(kUnkTokenId));
        }
        if (label_map != nullptr) {
            auto it = label_map->find(label_str);
            if (it == label_map->end()) {
                throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                         ": label '" + label_str + "' not in label map");
            }
            sample.label = it->second;
        } else {
            auto [it, inserted] = labels.emplace(label_str, uint32_t(labels.size()));
            (void)inserted;
            sample.label = it->second;
        }
        ds.samples.push_back(std::move(sample));
    }
    if (ds.samples.empty()) {
        throw std::runtime_error(path + ": no data rows");
    }
    if (label_map != nullptr) {
        uint32_t max_label = 0;
        for (const auto& [name, id] : *label_map) {
            (void)name;
            max_label = std::max(max_label, id);
        }
        ds.num_classes = max_label + 1;
    } else {
        ds.num_classes = labels.size();
    }
    ds.validate();
    return ds;
}

}  // namespace cliptune
