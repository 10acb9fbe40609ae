#include "cliptune/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cliptune/binio.hpp"
#include "cliptune/rng.hpp"
#include "cliptune/sha1.hpp"

namespace cliptune {
namespace {

constexpr char kWeightsMagic[4] = {'P', 'F', 'W', 'T'};
constexpr uint16_t kWeightsVersion = 1;

std::string layer_prefix(std::size_t i) { return "enc." + std::to_string(i) + "."; }

// Expected tensor name -> shape for a config. Doubles as the schema check
// applied to every constructed model.
std::map<std::string, std::pair<std::size_t, std::size_t>> expected_tensors(
    const ModelConfig& c) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> shapes;
    shapes["emb.tok"] = {c.vocab_size, c.emb_dim};
    shapes["emb.pos"] = {c.max_seq, c.emb_dim};
    for (std::size_t i = 0; i < c.layers; ++i) {
        const std::string p = layer_prefix(i);
        shapes[p + "ln1.gamma"] = {1, c.emb_dim};
        shapes[p + "ln1.beta"] = {1, c.emb_dim};
        shapes[p + "attn.wq"] = {c.emb_dim, c.emb_dim};
        shapes[p + "attn.wk"] = {c.emb_dim, c.emb_dim};
        shapes[p + "attn.wv"] = {c.emb_dim, c.emb_dim};
        shapes[p + "attn.wo"] = {c.emb_dim, c.emb_dim};
        shapes[p + "ln2.gamma"] = {1, c.emb_dim};
        shapes[p + "ln2.beta"] = {1, c.emb_dim};
        shapes[p + "ffn.w1"] = {c.ffn_dim, c.emb_dim};
        shapes[p + "ffn.w2"] = {c.emb_dim, c.ffn_dim};
    }
    shapes["final_ln.gamma"] = {1, c.emb_dim};
    shapes["final_ln.beta"] = {1, c.emb_dim};
    shapes["head.w"] = {c.num_classes, c.emb_dim};
    return shapes;
}

// y = x * W^T, i.e. W rows are output units. Double accumulation.
MatF linear(const MatF& x, const MatF& w) {
    if (x.cols() != w.cols()) {
        throw std::invalid_argument("linear shape mismatch: " + std::to_string(x.rows()) + "x" +
                                    std::to_string(x.cols()) + " vs weight " +
                                    std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    }
    MatF out(x.rows(), w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const float* xi = x.row_ptr(i);
        for (std::size_t o = 0; o < w.rows(); ++o) {
            const float* wo = w.row_ptr(o);
            double acc = 0.0;
            for (std::size_t k = 0; k < x.cols(); ++k) {
                acc += double(xi[k]) * double(wo[k]);
            }
            out.at(i, o) = float(acc);
        }
    }
    return out;
}

constexpr double kLnEps = 1e-5;

MatF layer_norm(const MatF& x, const MatF& gamma, const MatF& beta) {
    MatF out(x.rows(), x.cols());
    const std::size_t n = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const float* row = x.row_ptr(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= double(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= double(n);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t j = 0; j < n; ++j) {
            out.at(i, j) =
                float((row[j] - mean) * inv * double(gamma.at(0, j)) + double(beta.at(0, j)));
        }
    }
    return out;
}

float gelu(float x) {
    return float(0.5 * double(x) * (1.0 + std::erf(double(x) / std::sqrt(2.0))));
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < kNumReservedTokens) {
        throw std::invalid_argument("vocab_size must be at least " +
                                    std::to_string(kNumReservedTokens));
    }
    if (emb_dim == 0 || layers == 0 || heads == 0 || ffn_dim == 0 || max_seq == 0 ||
        num_classes == 0) {
        throw std::invalid_argument("model config dimensions must be positive");
    }
    if (emb_dim % heads != 0) {
        throw std::invalid_argument("emb_dim " + std::to_string(emb_dim) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    const auto all = all_dropout_sites(layers);
    for (const auto& site : dropout_sites) {
        if (std::find(all.begin(), all.end(), site) == all.end()) {
            throw std::invalid_argument("unknown dropout site: " + site);
        }
    }
}

std::vector<std::string> ModelConfig::all_dropout_sites(std::size_t layers) {
    std::vector<std::string> sites{"emb.drop"};
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string p = layer_prefix(i);
        sites.push_back(p + "attn.probs");
        sites.push_back(p + "attn.out");
        sites.push_back(p + "ffn.act");
    }
    return sites;
}

FrozenModel::FrozenModel(ModelConfig config, std::map<std::string, MatF> tensors)
    : config_(std::move(config)), tensors_(std::move(tensors)) {
    config_.validate();
    const auto shapes = expected_tensors(config_);
    for (const auto& [name, shape] : shapes) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw std::invalid_argument("missing tensor: " + name);
        }
        if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
            throw std::invalid_argument(
                "tensor " + name + " has shape " + std::to_string(it->second.rows()) + "x" +
                std::to_string(it->second.cols()) + ", expected " + std::to_string(shape.first) +
                "x" + std::to_string(shape.second));
        }
    }
    for (const auto& [name, t] : tensors_) {
        (void)t;
        if (shapes.find(name) == shapes.end()) {
            throw std::invalid_argument("unexpected tensor: " + name);
        }
    }
    const auto bytes = serialize();
    // serialize() appends the digest of everything before it.
    std::array<uint8_t, 20> dig;
    std::copy(bytes.end() - 20, bytes.end(), dig.begin());
    fingerprint_ = Sha1::hex(dig);
}

const MatF& FrozenModel::tensor(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw std::invalid_argument("no such tensor: " + name);
    }
    return it->second;
}

std::vector<uint8_t> FrozenModel::serialize() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), kWeightsMagic, kWeightsMagic + 4);
    binio::put_u16(out, kWeightsVersion);
    binio::put_u32(out, uint32_t(config_.vocab_size));
    binio::put_u32(out, uint32_t(config_.emb_dim));
    binio::put_u32(out, uint32_t(config_.layers));
    binio::put_u32(out, uint32_t(config_.heads));
    binio::put_u32(out, uint32_t(config_.ffn_dim));
    binio::put_u32(out, uint32_t(config_.max_seq));
    binio::put_u32(out, uint32_t(config_.num_classes));
    binio::put_u32(out, uint32_t(config_.dropout_sites.size()));
    for (const auto& site : config_.dropout_sites) binio::put_string(out, site);
    binio::put_u32(out, uint32_t(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
        binio::put_string(out, name);
        binio::put_u32(out, uint32_t(t.rows()));
        binio::put_u32(out, uint32_t(t.cols()));
        for (float v : t.data()) binio::put_f32(out, v);
    }
    const auto dig = Sha1::hash(out.data(), out.size());
    out.insert(out.end(), dig.begin(), dig.end());
    return out;
}

ForwardResult forward(const FrozenModel& model, const PromptEmbedding& prompt,
                      const std::vector<uint32_t>& token_ids, const ClipSpec& clip) {
    const ModelConfig& c = model.config();
    const std::size_t plen = prompt.prompt_len();
    if (plen > 0 && prompt.emb_dim() != c.emb_dim) {
        throw std::invalid_argument("prompt emb_dim " + std::to_string(prompt.emb_dim()) +
                                    " != model emb_dim " + std::to_string(c.emb_dim));
    }
    const std::size_t seq = plen + 1 + token_ids.size();
    if (seq > c.max_seq) {
        throw std::invalid_argument("sequence length " + std::to_string(seq) +
                                    " exceeds max_seq " + std::to_string(c.max_seq));
    }
    for (uint32_t id : token_ids) {
        if (id >= c.vocab_size) {
            throw std::invalid_argument("unknown token id " + std::to_string(id) +
                                        " (vocab_size " + std::to_string(c.vocab_size) + ")");
        }
    }
    const bool clipping = clip.mode != ClipMode::off;

    const auto site_enabled = [&](const std::string& site) {
        return std::find(c.dropout_sites.begin(), c.dropout_sites.end(), site) !=
               c.dropout_sites.end();
    };
    const auto clip_site = [&](const std::string& site, float* data,
                               const std::vector<std::size_t>& shape) {
        if (!clipping || !site_enabled(site)) return;
        const ClipMask mask = generate_mask(derive_seed(clip.subnetwork_tag, site), shape,
                                            clip.p_clip);
        apply_clip_inplace(data, mask.size(), mask, clip.p_clip);
    };

    // Embed [prompt; CLS; tokens] and add positional rows.
    const MatF& tok = model.tensor("emb.tok");
    const MatF& pos = model.tensor("emb.pos");
    MatF x(seq, c.emb_dim);
    for (std::size_t r = 0; r < plen; ++r) {
        std::memcpy(x.row_ptr(r), prompt.values.row_ptr(r), c.emb_dim * sizeof(float));
    }
    std::memcpy(x.row_ptr(plen), tok.row_ptr(kClsTokenId), c.emb_dim * sizeof(float));
    for (std::size_t t = 0; t < token_ids.size(); ++t) {
        std::memcpy(x.row_ptr(plen + 1 + t), tok.row_ptr(token_ids[t]),
                    c.emb_dim * sizeof(float));
    }
    for (std::size_t r = 0; r < seq; ++r) {
        float* xr = x.row_ptr(r);
        const float* pr = pos.row_ptr(r);
        for (std::size_t j = 0; j < c.emb_dim; ++j) xr[j] += pr[j];
    }
    clip_site("emb.drop", x.data().data(), {seq, c.emb_dim});

    const std::size_t dh = c.emb_dim / c.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = layer_prefix(l);

        // Attention sublayer (pre-LN residual).
        const MatF h = layer_norm(x, model.tensor(p + "ln1.gamma"), model.tensor(p + "ln1.beta"));
        const MatF q = linear(h, model.tensor(p + "attn.wq"));
        const MatF k = linear(h, model.tensor(p + "attn.wk"));
        const MatF v = linear(h, model.tensor(p + "attn.wv"));

        std::vector<float> probs(c.heads * seq * seq);
        std::vector<double> scores(seq);
        for (std::size_t hd = 0; hd < c.heads; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t i = 0; i < seq; ++i) {
                const float* qi = q.row_ptr(i) + off;
                for (std::size_t j = 0; j < seq; ++j) {
                    const float* kj = k.row_ptr(j) + off;
                    double acc = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) acc += double(qi[d]) * double(kj[d]);
                    scores[j] = acc * inv_sqrt_dh;
                }
                const std::vector<double> sm = softmax(scores);
                float* prow = probs.data() + (hd * seq + i) * seq;
                for (std::size_t j = 0; j < seq; ++j) prow[j] = float(sm[j]);
            }
        }
        clip_site(p + "attn.probs", probs.data(), {c.heads, seq, seq});

        MatF ctx(seq, c.emb_dim);
        for (std::size_t hd = 0; hd < c.heads; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t i = 0; i < seq; ++i) {
                const float* prow = probs.data() + (hd * seq + i) * seq;
                float* crow = ctx.row_ptr(i) + off;
                for (std::size_t d = 0; d < dh; ++d) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < seq; ++j) {
                        acc += double(prow[j]) * double(v.at(j, off + d));
                    }
                    crow[d] = float(acc);
                }
            }
        }
        MatF attn_out = linear(ctx, model.tensor(p + "attn.wo"));
        clip_site(p + "attn.out", attn_out.data().data(), {seq, c.emb_dim});
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += attn_out.data()[i];

        // Feed-forward sublayer (pre-LN residual).
        const MatF h2 = layer_norm(x, model.tensor(p + "ln2.gamma"), model.tensor(p + "ln2.beta"));
        MatF act = linear(h2, model.tensor(p + "ffn.w1"));
        for (float& a : act.data()) a = gelu(a);
        clip_site(p + "ffn.act", act.data().data(), {seq, c.ffn_dim});
        const MatF ffn_out = linear(act, model.tensor(p + "ffn.w2"));
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += ffn_out.data()[i];
    }

    const MatF xf = layer_norm(x, model.tensor("final_ln.gamma"), model.tensor("final_ln.beta"));

    ForwardResult res;
    res.cls_embedding.assign(xf.row_ptr(plen), xf.row_ptr(plen) + c.emb_dim);
    const MatF& head = model.tensor("head.w");
    res.logits.resize(c.num_classes);
    for (std::size_t cl = 0; cl < c.num_classes; ++cl) {
        const float* w = head.row_ptr(cl);
        double acc = 0.0;
        for (std::size_t j = 0; j < c.emb_dim; ++j) {
            acc += double(w[j]) * double(res.cls_embedding[j]);
        }
        res.logits[cl] = float(acc);
    }
    return res;
}

std::vector<ForwardResult> forward_batch(const FrozenModel& model, const PromptEmbedding& prompt,
                                         const std::vector<std::vector<uint32_t>>& batch,
                                         const ClipSpec& clip) {
    std::vector<ForwardResult> out;
    out.reserve(batch.size());
    for (const auto& seq : batch) out.push_back(forward(model, prompt, seq, clip));
    return out;
}

FrozenModel build_toy_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    const auto shapes = expected_tensors(config);
    std::map<std::string, MatF> tensors;
    for (const auto& [name, shape] : shapes) {
        MatF t(shape.first, shape.second);
        const bool is_gamma = name.size() >= 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
        const bool is_beta = name.size() >= 4 && name.compare(name.size() - 4, 4, "beta") == 0;
        if (is_gamma) {
            std::fill(t.data().begin(), t.data().end(), 1.0f);
        } else if (!is_beta) {
            double std_dev = 0.08;
            if (name == "emb.tok" || name == "emb.pos") std_dev = 0.1;
            if (name == "head.w") std_dev = 0.02;
            RngStream rng(derive_seed(std::to_string(seed), name));
            for (float& v : t.data()) v = float(rng.next_gaussian() * std_dev);
        }
        tensors[name] = std::move(t);
    }
    ModelConfig c = config;
    if (c.dropout_sites.empty()) c.dropout_sites = ModelConfig::all_dropout_sites(c.layers);
    return FrozenModel(std::move(c), std::move(tensors));
}

void save_weights(const FrozenModel& model, const std::string& path) {
    binio::write_file(path, model.serialize());
}

FrozenModel load_weights(const std::string& path) {
    const std::vector<uint8_t> bytes = binio::read_file(path);
    if (bytes.size() < 4 + 2 + 20) {
        throw std::runtime_error(path + ": truncated file");
    }
    if (std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) {
        throw std::runtime_error(path + ": not a weights file (bad magic)");
    }
    const auto dig = Sha1::hash(bytes.data(), bytes.size() - 20);
    if (std::memcmp(dig.data(), bytes.data() + bytes.size() - 20, 20) != 0) {
        throw std::runtime_error(path + ": fingerprint mismatch, file is corrupt");
    }
    binio::Reader r(bytes.data() + 4, bytes.size() - 4 - 20);
    const uint16_t version = r.u16();
    if (version != kWeightsVersion) {
        throw std::runtime_error(path + ": unsupported weights version " +
                                 std::to_string(version));
    }
    ModelConfig c;
    c.vocab_size = r.u32();
    c.emb_dim = r.u32();
    c.layers = r.u32();
    c.heads = r.u32();
    c.ffn_dim = r.u32();
    c.max_seq = r.u32();
    c.num_classes = r.u32();
    const uint32_t nsites = r.u32();
    c.dropout_sites.clear();
    for (uint32_t i = 0; i < nsites; ++i) c.dropout_sites.push_back(r.str());
    const uint32_t ntensors = r.u32();
    std::map<std::string, MatF> tensors;
    for (uint32_t i = 0; i < ntensors; ++i) {
        const std::string name = r.str();
        const uint32_t rows = r.u32();
        const uint32_t cols = r.u32();
        MatF t(rows, cols);
        for (float& v : t.data()) v = r.f32();
        tensors[name] = std::move(t);
    }
    if (r.remaining() != 0) {
        throw std::runtime_error(path + ": malformed weights file, trailing bytes");
    }
    return FrozenModel(std::move(c), std::move(tensors));
}

}  // namespace cliptune
