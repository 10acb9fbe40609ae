#include "cliptune/planted.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cliptune/fitness.hpp"

namespace cliptune {
namespace {

// Coordinate slots. Everything meaningful lives in +/- pairs so layer norm's
// mean subtraction cancels out of every difference read.
constexpr std::size_t kClsPlus = 0, kClsMinus = 1;
constexpr std::size_t kPayPlus = 2, kPayMinus = 3;
std::size_t key_plus(std::size_t c) { return 4 + 2 * c; }
std::size_t key_minus(std::size_t c) { return 5 + 2 * c; }
std::size_t sig_plus(std::size_t nc, std::size_t c) { return 4 + 2 * nc + 2 * c; }
std::size_t sig_minus(std::size_t nc, std::size_t c) { return 5 + 2 * nc + 2 * c; }
std::size_t first_noise_slot(std::size_t nc) { return 4 + 4 * nc; }

constexpr double kNoiseStd = 0.1;
constexpr double kPayloadTarget = 5.0;
constexpr double kKeyTarget = 2.0;   // token key score component
constexpr double kScoreTarget = 2.0; // q * k / sqrt(dh) for in-class tokens
constexpr double kHeadScale = 2.0;
constexpr double kLnEps = 1e-5;

// Gaussian elimination with partial pivoting; a is destroyed.
std::vector<double> solve_linear(MatD a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::fabs(a.at(r, col)) > std::fabs(a.at(pivot, col))) pivot = r;
        }
        if (std::fabs(a.at(pivot, col)) < 1e-12) {
            throw std::runtime_error("planted construction failed: singular constraint system");
        }
        if (pivot != col) {
            for (std::size_t k = 0; k < n; ++k) std::swap(a.at(col, k), a.at(pivot, k));
            std::swap(b[col], b[pivot]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a.at(r, col) / a.at(col, col);
            if (f == 0.0) continue;
            for (std::size_t k = col; k < n; ++k) a.at(r, k) -= f * a.at(col, k);
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t ri = n; ri-- > 0;) {
        double acc = b[ri];
        for (std::size_t k = ri + 1; k < n; ++k) acc -= a.at(ri, k) * x[k];
        x[ri] = acc / a.at(ri, ri);
    }
    return x;
}

double pool_accuracy(const FrozenModel& model, const FewShotDataset& pool,
                     const PromptEmbedding& prompt) {
    const ClipSpec off{"", 0.0, ClipMode::off};
    std::size_t correct = 0;
    for (const auto& s : pool.samples) {
        const ForwardResult res = forward(model, prompt, s.tokens, off);
        if (predict(res.logits) == s.label) ++correct;
    }
    return double(correct) / double(pool.samples.size());
}

}  // namespace

ModelConfig planted_model_config(std::size_t num_classes, std::size_t emb_dim,
                                 std::size_t layers, std::size_t vocab_size,
                                 std::size_t max_seq) {
    ModelConfig c;
    c.num_classes = num_classes;
    c.heads = num_classes;
    c.emb_dim = emb_dim;
    c.layers = layers;
    c.ffn_dim = 4 * emb_dim;
    c.vocab_size = vocab_size;
    c.max_seq = max_seq;
    c.dropout_sites = ModelConfig::all_dropout_sites(layers);
    return c;
}

std::pair<PlantedOracle, FewShotDataset> build_planted_oracle(const ModelConfig& config,
                                                              std::size_t d,
                                                              const Projection& projection,
                                                              RngStream& rng,
                                                              const PlantedParams& params) {
    config.validate();
    const std::size_t C = config.num_classes;
    const std::size_t emb = config.emb_dim;
    if (config.heads != C) {
        throw std::invalid_argument("planted construction needs heads == num_classes, got " +
                                    std::to_string(config.heads) + " heads for " +
                                    std::to_string(C) + " classes");
    }
    if (emb < first_noise_slot(C) + 4) {
        throw std::invalid_argument("planted construction needs emb_dim >= " +
                                    std::to_string(first_noise_slot(C) + 4));
    }
    const std::size_t dh = emb / config.heads;
    if (dh < 3) throw std::invalid_argument("planted construction needs head_dim >= 3");
    if (projection.d != d) {
        throw std::invalid_argument("projection.d " + std::to_string(projection.d) +
                                    " != d " + std::to_string(d));
    }
    if (projection.D % emb != 0) {
        throw std::invalid_argument("projection.D not a multiple of emb_dim");
    }
    const std::size_t plen = projection.D / emb;
    const std::size_t constraints = 2 * plen + 2 * C;
    if (constraints > d) {
        throw std::invalid_argument("planted construction needs d >= 2*prompt_len + 2*classes = " +
                                    std::to_string(constraints));
    }
    if (config.max_seq < plen + 1 + params.seq_len) {
        throw std::invalid_argument("max_seq too small for prompt_len + 1 + seq_len");
    }
    const std::size_t pool_per_class = (config.vocab_size - kNumReservedTokens) / C;
    if (pool_per_class == 0) {
        throw std::invalid_argument("vocab too small: no content tokens per class");
    }

    const std::size_t noise_lo = first_noise_slot(C);
    const std::size_t noise_n = emb - noise_lo;

    // Attention scale calibration so in-class token scores land near
    // kScoreTarget after layer norm: q0(CLS) = sqrt(dh) * kScoreTarget /
    // kKeyTarget and k0(token) = kKeyTarget.
    const double cls_inv = 1.0 / std::sqrt(2.0 / double(emb) + kLnEps);
    const double q_target = std::sqrt(double(dh)) * kScoreTarget / kKeyTarget;
    const double q_scale = q_target / (2.0 * cls_inv);
    const double tok_var = (2.0 + kNoiseStd * kNoiseStd * double(noise_n)) / double(emb);
    const double tok_inv = 1.0 / std::sqrt(tok_var + kLnEps);
    const double k_scale = kKeyTarget / (2.0 * tok_inv);

    std::map<std::string, MatF> tensors;
    const auto zeros = [](std::size_t r, std::size_t c) { return MatF(r, c); };
    const auto ones_row = [emb]() {
        MatF t(1, emb);
        std::fill(t.data().begin(), t.data().end(), 1.0f);
        return t;
    };

    MatF tok(config.vocab_size, emb);
    tok.at(kClsTokenId, kClsPlus) = 1.0f;
    tok.at(kClsTokenId, kClsMinus) = -1.0f;
    for (std::size_t j = 0; j < noise_n; ++j) {
        tok.at(kUnkTokenId, noise_lo + j) = float(rng.next_gaussian() * kNoiseStd);
    }
    for (std::size_t id = kNumReservedTokens; id < config.vocab_size; ++id) {
        const std::size_t c = (id - kNumReservedTokens) / pool_per_class;
        if (c < C) {
            tok.at(id, key_plus(c)) = 1.0f;
            tok.at(id, key_minus(c)) = -1.0f;
        }
        for (std::size_t j = 0; j < noise_n; ++j) {
            tok.at(id, noise_lo + j) = float(rng.next_gaussian() * kNoiseStd);
        }
    }
    tensors["emb.tok"] = std::move(tok);
    tensors["emb.pos"] = zeros(config.max_seq, emb);

    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        tensors[p + "ln1.gamma"] = ones_row();
        tensors[p + "ln1.beta"] = zeros(1, emb);
        tensors[p + "ln2.gamma"] = ones_row();
        tensors[p + "ln2.beta"] = zeros(1, emb);
        MatF wq = zeros(emb, emb), wk = zeros(emb, emb), wv = zeros(emb, emb),
             wo = zeros(emb, emb);
        if (l == 0) {
            for (std::size_t h = 0; h < C; ++h) {
                const std::size_t base = h * dh;
                wq.at(base + 0, kClsPlus) = float(q_scale);
                wq.at(base + 0, kClsMinus) = float(-q_scale);
                wk.at(base + 0, key_plus(h)) = float(k_scale);
                wk.at(base + 0, key_minus(h)) = float(-k_scale);
                wv.at(base + 1, kPayPlus) = 1.0f;
                wv.at(base + 1, kPayMinus) = -1.0f;
                wv.at(base + 2, kPayPlus) = -1.0f;
                wv.at(base + 2, kPayMinus) = 1.0f;
                wo.at(sig_plus(C, h), base + 1) = 1.0f;
                wo.at(sig_plus(C, h), base + 2) = -1.0f;
                wo.at(sig_minus(C, h), base + 1) = -1.0f;
                wo.at(sig_minus(C, h), base + 2) = 1.0f;
            }
        }
        tensors[p + "attn.wq"] = std::move(wq);
        tensors[p + "attn.wk"] = std::move(wk);
        tensors[p + "attn.wv"] = std::move(wv);
        tensors[p + "attn.wo"] = std::move(wo);
        tensors[p + "ffn.w1"] = zeros(config.ffn_dim, emb);
        tensors[p + "ffn.w2"] = zeros(emb, config.ffn_dim);
    }
    tensors["final_ln.gamma"] = ones_row();
    tensors["final_ln.beta"] = zeros(1, emb);

    MatF head = zeros(C, emb);
    for (std::size_t c = 0; c < C; ++c) {
        head.at(c, sig_plus(C, c)) = float(-kHeadScale);
        head.at(c, sig_minus(C, c)) = float(kHeadScale);
    }
    tensors["head.w"] = std::move(head);

    FrozenModel model(config, std::move(tensors));

    // Companion dataset: class-y samples use only class-y pool tokens.
    FewShotDataset pool;
    pool.num_classes = C;
    pool.split = Split::test;
    pool.provenance = "planted:classes=" + std::to_string(C) +
                      ",per_class=" + std::to_string(params.samples_per_class);
    for (std::size_t c = 0; c < C; ++c) {
        const std::size_t lo = kNumReservedTokens + c * pool_per_class;
        for (std::size_t s = 0; s < params.samples_per_class; ++s) {
            Sample sample;
            sample.label = uint32_t(c);
            for (std::size_t t = 0; t < params.seq_len; ++t) {
                sample.tokens.push_back(
                    uint32_t(lo + std::size_t(rng.next_uniform() * double(pool_per_class))));
            }
            pool.samples.push_back(std::move(sample));
        }
    }

    // z*: minimum-norm solution of A z = t where the constraints pin every
    // prompt row's payload pair to +/- kPayloadTarget and zero the mean key
    // leakage per class. z* = A^T (A A^T)^-1 t.
    const std::size_t m = constraints;
    MatD a(m, d);
    std::vector<double> t(m, 0.0);
    std::size_t row = 0;
    for (std::size_t j = 0; j < plen; ++j) {
        for (std::size_t i = 0; i < d; ++i) {
            a.at(row, i) = double(projection.matrix.at(i, j * emb + kPayPlus));
            a.at(row + 1, i) = double(projection.matrix.at(i, j * emb + kPayMinus));
        }
        t[row] = kPayloadTarget;
        t[row + 1] = -kPayloadTarget;
        row += 2;
    }
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < d; ++i) {
            double plus = 0.0, minus = 0.0;
            for (std::size_t j = 0; j < plen; ++j) {
                plus += double(projection.matrix.at(i, j * emb + key_plus(c)));
                minus += double(projection.matrix.at(i, j * emb + key_minus(c)));
            }
            a.at(row, i) = plus / double(plen);
            a.at(row + 1, i) = minus / double(plen);
        }
        row += 2;
    }
    MatD gram(m, m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += a.at(i, k) * a.at(j, k);
            gram.at(i, j) = acc;
            gram.at(j, i) = acc;
        }
    }
    const std::vector<double> x = solve_linear(std::move(gram), t);
    IntrinsicVector z_star;
    z_star.values.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < m; ++k) acc += a.at(k, i) * x[k];
        z_star.values[i] = acc;
    }

    // Closed-form optimum must actually work before anyone trusts it.
    PromptEmbedding p0;
    p0.values = MatF(plen, emb);
    const double acc_opt = pool_accuracy(model, pool, compose_prompt(p0, z_star, projection));
    if (acc_opt != 1.0) {
        throw std::runtime_error("planted construction failed: z* reaches accuracy " +
                                 std::to_string(acc_opt) + ", expected 1.0");
    }
    IntrinsicVector z2 = z_star;
    for (double& v : z2.values) v *= 2.0;
    if (pool_accuracy(model, pool, compose_prompt(p0, z2, projection)) != 1.0) {
        throw std::runtime_error("planted construction failed: 2*z* lost the optimum");
    }
    const ClipSpec off{"", 0.0, ClipMode::off};
    for (const auto& s : pool.samples) {
        const ForwardResult res = forward(model, p0, s.tokens, off);
        for (float v : res.logits) {
            if (v != 0.0f) {
                throw std::runtime_error(
                    "planted construction failed: zero prompt gives nonzero logit");
            }
        }
    }

    PlantedOracle oracle{std::move(model), std::move(z_star), 1.0};
    return {std::move(oracle), std::move(pool)};
}

}  // namespace cliptune
