#include "cliptune/prompting.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "cliptune/binio.hpp"
#include "cliptune/model.hpp"
#include "cliptune/rng.hpp"

namespace cliptune {

namespace binio {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw std::runtime_error("short write to '" + path + "'");
}

}  // namespace binio

MatD Projection::folded(std::size_t prompt_len, std::size_t emb_dim) const {
    if (prompt_len * emb_dim != D) {
        throw std::invalid_argument("folded: prompt_len*emb_dim != D");
    }
    MatD out(d, emb_dim);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t t = 0; t < prompt_len; ++t) {
            const float* block = matrix.row_ptr(i) + t * emb_dim;
            for (std::size_t e = 0; e < emb_dim; ++e) out.at(i, e) += double(block[e]);
        }
        for (std::size_t e = 0; e < emb_dim; ++e) out.at(i, e) /= double(prompt_len);
    }
    return out;
}

Projection init_projection(std::size_t d, std::size_t D, uint64_t seed, double scale) {
    if (d < 1) throw std::invalid_argument("init_projection: d must be >= 1");
    if (D < d) throw std::invalid_argument("init_projection: D must be >= d");
    Projection proj;
    proj.d = d;
    proj.D = D;
    proj.seed = seed;
    proj.scale = scale;
    proj.matrix = MatF(d, D);
    RngStream rng(seed);
    const double std_dev = scale / std::sqrt(double(d));
    for (auto& v : proj.matrix.data()) v = float(rng.next_gaussian() * std_dev);
    return proj;
}

PromptEmbedding compose_prompt(const PromptEmbedding& p0, const IntrinsicVector& z,
                               const Projection& w) {
    if (w.d != z.dim()) {
        throw std::invalid_argument("compose_prompt: z has dim " + std::to_string(z.dim()) +
                                    ", projection expects " + std::to_string(w.d));
    }
    if (w.D != p0.values.size()) {
        throw std::invalid_argument("compose_prompt: projection D " + std::to_string(w.D) +
                                    " != flattened prompt length " +
                                    std::to_string(p0.values.size()));
    }
    PromptEmbedding out;
    out.values = MatF(p0.prompt_len(), p0.emb_dim());
    const std::size_t D = w.D;
    std::vector<double> delta(D, 0.0);
    for (std::size_t i = 0; i < w.d; ++i) {
        const double zi = z.values[i];
        if (zi == 0.0) continue;
        const float* row = w.matrix.row_ptr(i);
        for (std::size_t j = 0; j < D; ++j) delta[j] += zi * double(row[j]);
    }
    for (std::size_t j = 0; j < D; ++j) {
        out.values.data()[j] = float(double(p0.values.data()[j]) + delta[j]);
    }
    return out;
}

PromptInit prompt_init_from_name(const std::string& name) {
    if (name == "random_tokens") return PromptInit::random_tokens;
    if (name == "zeros") return PromptInit::zeros;
    if (name == "file") return PromptInit::file;
    throw std::invalid_argument("unknown prompt init strategy '" + name + "'");
}

const char* prompt_init_name(PromptInit s) {
    switch (s) {
        case PromptInit::random_tokens: return "random_tokens";
        case PromptInit::zeros: return "zeros";
        case PromptInit::file: return "file";
    }
    return "?";
}

PromptEmbedding init_prompt(PromptInit strategy, const FrozenModel& model,
                            std::size_t prompt_len, uint64_t seed, const std::string& path) {
    const std::size_t emb = model.config().emb_dim;
    PromptEmbedding p;
    switch (strategy) {
        case PromptInit::zeros:
            p.values = MatF(prompt_len, emb);
            return p;
        case PromptInit::random_tokens: {
            p.values = MatF(prompt_len, emb);
            const MatF& table = model.tensor("emb.tok");
            RngStream rng(seed);
            for (std::size_t r = 0; r < prompt_len; ++r) {
                const auto row = std::size_t(rng.next_uniform() * double(table.rows()));
                for (std::size_t e = 0; e < emb; ++e) p.values.at(r, e) = table.at(row, e);
            }
            return p;
        }
        case PromptInit::file: {
            p = load_prompt(path);
            if (p.prompt_len() != prompt_len || p.emb_dim() != emb) {
                throw std::runtime_error("prompt file '" + path + "' has shape " +
                                         std::to_string(p.prompt_len()) + "x" +
                                         std::to_string(p.emb_dim()) + ", expected " +
                                         std::to_string(prompt_len) + "x" + std::to_string(emb));
            }
            return p;
        }
    }
    throw std::invalid_argument("init_prompt: bad strategy");
}

namespace {
constexpr char kPromptMagic[4] = {'P', 'F', 'P', 'T'};
constexpr uint16_t kPromptVersion = 1;
}  // namespace

void save_prompt(const PromptEmbedding& prompt, const std::string& path) {
    std::vector<uint8_t> bytes;
    bytes.insert(bytes.end(), kPromptMagic, kPromptMagic + 4);
    binio::put_u16(bytes, kPromptVersion);
    binio::put_u32(bytes, uint32_t(prompt.prompt_len()));
    binio::put_u32(bytes, uint32_t(prompt.emb_dim()));
    for (float v : prompt.values.data()) binio::put_f32(bytes, v);
    binio::write_file(path, bytes);
}

PromptEmbedding load_prompt(const std::string& path) {
    const auto bytes = binio::read_file(path);
    binio::Reader r(bytes.data(), bytes.size());
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kPromptMagic, 4) != 0)
        throw std::runtime_error("'" + path + "' is not a prompt file (bad magic)");
    const uint16_t version = r.u16();
    if (version != kPromptVersion)
        throw std::runtime_error("prompt file version " + std::to_string(version) +
                                 " unsupported");
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    PromptEmbedding p;
    p.values = MatF(rows, cols);
    for (auto& v : p.values.data()) v = r.f32();
    return p;
}

}  // namespace cliptune
