#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cliptune/dataset.hpp"
#include "cliptune/fitness.hpp"
#include "cliptune/model.hpp"
#include "cliptune/tune.hpp"

namespace cliptune {

// Wire-protocol limits, advertised by /v1/model_info.
constexpr double kMaxServedPClip = 0.95;
constexpr std::size_t kMaxBatchSize = 256;

// What GET /v1/model_info reveals about the served model: dimensions and a
// content fingerprint, never weights.
struct ModelInfo {
    std::size_t vocab_size = 0;
    std::size_t emb_dim = 0;
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t ffn_dim = 0;
    std::size_t max_seq = 0;
    std::size_t num_classes = 0;
    std::vector<std::string> dropout_sites;
    double max_p_clip = kMaxServedPClip;
    std::size_t batch_limit = kMaxBatchSize;
    std::string fingerprint;
};

// HTTP/1.1 + JSON inference server over one frozen model.
//
//   GET  /v1/model_info   dimensions, accepted p_clip range, fingerprint
//   POST /v1/forward      per-tag logits for a batch of token sequences
//   POST /v1/score        server-side ensemble fitness on a registered dataset
//   POST /v1/datasets     register few-shot data, returns a dataset id
//
// Requests and responses are documented field-by-field in docs/protocol.md,
// with golden examples under docs/protocol/. The model is immutable, so
// identical requests produce identical payloads regardless of concurrency.
class ModelService {
public:
    // threads = 0 uses the HTTP library's default worker pool size.
    explicit ModelService(const FrozenModel& model, std::size_t threads = 0);
    ~ModelService();

    ModelService(const ModelService&) = delete;
    ModelService& operator=(const ModelService&) = delete;

    // Blocks serving until stop(); false if the address cannot be bound.
    bool serve(const std::string& host, int port);

    // Binds an OS-assigned port on host, serves from a background thread and
    // returns the port once the server is accepting connections.
    int start(const std::string& host = "127.0.0.1");

    void stop();

    std::size_t dataset_count() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Client-side Evaluator speaking the /v1 protocol, so the tuning loop can
// run against a server with the same semantics as LocalEvaluator.
//
// Construction performs the handshake: fetch /v1/model_info, refuse on any
// dimension mismatch, then register both splits. Transient transport
// failures are retried up to max_retries per request (requests are
// idempotent: masks are regenerated from tag strings server-side); protocol
// rejections (4xx) are thrown immediately.
class RemoteEvaluator : public Evaluator {
public:
    struct Options {
        std::size_t max_retries = 3;     // attempts per request
        double timeout_seconds = 30.0;   // per-attempt read timeout
        std::size_t expected_emb_dim = 0;      // 0 skips the check
        std::size_t expected_num_classes = 0;  // 0 checks against datasets only
    };

    RemoteEvaluator(const std::string& host, int port, const FewShotDataset& train,
                    const FewShotDataset& dev);
    RemoteEvaluator(const std::string& host, int port, const FewShotDataset& train,
                    const FewShotDataset& dev, const Options& options);
    ~RemoteEvaluator() override;

    FitnessReport score(Split split, const PromptEmbedding& prompt,
                        const std::vector<std::string>& tags, double p_clip,
                        const FitnessFunction& fn, const std::string& candidate_id) override;

    const ModelInfo& model_info() const;
    const std::string& dataset_id(Split split) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cliptune
