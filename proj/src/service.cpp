#include "cliptune/service.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "cliptune/textfmt.hpp"

namespace cliptune {

namespace {

using nlohmann::json;

// Validation failure destined for a {"error": {field, message}} body.
struct ProtocolError {
    int status;
    std::string field;
    std::string message;
};

json error_body(const std::string& field, const std::string& message) {
    return json{{"error", {{"field", field}, {"message", message}}}};
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

std::size_t require_uint(const json& j, const char* field) {
    const auto it = j.find(field);
    if (it == j.end()) throw ProtocolError{400, field, "missing field"};
    if (!it->is_number_unsigned()) {
        throw ProtocolError{400, field, "expected a non-negative integer"};
    }
    return it->get<std::size_t>();
}

std::string require_string(const json& j, const char* field) {
    const auto it = j.find(field);
    if (it == j.end()) throw ProtocolError{400, field, "missing field"};
    if (!it->is_string()) throw ProtocolError{400, field, "expected a string"};
    return it->get<std::string>();
}

struct WireClip {
    ClipMode mode = ClipMode::static_;
    double p_clip = 0.0;
    std::vector<std::string> tags;
};

WireClip parse_clip(const json& body) {
    const auto cit = body.find("clip");
    if (cit == body.end()) throw ProtocolError{400, "clip", "missing field"};
    if (!cit->is_object()) throw ProtocolError{400, "clip", "expected an object"};
    WireClip out;
    const auto mit = cit->find("mode");
    if (mit == cit->end() || !mit->is_string()) {
        throw ProtocolError{400, "clip.mode", "expected \"off\", \"static\" or \"dynamic\""};
    }
    try {
        out.mode = clip_mode_from_name(mit->get<std::string>());
    } catch (const std::exception& e) {
        throw ProtocolError{400, "clip.mode", e.what()};
    }
    if (out.mode == ClipMode::off) return out;
    const auto pit = cit->find("p_clip");
    if (pit == cit->end() || !pit->is_number()) {
        throw ProtocolError{400, "clip.p_clip", "expected a number"};
    }
    out.p_clip = pit->get<double>();
    if (!(out.p_clip >= 0.0 && out.p_clip <= kMaxServedPClip)) {
        throw ProtocolError{400, "clip.p_clip",
                            "outside accepted range [0, " + format_double(kMaxServedPClip) + "]"};
    }
    const auto tit = cit->find("tags");
    if (tit == cit->end() || !tit->is_array() || tit->empty()) {
        throw ProtocolError{400, "clip.tags",
                            "at least one subnetwork tag required when mode is not off"};
    }
    for (const auto& t : *tit) {
        if (!t.is_string()) throw ProtocolError{400, "clip.tags", "tags must be strings"};
        out.tags.push_back(t.get<std::string>());
    }
    return out;
}

PromptEmbedding parse_prompt(const json& body, std::size_t emb_dim) {
    const auto pit = body.find("prompt");
    if (pit == body.end()) throw ProtocolError{400, "prompt", "missing field"};
    if (!pit->is_array() || pit->empty()) {
        throw ProtocolError{400, "prompt", "expected a non-empty array of embedding rows"};
    }
    PromptEmbedding prompt;
    prompt.values = MatF(pit->size(), emb_dim);
    for (std::size_t r = 0; r < pit->size(); ++r) {
        const json& row = (*pit)[r];
        if (!row.is_array() || row.size() != emb_dim) {
            throw ProtocolError{400, "prompt",
                                "row " + std::to_string(r) + " must have " +
                                    std::to_string(emb_dim) + " entries"};
        }
        for (std::size_t e = 0; e < emb_dim; ++e) {
            if (!row[e].is_number()) {
                throw ProtocolError{400, "prompt", "row " + std::to_string(r) + " holds a non-number"};
            }
            prompt.values.at(r, e) = static_cast<float>(row[e].get<double>());
        }
    }
    return prompt;
}

}  // namespace

struct ModelService::Impl {
    const FrozenModel& model;
    ModelInfo info;
    httplib::Server server;
    std::thread worker;

    // Append-only, so dataset references stay valid without holding the lock.
    mutable std::mutex registry_mutex;
    std::map<std::string, FewShotDataset> datasets;
    std::map<std::string, std::string> id_by_fingerprint;
    std::size_t next_id = 1;

    Impl(const FrozenModel& m, std::size_t threads) : model(m) {
        const ModelConfig& c = model.config();
        info.vocab_size = c.vocab_size;
        info.emb_dim = c.emb_dim;
        info.layers = c.layers;
        info.heads = c.heads;
        info.ffn_dim = c.ffn_dim;
        info.max_seq = c.max_seq;
        info.num_classes = c.num_classes;
        info.dropout_sites = c.dropout_sites;
        info.fingerprint = model.fingerprint();
        if (threads > 0) {
            server.new_task_queue = [threads] {
                return new httplib::ThreadPool(threads);
            };
        }
        route();
    }

    void route() {
        server.Get("/v1/model_info", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, model_info_body());
        });
        server.Post("/v1/forward", [this](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, &Impl::forward_body);
        });
        server.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, &Impl::score_body);
        });
        server.Post("/v1/datasets", [this](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, &Impl::datasets_body);
        });
    }

    void handle(const httplib::Request& req, httplib::Response& res,
                json (Impl::*op)(const json&)) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            send_json(res, 400, error_body("body", "invalid JSON"));
            return;
        }
        if (!body.is_object()) {
            send_json(res, 400, error_body("body", "expected a JSON object"));
            return;
        }
        try {
            send_json(res, 200, (this->*op)(body));
        } catch (const ProtocolError& e) {
            send_json(res, e.status, error_body(e.field, e.message));
        } catch (const std::exception& e) {
            send_json(res, 400, error_body("request", e.what()));
        }
    }

    json model_info_body() const {
        return json{{"vocab_size", info.vocab_size},
                    {"emb_dim", info.emb_dim},
                    {"layers", info.layers},
                    {"heads", info.heads},
                    {"ffn_dim", info.ffn_dim},
                    {"max_seq", info.max_seq},
                    {"num_classes", info.num_classes},
                    {"dropout_sites", info.dropout_sites},
                    {"p_clip_range", json::array({0.0, info.max_p_clip})},
                    {"batch_limit", info.batch_limit},
                    {"fingerprint", info.fingerprint}};
    }

    json forward_body(const json& body) {
        const WireClip clip = parse_clip(body);
        const PromptEmbedding prompt = parse_prompt(body, info.emb_dim);
        const auto iit = body.find("inputs");
        if (iit == body.end() || !iit->is_array() || iit->empty()) {
            throw ProtocolError{400, "inputs", "expected a non-empty array of token-id sequences"};
        }
        if (iit->size() > info.batch_limit) {
            throw ProtocolError{400, "inputs",
                                "batch size " + std::to_string(iit->size()) + " exceeds limit " +
                                    std::to_string(info.batch_limit)};
        }
        std::vector<std::vector<uint32_t>> batch;
        batch.reserve(iit->size());
        for (std::size_t i = 0; i < iit->size(); ++i) {
            const json& seq = (*iit)[i];
            if (!seq.is_array()) {
                throw ProtocolError{400, "inputs",
                                    "sequence " + std::to_string(i) + " must be an array"};
            }
            std::vector<uint32_t> ids;
            ids.reserve(seq.size());
            for (const auto& t : seq) {
                if (!t.is_number_unsigned()) {
                    throw ProtocolError{400, "inputs",
                                        "sequence " + std::to_string(i) +
                                            " holds a non-token-id entry"};
                }
                ids.push_back(t.get<uint32_t>());
            }
            batch.push_back(std::move(ids));
        }

        // Dynamic mode differs from static only in how the caller picks tags,
        // so both run the same per-tag deterministic pass here.
        std::vector<std::string> tags = clip.tags;
        if (clip.mode == ClipMode::off) tags = {""};
        json results = json::array();
        for (const auto& tag : tags) {
            ClipSpec spec;
            spec.subnetwork_tag = tag;
            spec.p_clip = clip.p_clip;
            spec.mode = clip.mode == ClipMode::off ? ClipMode::off : ClipMode::static_;
            std::vector<ForwardResult> outs;
            try {
                outs = forward_batch(model, prompt, batch, spec);
            } catch (const std::exception& e) {
                throw ProtocolError{400, "inputs", e.what()};
            }
            json logits = json::array();
            for (const auto& out : outs) logits.push_back(out.logits);
            results.push_back(json{{"tag", tag}, {"logits", std::move(logits)}});
        }
        return json{{"request_id", body.value("request_id", "")},
                    {"results", std::move(results)}};
    }

    json score_body(const json& body) {
        const std::string id = require_string(body, "dataset_id");
        const FewShotDataset* data = nullptr;
        {
            std::lock_guard<std::mutex> lock(registry_mutex);
            const auto it = datasets.find(id);
            if (it == datasets.end()) {
                throw ProtocolError{404, "dataset_id", "unknown dataset id '" + id + "'"};
            }
            data = &it->second;
        }
        const WireClip clip = parse_clip(body);
        const PromptEmbedding prompt = parse_prompt(body, info.emb_dim);
        FitnessFunction fn;
        const auto fit = body.find("fitness");
        if (fit != body.end()) {
            if (!fit->is_object()) throw ProtocolError{400, "fitness", "expected an object"};
            const auto kit = fit->find("kind");
            if (kit != fit->end()) {
                if (!kit->is_string()) {
                    throw ProtocolError{400, "fitness.kind", "expected a string"};
                }
                try {
                    fn.kind = fitness_kind_from_name(kit->get<std::string>());
                } catch (const std::exception& e) {
                    throw ProtocolError{400, "fitness.kind", e.what()};
                }
            }
            const auto mit = fit->find("margin");
            if (mit != fit->end()) {
                if (!mit->is_number()) {
                    throw ProtocolError{400, "fitness.margin", "expected a number"};
                }
                fn.margin = mit->get<double>();
            }
        }
        try {
            fn.validate();
        } catch (const std::exception& e) {
            throw ProtocolError{400, "fitness", e.what()};
        }

        const double p = clip.mode == ClipMode::off ? 0.0 : clip.p_clip;
        const std::vector<std::string> tags =
            clip.mode == ClipMode::off ? std::vector<std::string>{""} : clip.tags;
        const std::string candidate_id = body.value("candidate_id", "");
        FitnessReport rep;
        try {
            rep = evaluate_prompt(model, *data, prompt, tags, p, fn, candidate_id);
        } catch (const std::exception& e) {
            throw ProtocolError{400, "request", e.what()};
        }
        return json{{"request_id", body.value("request_id", "")},
                    {"candidate_id", rep.candidate_id},
                    {"per_subnetwork_loss", rep.per_subnetwork_loss},
                    {"mean_loss", rep.mean_loss},
                    {"accuracy", rep.accuracy},
                    {"macro_f1", rep.macro_f1}};
    }

    json datasets_body(const json& body) {
        FewShotDataset ds;
        ds.num_classes = require_uint(body, "num_classes");
        if (ds.num_classes == 0) throw ProtocolError{400, "num_classes", "must be positive"};
        if (ds.num_classes > info.num_classes) {
            throw ProtocolError{400, "num_classes",
                                "model serves " + std::to_string(info.num_classes) + " classes"};
        }
        const auto sit = body.find("samples");
        if (sit == body.end() || !sit->is_array() || sit->empty()) {
            throw ProtocolError{400, "samples", "expected a non-empty array"};
        }
        for (std::size_t i = 0; i < sit->size(); ++i) {
            const json& s = (*sit)[i];
            if (!s.is_object()) {
                throw ProtocolError{400, "samples",
                                    "entry " + std::to_string(i) + " must be an object"};
            }
            Sample sample;
            const auto lit = s.find("label");
            if (lit == s.end() || !lit->is_number_unsigned()) {
                throw ProtocolError{400, "samples",
                                    "entry " + std::to_string(i) + " needs an unsigned label"};
            }
            sample.label = lit->get<uint32_t>();
            if (sample.label >= ds.num_classes) {
                throw ProtocolError{400, "samples",
                                    "entry " + std::to_string(i) + " label out of range"};
            }
            const auto tit = s.find("tokens");
            if (tit == s.end() || !tit->is_array()) {
                throw ProtocolError{400, "samples",
                                    "entry " + std::to_string(i) + " needs a tokens array"};
            }
            for (const auto& t : *tit) {
                if (!t.is_number_unsigned()) {
                    throw ProtocolError{400, "samples",
                                        "entry " + std::to_string(i) + " holds a non-token-id"};
                }
                sample.tokens.push_back(t.get<uint32_t>());
            }
            ds.samples.push_back(std::move(sample));
        }
        const std::string split = body.value("split", "train");
        if (split == "train") {
            ds.split = Split::train;
        } else if (split == "dev") {
            ds.split = Split::dev;
        } else if (split == "test") {
            ds.split = Split::test;
        } else {
            throw ProtocolError{400, "split", "expected \"train\", \"dev\" or \"test\""};
        }
        ds.provenance = body.value("provenance", "remote");
        try {
            ds.validate();
        } catch (const std::exception& e) {
            throw ProtocolError{400, "samples", e.what()};
        }

        // Registration keyed by content hash so retried requests are
        // idempotent and never leak duplicate entries.
        const std::string fingerprint = ds.fingerprint();
        const std::size_t size = ds.size();
        std::lock_guard<std::mutex> lock(registry_mutex);
        std::string id;
        const auto known = id_by_fingerprint.find(fingerprint);
        if (known != id_by_fingerprint.end()) {
            id = known->second;
        } else {
            id = "ds-" + std::to_string(next_id++);
            id_by_fingerprint.emplace(fingerprint, id);
            datasets.emplace(id, std::move(ds));
        }
        return json{{"dataset_id", id}, {"fingerprint", fingerprint}, {"size", size}};
    }
};

ModelService::ModelService(const FrozenModel& model, std::size_t threads)
    : impl_(new Impl(model, threads)) {}

ModelService::~ModelService() { stop(); }

bool ModelService::serve(const std::string& host, int port) {
    return impl_->server.listen(host, port);
}

int ModelService::start(const std::string& host) {
    const int port = impl_->server.bind_to_any_port(host);
    if (port < 0) throw std::runtime_error("service: failed to bind " + host);
    impl_->worker = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return port;
}

void ModelService::stop() {
    if (impl_->server.is_running()) impl_->server.stop();
    if (impl_->worker.joinable()) impl_->worker.join();
}

std::size_t ModelService::dataset_count() const {
    std::lock_guard<std::mutex> lock(impl_->registry_mutex);
    return impl_->datasets.size();
}

struct RemoteEvaluator::Impl {
    std::string host;
    int port;
    Options options;
    ModelInfo info;
    std::string train_id;
    std::string dev_id;

    json request(const std::string& path, const json* body) {
        const std::size_t attempts = std::max<std::size_t>(1, options.max_retries);
        std::string last_error;
        for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
            if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(50));
            httplib::Client client(host, port);
            const auto sec = static_cast<time_t>(options.timeout_seconds);
            const auto usec = static_cast<time_t>((options.timeout_seconds - sec) * 1e6);
            client.set_connection_timeout(sec, usec);
            client.set_read_timeout(sec, usec);
            httplib::Result result = body ? client.Post(path, body->dump(), "application/json")
                                          : client.Get(path);
            if (!result) {
                last_error = httplib::to_string(result.error());
                continue;  // transport failure: retry, the request is idempotent
            }
            json parsed;
            try {
                parsed = json::parse(result->body);
            } catch (const json::exception&) {
                last_error = "malformed response body";
                continue;
            }
            if (result->status >= 400) {
                // A protocol rejection is deterministic; retrying cannot help.
                std::string message = "status " + std::to_string(result->status);
                if (parsed.is_object() && parsed.contains("error")) {
                    const json& err = parsed["error"];
                    message += ": " + err.value("field", std::string{}) + ": " +
                               err.value("message", std::string{});
                }
                throw std::runtime_error("remote " + path + " rejected, " + message);
            }
            return parsed;
        }
        throw std::runtime_error("remote " + path + " failed after " + std::to_string(attempts) +
                                 " attempts: " + last_error);
    }

    std::string register_dataset(const FewShotDataset& ds) {
        json samples = json::array();
        for (const auto& s : ds.samples) {
            samples.push_back(json{{"tokens", s.tokens}, {"label", s.label}});
        }
        json body{{"num_classes", ds.num_classes},
                  {"split", split_name(ds.split)},
                  {"provenance", ds.provenance},
                  {"samples", std::move(samples)}};
        const json resp = request("/v1/datasets", &body);
        return resp.at("dataset_id").get<std::string>();
    }
};

RemoteEvaluator::RemoteEvaluator(const std::string& host, int port, const FewShotDataset& train,
                                 const FewShotDataset& dev)
    : RemoteEvaluator(host, port, train, dev, Options()) {}

RemoteEvaluator::RemoteEvaluator(const std::string& host, int port, const FewShotDataset& train,
                                 const FewShotDataset& dev, const Options& options)
    : impl_(new Impl) {
    impl_->host = host;
    impl_->port = port;
    impl_->options = options;

    const json j = impl_->request("/v1/model_info", nullptr);
    ModelInfo& info = impl_->info;
    info.vocab_size = j.at("vocab_size").get<std::size_t>();
    info.emb_dim = j.at("emb_dim").get<std::size_t>();
    info.layers = j.at("layers").get<std::size_t>();
    info.heads = j.at("heads").get<std::size_t>();
    info.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    info.max_seq = j.at("max_seq").get<std::size_t>();
    info.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("dropout_sites")) {
        info.dropout_sites = j.at("dropout_sites").get<std::vector<std::string>>();
    }
    if (j.contains("p_clip_range")) info.max_p_clip = j.at("p_clip_range").at(1).get<double>();
    if (j.contains("batch_limit")) info.batch_limit = j.at("batch_limit").get<std::size_t>();
    info.fingerprint = j.value("fingerprint", "");

    // Refuse incompatible dimensions here, before any tuning step runs.
    if (options.expected_emb_dim != 0 && info.emb_dim != options.expected_emb_dim) {
        throw std::runtime_error("remote model emb_dim " + std::to_string(info.emb_dim) +
                                 " does not match expected " +
                                 std::to_string(options.expected_emb_dim));
    }
    if (options.expected_num_classes != 0 && info.num_classes != options.expected_num_classes) {
        throw std::runtime_error("remote model serves " + std::to_string(info.num_classes) +
                                 " classes, expected " +
                                 std::to_string(options.expected_num_classes));
    }
    if (train.num_classes != info.num_classes || dev.num_classes != info.num_classes) {
        throw std::runtime_error("remote model serves " + std::to_string(info.num_classes) +
                                 " classes, datasets have " + std::to_string(train.num_classes) +
                                 "/" + std::to_string(dev.num_classes));
    }

    impl_->train_id = impl_->register_dataset(train);
    impl_->dev_id = impl_->register_dataset(dev);
}

RemoteEvaluator::~RemoteEvaluator() = default;

FitnessReport RemoteEvaluator::score(Split split, const PromptEmbedding& prompt,
                                     const std::vector<std::string>& tags, double p_clip,
                                     const FitnessFunction& fn,
                                     const std::string& candidate_id) {
    json rows = json::array();
    for (std::size_t r = 0; r < prompt.prompt_len(); ++r) {
        json row = json::array();
        for (std::size_t e = 0; e < prompt.emb_dim(); ++e) {
            row.push_back(static_cast<double>(prompt.values.at(r, e)));
        }
        rows.push_back(std::move(row));
    }
    json body{{"dataset_id", split == Split::dev ? impl_->dev_id : impl_->train_id},
              {"prompt", std::move(rows)},
              {"clip", {{"mode", "static"}, {"p_clip", p_clip}, {"tags", tags}}},
              {"fitness", {{"kind", fitness_kind_name(fn.kind)}, {"margin", fn.margin}}},
              {"candidate_id", candidate_id}};
    const json resp = impl_->request("/v1/score", &body);
    FitnessReport rep;
    rep.per_subnetwork_loss = resp.at("per_subnetwork_loss").get<std::vector<double>>();
    rep.mean_loss = resp.at("mean_loss").get<double>();
    rep.accuracy = resp.at("accuracy").get<double>();
    rep.macro_f1 = resp.at("macro_f1").get<double>();
    rep.candidate_id = resp.value("candidate_id", "");
    return rep;
}

const ModelInfo& RemoteEvaluator::model_info() const { return impl_->info; }

const std::string& RemoteEvaluator::dataset_id(Split split) const {
    return split == Split::dev ? impl_->dev_id : impl_->train_id;
}

}  // namespace cliptune
