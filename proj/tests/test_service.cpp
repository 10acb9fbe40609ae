#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "cliptune/rng.hpp"
#include "cliptune/service.hpp"
#include "cliptune/tune.hpp"

using namespace cliptune;
using nlohmann::json;

namespace {

ModelConfig wire_config() {
    ModelConfig c;
    c.vocab_size = 16;
    c.emb_dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.ffn_dim = 16;
    c.max_seq = 16;
    c.num_classes = 2;
    c.dropout_sites = ModelConfig::all_dropout_sites(1);
    return c;
}

// One served model plus its few-shot data, bound to an ephemeral port.
struct Fixture {
    FrozenModel model;
    FewShotDataset train;
    FewShotDataset dev;
    ModelService service;
    int port;

    Fixture()
        : model(build_toy_model(wire_config(), 21)),
          service(model) {
        const FewShotDataset full = gen_synthetic_task(2, 6, 16, 4, 13);
        auto [tr, dv] = sample_few_shot(full, 3, 5);
        train = std::move(tr);
        dev = std::move(dv);
        port = service.start();
        REQUIRE(port > 0);
    }

    ~Fixture() { service.stop(); }

    json get(const std::string& path) {
        httplib::Client cli("127.0.0.1", port);
        auto res = cli.Get(path);
        REQUIRE(res);
        REQUIRE(res->status == 200);
        return json::parse(res->body);
    }

    std::pair<int, json> post(const std::string& path, const std::string& body) {
        httplib::Client cli("127.0.0.1", port);
        auto res = cli.Post(path, body, "application/json");
        REQUIRE(res);
        return {res->status, json::parse(res->body)};
    }

    std::pair<int, json> post(const std::string& path, const json& body) {
        return post(path, body.dump());
    }
};

PromptEmbedding wire_prompt(uint64_t seed) {
    PromptEmbedding p;
    p.values = MatF(2, 8);
    RngStream rng(seed);
    for (auto& v : p.values.data()) v = float(rng.next_gaussian() * 0.2);
    return p;
}

json prompt_rows(const PromptEmbedding& p) {
    json rows = json::array();
    for (std::size_t r = 0; r < p.prompt_len(); ++r) {
        json row = json::array();
        for (std::size_t e = 0; e < p.emb_dim(); ++e) row.push_back(double(p.values.at(r, e)));
        rows.push_back(std::move(row));
    }
    return rows;
}

json dataset_body(const FewShotDataset& ds) {
    json samples = json::array();
    for (const auto& s : ds.samples) {
        samples.push_back(json{{"tokens", s.tokens}, {"label", s.label}});
    }
    return json{{"num_classes", ds.num_classes},
                {"split", split_name(ds.split)},
                {"provenance", ds.provenance},
                {"samples", std::move(samples)}};
}

std::string error_field(const json& body) {
    return body.at("error").at("field").get<std::string>();
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("model info reports the served dimensions") {
    Fixture fx;
    const json info = fx.get("/v1/model_info");
    CHECK(info.at("vocab_size") == 16);
    CHECK(info.at("emb_dim") == 8);
    CHECK(info.at("layers") == 1);
    CHECK(info.at("heads") == 2);
    CHECK(info.at("ffn_dim") == 16);
    CHECK(info.at("max_seq") == 16);
    CHECK(info.at("num_classes") == 2);
    CHECK(info.at("fingerprint") == fx.model.fingerprint());
    CHECK(info.at("batch_limit") == kMaxBatchSize);
    CHECK(info.at("p_clip_range").at(0) == 0.0);
    CHECK(info.at("p_clip_range").at(1) == kMaxServedPClip);
    CHECK(info.at("dropout_sites").get<std::vector<std::string>>() ==
          fx.model.config().dropout_sites);
}

TEST_CASE("forward returns per-tag logits matching the local model") {
    Fixture fx;
    const PromptEmbedding prompt = wire_prompt(31);
    const std::vector<std::vector<uint32_t>> batch{{2, 3, 4}, {5, 6}};

    json req{{"prompt", prompt_rows(prompt)},
             {"inputs", batch},
             {"clip", {{"mode", "static"}, {"p_clip", 0.2}, {"tags", {"n1", "n0"}}}},
             {"request_id", "req-7"}};
    const auto [status, resp] = fx.post("/v1/forward", req);
    REQUIRE(status == 200);
    CHECK(resp.at("request_id") == "req-7");
    const json& results = resp.at("results");
    REQUIRE(results.size() == 2);  // request tag order preserved
    CHECK(results[0].at("tag") == "n1");
    CHECK(results[1].at("tag") == "n0");

    for (const auto& entry : results) {
        const ClipSpec spec{entry.at("tag").get<std::string>(), 0.2, ClipMode::static_};
        const auto local = forward_batch(fx.model, prompt, batch, spec);
        const json& logits = entry.at("logits");
        REQUIRE(logits.size() == batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            REQUIRE(logits[i].size() == 2);
            for (std::size_t cl = 0; cl < 2; ++cl) {
                // float32 -> JSON -> double is exact, so compare exactly
                CHECK(logits[i][cl].get<double>() == double(local[i].logits[cl]));
            }
        }
    }

    // off mode: one pass, empty tag, equal to the unclipped network
    json off_req{{"prompt", prompt_rows(prompt)},
                 {"inputs", batch},
                 {"clip", {{"mode", "off"}, {"p_clip", 0.0}, {"tags", json::array()}}}};
    const auto [off_status, off_resp] = fx.post("/v1/forward", off_req);
    REQUIRE(off_status == 200);
    CHECK(off_resp.at("request_id") == "");
    REQUIRE(off_resp.at("results").size() == 1);
    CHECK(off_resp.at("results")[0].at("tag") == "");
    const ClipSpec off{"", 0.0, ClipMode::off};
    const auto local_off = forward_batch(fx.model, prompt, batch, off);
    CHECK(off_resp.at("results")[0].at("logits")[0][0].get<double>() ==
          double(local_off[0].logits[0]));
}

TEST_CASE("forward validates the request") {
    Fixture fx;
    const PromptEmbedding prompt = wire_prompt(31);
    const json good_clip{{"mode", "static"}, {"p_clip", 0.1}, {"tags", {"a"}}};

    auto [s1, b1] = fx.post("/v1/forward", std::string("{nope"));
    CHECK(s1 == 400);
    CHECK(error_field(b1) == "body");

    auto [s2, b2] = fx.post("/v1/forward",
                            json{{"prompt", prompt_rows(prompt)}, {"inputs", {{2}}}});
    CHECK(s2 == 400);
    CHECK(error_field(b2) == "clip");

    auto [s3, b3] = fx.post(
        "/v1/forward",
        json{{"prompt", prompt_rows(prompt)},
             {"inputs", {{2}}},
             {"clip", {{"mode", "sideways"}, {"p_clip", 0.1}, {"tags", {"a"}}}}});
    CHECK(s3 == 400);
    CHECK(error_field(b3) == "clip.mode");

    auto [s4, b4] = fx.post(
        "/v1/forward",
        json{{"prompt", prompt_rows(prompt)},
             {"inputs", {{2}}},
             {"clip", {{"mode", "static"}, {"p_clip", 0.96}, {"tags", {"a"}}}}});
    CHECK(s4 == 400);
    CHECK(error_field(b4) == "clip.p_clip");
    CHECK(b4.at("error").at("message").get<std::string>().find("outside accepted range") !=
          std::string::npos);

    auto [s5, b5] = fx.post("/v1/forward",
                            json{{"inputs", {{2}}}, {"clip", good_clip}});
    CHECK(s5 == 400);
    CHECK(error_field(b5) == "prompt");

    auto [s6, b6] = fx.post("/v1/forward",
                            json{{"prompt", prompt_rows(prompt)}, {"clip", good_clip}});
    CHECK(s6 == 400);
    CHECK(error_field(b6) == "inputs");

    json big{{"prompt", prompt_rows(prompt)}, {"clip", good_clip}};
    json inputs = json::array();
    for (std::size_t i = 0; i < kMaxBatchSize + 1; ++i) inputs.push_back(json::array({2}));
    big["inputs"] = std::move(inputs);
    auto [s7, b7] = fx.post("/v1/forward", big);
    CHECK(s7 == 400);
    CHECK(error_field(b7) == "inputs");
    CHECK(b7.at("error").at("message").get<std::string>().find("exceeds limit") !=
          std::string::npos);

    // token id outside the vocabulary surfaces the model's own complaint
    auto [s8, b8] = fx.post("/v1/forward", json{{"prompt", prompt_rows(prompt)},
                                                {"inputs", {{99}}},
                                                {"clip", good_clip}});
    CHECK(s8 == 400);
    CHECK(error_field(b8) == "inputs");
}

TEST_CASE("dataset registration is idempotent by content") {
    Fixture fx;
    CHECK(fx.service.dataset_count() == 0);

    const auto [s1, b1] = fx.post("/v1/datasets", dataset_body(fx.train));
    REQUIRE(s1 == 200);
    const std::string id1 = b1.at("dataset_id").get<std::string>();
    CHECK(id1 == "ds-1");
    CHECK(b1.at("fingerprint") == fx.train.fingerprint());
    CHECK(b1.at("size") == fx.train.size());
    CHECK(fx.service.dataset_count() == 1);

    // same content, repeated (as a retry would): same id, no new entry
    const auto [s2, b2] = fx.post("/v1/datasets", dataset_body(fx.train));
    REQUIRE(s2 == 200);
    CHECK(b2.at("dataset_id") == id1);
    CHECK(fx.service.dataset_count() == 1);

    const auto [s3, b3] = fx.post("/v1/datasets", dataset_body(fx.dev));
    REQUIRE(s3 == 200);
    CHECK(b3.at("dataset_id") == "ds-2");
    CHECK(fx.service.dataset_count() == 2);
}

TEST_CASE("dataset registration validates the payload") {
    Fixture fx;
    json body = dataset_body(fx.train);
    body["num_classes"] = 5;  // more than the model serves
    auto [s1, b1] = fx.post("/v1/datasets", body);
    CHECK(s1 == 400);
    CHECK(error_field(b1) == "num_classes");

    body = dataset_body(fx.train);
    body["samples"][0]["label"] = 7;
    auto [s2, b2] = fx.post("/v1/datasets", body);
    CHECK(s2 == 400);
    CHECK(error_field(b2) == "samples");

    body = dataset_body(fx.train);
    body["split"] = "holdout";
    auto [s3, b3] = fx.post("/v1/datasets", body);
    CHECK(s3 == 400);
    CHECK(error_field(b3) == "split");

    body = dataset_body(fx.train);
    body["samples"] = json::array();
    auto [s4, b4] = fx.post("/v1/datasets", body);
    CHECK(s4 == 400);
    CHECK(error_field(b4) == "samples");
}

TEST_CASE("score matches the in-process evaluation") {
    Fixture fx;
    const auto [rs, rb] = fx.post("/v1/datasets", dataset_body(fx.train));
    REQUIRE(rs == 200);
    const std::string ds_id = rb.at("dataset_id").get<std::string>();

    const PromptEmbedding prompt = wire_prompt(32);
    const std::vector<std::string> tags{"net-0", "net-1", "net-2"};
    json req{{"dataset_id", ds_id},
             {"prompt", prompt_rows(prompt)},
             {"clip", {{"mode", "static"}, {"p_clip", 0.1}, {"tags", tags}}},
             {"fitness", {{"kind", "hinge"}, {"margin", 2.0}}},
             {"candidate_id", "g0-c1"},
             {"request_id", "req-9"}};
    const auto [status, resp] = fx.post("/v1/score", req);
    REQUIRE(status == 200);

    const FitnessFunction fn{FitnessKind::hinge, 2.0};
    const FitnessReport local =
        evaluate_prompt(fx.model, fx.train, prompt, tags, 0.1, fn, "g0-c1");
    CHECK(resp.at("request_id") == "req-9");
    CHECK(resp.at("candidate_id") == "g0-c1");
    CHECK(resp.at("mean_loss").get<double>() == local.mean_loss);
    CHECK(resp.at("accuracy").get<double>() == local.accuracy);
    CHECK(resp.at("macro_f1").get<double>() == local.macro_f1);
    CHECK(resp.at("per_subnetwork_loss").get<std::vector<double>>() ==
          local.per_subnetwork_loss);

    // cross-entropy variant goes through the same plumbing
    req["fitness"] = {{"kind", "ce"}};
    const auto [s2, r2] = fx.post("/v1/score", req);
    REQUIRE(s2 == 200);
    const FitnessReport local_ce = evaluate_prompt(
        fx.model, fx.train, prompt, tags, 0.1, FitnessFunction{FitnessKind::cross_entropy, 2.0},
        "g0-c1");
    CHECK(r2.at("mean_loss").get<double>() == local_ce.mean_loss);
}

TEST_CASE("score rejects unknown datasets and bad fitness blocks") {
    Fixture fx;
    const PromptEmbedding prompt = wire_prompt(32);
    json req{{"dataset_id", "ds-99"},
             {"prompt", prompt_rows(prompt)},
             {"clip", {{"mode", "static"}, {"p_clip", 0.1}, {"tags", {"a"}}}}};
    const auto [s1, b1] = fx.post("/v1/score", req);
    CHECK(s1 == 404);
    CHECK(error_field(b1) == "dataset_id");
    CHECK(b1.at("error").at("message").get<std::string>().find("unknown dataset id 'ds-99'") !=
          std::string::npos);

    const auto [rs, rb] = fx.post("/v1/datasets", dataset_body(fx.train));
    REQUIRE(rs == 200);
    req["dataset_id"] = rb.at("dataset_id");
    req["fitness"] = {{"kind", "mse"}};
    const auto [s2, b2] = fx.post("/v1/score", req);
    CHECK(s2 == 400);
    CHECK(error_field(b2) == "fitness.kind");

    req["fitness"] = {{"kind", "hinge"}, {"margin", 0.0}};
    const auto [s3, b3] = fx.post("/v1/score", req);
    CHECK(s3 == 400);
    CHECK(error_field(b3) == "fitness");
}

TEST_CASE("remote evaluator equals the local one") {
    Fixture fx;
    RemoteEvaluator remote("127.0.0.1", fx.port, fx.train, fx.dev);
    LocalEvaluator local(fx.model, fx.train, fx.dev);

    CHECK(remote.model_info().emb_dim == 8);
    CHECK(remote.model_info().fingerprint == fx.model.fingerprint());
    CHECK(remote.dataset_id(Split::train) == "ds-1");
    CHECK(remote.dataset_id(Split::dev) == "ds-2");

    const PromptEmbedding prompt = wire_prompt(33);
    const std::vector<std::string> tags{"net-0", "net-1"};
    const FitnessFunction fn{FitnessKind::hinge, 2.0};
    for (Split split : {Split::train, Split::dev}) {
        const FitnessReport r = remote.score(split, prompt, tags, 0.1, fn, "g2-c0");
        const FitnessReport l = local.score(split, prompt, tags, 0.1, fn, "g2-c0");
        CHECK(r.mean_loss == l.mean_loss);  // doubles survive the wire exactly
        CHECK(r.accuracy == l.accuracy);
        CHECK(r.macro_f1 == l.macro_f1);
        CHECK(r.per_subnetwork_loss == l.per_subnetwork_loss);
        CHECK(r.candidate_id == "g2-c0");
    }
}

TEST_CASE("remote evaluator refuses a mismatched model") {
    Fixture fx;
    RemoteEvaluator::Options opt;
    opt.expected_emb_dim = 999;
    CHECK_THROWS_WITH_AS(RemoteEvaluator("127.0.0.1", fx.port, fx.train, fx.dev, opt),
                         doctest::Contains("does not match expected"), std::runtime_error);

    RemoteEvaluator::Options opt2;
    opt2.expected_num_classes = 7;
    CHECK_THROWS_WITH_AS(RemoteEvaluator("127.0.0.1", fx.port, fx.train, fx.dev, opt2),
                         doctest::Contains("classes"), std::runtime_error);

    FewShotDataset odd = fx.train;
    odd.num_classes = 1;
    for (auto& s : odd.samples) s.label = 0;
    CHECK_THROWS_WITH_AS(RemoteEvaluator("127.0.0.1", fx.port, odd, fx.dev),
                         doctest::Contains("datasets have"), std::runtime_error);
}

TEST_CASE("remote evaluator gives up after its retry budget") {
    FewShotDataset train = gen_synthetic_task(2, 2, 16, 4, 1);
    train.split = Split::train;
    RemoteEvaluator::Options opt;
    opt.max_retries = 2;
    opt.timeout_seconds = 0.5;
    // port 1 is never served here, so every attempt fails at connect
    CHECK_THROWS_WITH_AS(RemoteEvaluator("127.0.0.1", 1, train, train, opt),
                         doctest::Contains("failed after 2 attempts"), std::runtime_error);
}

TEST_CASE("the documented protocol examples replay verbatim") {
    // The files under docs/protocol/ were captured against this exact model
    // (the fixture's config, seed 21), so a drifting wire format shows up
    // here as a diff against the documentation.
    Fixture fx;
    const auto load = [](const char* name) {
        const std::filesystem::path path =
            std::filesystem::path(CLIPTUNE_DOCS_DIR) / "protocol" / name;
        std::ifstream in(path, std::ios::binary);
        REQUIRE_MESSAGE(bool(in), "missing ", path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return json::parse(ss.str());
    };

    CHECK(fx.get("/v1/model_info") == load("model_info.response.json"));

    const auto [ds_status, ds_resp] = fx.post("/v1/datasets", load("datasets.request.json"));
    CHECK(ds_status == 200);
    CHECK(ds_resp == load("datasets.response.json"));

    const auto [fw_status, fw_resp] = fx.post("/v1/forward", load("forward.request.json"));
    CHECK(fw_status == 200);
    CHECK(fw_resp == load("forward.response.json"));

    const auto [sc_status, sc_resp] = fx.post("/v1/score", load("score.request.json"));
    CHECK(sc_status == 200);
    CHECK(sc_resp == load("score.response.json"));

    const auto [er_status, er_resp] = fx.post("/v1/forward", load("error.request.json"));
    CHECK(er_status == 400);
    CHECK(er_resp == load("error.response.json"));
}

TEST_CASE("tuning over the wire reproduces the local trajectory") {
    Fixture fx;
    PromptEmbedding p0;
    p0.values = MatF(2, 8);
    const Projection w = init_projection(6, 16, 44);

    TuneConfig cfg;
    cfg.agent = AgentKind::cma;
    cfg.intrinsic_dim = 6;
    cfg.population = 4;
    cfg.steps = 3;
    cfg.subnetworks = 2;
    cfg.p_clip = 0.1;
    cfg.fitness = FitnessFunction{FitnessKind::hinge, 2.0};
    cfg.sigma0 = 0.5;
    cfg.seed = 9;

    LocalEvaluator local(fx.model, fx.train, fx.dev);
    const TuneResult lr = tune(local, p0, w, cfg);

    RemoteEvaluator remote("127.0.0.1", fx.port, fx.train, fx.dev);
    const TuneResult rr = tune(remote, p0, w, cfg);

    CHECK_FALSE(lr.aborted);
    CHECK_FALSE(rr.aborted);
    CHECK(history_csv(lr.history) == history_csv(rr.history));
    CHECK(lr.best_z.values == rr.best_z.values);
    CHECK(lr.best_dev_accuracy == rr.best_dev_accuracy);
}

}  // TEST_SUITE
