#ifndef CBLLM_PIPELINE_HPP_
#define CBLLM_PIPELINE_HPP_

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cbllm/checkpoint.hpp"
#include "cbllm/common.hpp"
#include "cbllm/concept_store.hpp"
#include "cbllm/dataset.hpp"
#include "cbllm/embedding.hpp"
#include "cbllm/model.hpp"
#include "cbllm/scoring.hpp"
#include "cbllm/training.hpp"
#include "json.hpp"

namespace cbllm {

namespace fs = std::filesystem;

// ---- accuracy ----

inline double eval_accuracy(const CbmModel& model, const DatasetSplit& split) {
  if (split.size() == 0) throw ValidationError("eval_accuracy: empty split");
  if (split.n_classes() != model.n()) throw ValidationError("eval_accuracy: class count mismatch");
  std::size_t correct = 0;
  for (std::size_t x = 0; x < split.size(); ++x) {
    correct += model.forward_predict(split.texts[x]).predicted == split.labels[x];
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

// ---- configuration ----

// kind: "token_encoder" (random table over `tokenizer`), "static" (pretrained
// static encoder `encoder`, fine-tuned) or "features" (frozen embedder output).
struct BackboneSpec {
  std::string kind = "token_encoder";
  std::string tokenizer = "hash:buckets=4096:seed=0";
  std::size_t dim = 64;
  std::string encoder;

  nlohmann::json to_json() const {
    return {{"kind", kind}, {"tokenizer", tokenizer}, {"dim", dim}, {"encoder", encoder}};
  }
};

struct StageToggles {
  bool acs = true, acc = true, cbl = true, head = true, eval = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path dataset;  // manifest
  std::string train_split = "train";
  std::string test_split = "test";
  fs::path concepts;
  std::string embedder = "mock:seed=0:dim=64";
  BackboneSpec backbone;
  fs::path output_dir;
  StageToggles stages;
  TrainConfig train;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"dataset", dataset.string()},
            {"train_split", train_split},
            {"test_split", test_split},
            {"concepts", concepts.string()},
            {"embedder", embedder},
            {"backbone", backbone.to_json()},
            {"output_dir", output_dir.string()},
            {"stages",
             {{"acs", stages.acs},
              {"acc", stages.acc},
              {"cbl", stages.cbl},
              {"head", stages.head},
              {"eval", stages.eval}}},
            {"train", train.to_json()}};
  }
};

// Relative paths resolve against `base` (the config file's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base = {}) {
  RunConfig c;
  auto path = [&](const char* key) {
    fs::path p = j.at(key).get<std::string>();
    return p.is_absolute() ? p : base / p;
  };
  try {
    if (!j.contains("seed")) throw ValidationError("run config: 'seed' is mandatory");
    c.seed = j.at("seed").get<std::uint64_t>();
    c.dataset = path("dataset");
    c.concepts = path("concepts");
    c.output_dir = path("output_dir");
    c.train_split = j.value("train_split", c.train_split);
    c.test_split = j.value("test_split", c.test_split);
    c.embedder = j.value("embedder", c.embedder);
    if (j.contains("backbone")) {
      const auto& b = j["backbone"];
      c.backbone.kind = b.value("kind", c.backbone.kind);
      c.backbone.tokenizer = b.value("tokenizer", c.backbone.tokenizer);
      c.backbone.dim = b.value("dim", c.backbone.dim);
      c.backbone.encoder = b.value("encoder", c.backbone.encoder);
    }
    if (j.contains("stages")) {
      const auto& s = j["stages"];
      c.stages.acs = s.value("acs", true);
      c.stages.acc = s.value("acc", true);
      c.stages.cbl = s.value("cbl", true);
      c.stages.head = s.value("head", true);
      c.stages.eval = s.value("eval", true);
    }
    c.train = TrainConfig::from_json(j.value("train", nlohmann::json::object()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run config: ") + e.what());
  }
  c.train.seed = c.seed;
  if (c.backbone.kind != "token_encoder" && c.backbone.kind != "static" &&
      c.backbone.kind != "features") {
    throw ValidationError("run config: unknown backbone kind '" + c.backbone.kind + "'");
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return run_config_from_json(j, fs::path(path).parent_path());
}

// ---- report ----

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
  bool reused = false;
};

struct RunReport {
  std::vector<StageTiming> stages;
  double total_seconds = 0.0;
  std::optional<double> accuracy;
  std::optional<double> sparsity;  // fraction of |w| < 1e-6
  std::size_t near_zero = 0;
  std::size_t head_entries = 0;
  std::optional<double> cbl_similarity;  // mean Sim after stage 1
  bool scores_corrected = false;
  std::uint64_t embed_calls = 0;
  nlohmann::json config;

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stages) {
      st.push_back({{"stage", s.stage}, {"seconds", s.seconds}, {"reused", s.reused}});
    }
    nlohmann::json j = {{"stages", st},
                        {"total_seconds", total_seconds},
                        {"scores_corrected", scores_corrected},
                        {"embed_calls", embed_calls},
                        {"near_zero", near_zero},
                        {"head_entries", head_entries},
                        {"config", config}};
    j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json(nullptr);
    j["sparsity"] = sparsity ? nlohmann::json(*sparsity) : nlohmann::json(nullptr);
    j["cbl_similarity"] = cbl_similarity ? nlohmann::json(*cbl_similarity) : nlohmann::json(nullptr);
    return j;
  }
};

inline std::string report_timing(const RunReport& r) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-8s %12s %12s\n", "stage", "seconds", "hours");
  out += buf;
  for (const auto& s : r.stages) {
    std::snprintf(buf, sizeof buf, "%-8s %12.3f %12.6f%s\n", s.stage.c_str(), s.seconds,
                  s.seconds / 3600.0, s.reused ? "  (reused)" : "");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-8s %12.3f %12.6f\n", "total", r.total_seconds,
                r.total_seconds / 3600.0);
  out += buf;
  return out;
}

// ---- orchestration ----

// One run per output directory.
class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw StageError("output directory is locked by another run (" + path_.string() +
                       "); remove it if no run is active");
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

struct RunOptions {
  std::ostream* log = nullptr;
  bool force = false;  // rerun stages even when their inputs are unchanged
  // Replaces the embedder named in the config (tests inject counting mocks).
  std::shared_ptr<EmbeddingBackend> embedder;
};

namespace detail {

inline std::string file_hash_hex(const fs::path& p) { return to_hex(file_digest(p.string())); }

// Stage records in <out>/stages.json.
class StageManifest {
 public:
  explicit StageManifest(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      try {
        data_ = nlohmann::json::parse(read_text_file(path_.string()));
      } catch (const nlohmann::json::parse_error& e) {
        throw StageError(path_.string() + " is corrupt: " + e.what());
      }
    } else {
      data_ = nlohmann::json::object();
    }
  }

  const nlohmann::json* get(const std::string& stage) const {
    auto it = data_.find(stage);
    return it == data_.end() ? nullptr : &*it;
  }

  void put(const std::string& stage, nlohmann::json rec) {
    data_[stage] = std::move(rec);
    auto tmp = path_;
    tmp += ".tmp";
    write_text_file(tmp.string(), data_.dump(2) + "\n");
    fs::rename(tmp, path_);
  }

 private:
  fs::path path_;
  nlohmann::json data_;
};

}  // namespace detail

inline std::unique_ptr<Backbone> make_backbone(const BackboneSpec& spec,
                                               std::shared_ptr<EmbeddingBackend> embedder,
                                               std::uint64_t seed) {
  if (spec.kind == "token_encoder") {
    return TokenEncoder::random(make_tokenizer(spec.tokenizer), spec.dim, seed ^ 0xBB0EULL);
  }
  if (spec.kind == "static") {
    auto be = make_backend(spec.encoder);
    auto* st = dynamic_cast<StaticEmbeddingBackend*>(be.get());
    if (!st) throw ValidationError("static backbone needs a static encoder, got " + spec.encoder);
    return TokenEncoder::from_static(*st);
  }
  return std::make_unique<FeatureBackbone>(std::move(embedder));
}

inline RunReport run_pipeline(const RunConfig& cfg, const RunOptions& opt = {}) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  auto log = [&](const std::string& s) {
    if (opt.log) *opt.log << s << "\n";
  };
  auto seconds_since = [](clock::time_point t) {
    return std::chrono::duration<double>(clock::now() - t).count();
  };

  cfg.train.validate();
  for (const auto& [p, what] : {std::pair{cfg.dataset, "dataset manifest"},
                                std::pair{cfg.concepts, "concept set"}}) {
    if (!fs::exists(p)) throw ValidationError(std::string(what) + " not found: " + p.string());
  }
  fs::create_directories(cfg.output_dir);
  RunLock lock(cfg.output_dir / ".lock");
  detail::StageManifest manifest(cfg.output_dir / "stages.json");

  auto manifest_ds = load_manifest(cfg.dataset.string());
  auto concepts = std::make_shared<const ConceptSet>(load_concept_set(cfg.concepts.string()));
  if (concepts->n() != manifest_ds.class_names.size()) {
    throw ValidationError("concept set has " + std::to_string(concepts->n()) +
                          " classes but dataset has " +
                          std::to_string(manifest_ds.class_names.size()));
  }
  // Copy next to the checkpoints so they can be reloaded on their own.
  save_concept_set(*concepts, (cfg.output_dir / "concepts.json").string());
  auto train = load_split(manifest_ds, cfg.train_split);
  const auto train_hash = detail::file_hash_hex(manifest_ds.splits.at(cfg.train_split));

  std::shared_ptr<EmbeddingBackend> embedder = opt.embedder;
  auto need_embedder = [&]() {
    if (!embedder) embedder = make_backend(cfg.embedder);
    return embedder;
  };
  if (cfg.backbone.kind == "features") need_embedder();

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;

  RunReport report;
  report.config = cfg.to_json();
  report.scores_corrected = cfg.stages.acc;

  // Upstream artifact of `stage`, verified against the hash recorded when it
  // was produced.
  auto artifact = [&](const std::string& stage, const std::string& file,
                      const std::string& needed_by) {
    const auto* rec = manifest.get(stage);
    auto path = cfg.output_dir / file;
    if (!rec || !rec->contains("outputs") || !(*rec)["outputs"].contains(file)) {
      throw StageError(needed_by + " needs " + file + " from stage " + stage +
                       ", which has not completed; enable it");
    }
    if (!fs::exists(path)) {
      throw StageError(needed_by + " needs " + path.string() + " (missing); rerun stage " + stage);
    }
    const auto recorded = (*rec)["outputs"][file].get<std::string>();
    const auto actual = detail::file_hash_hex(path);
    if (recorded != actual) {
      throw StageError("refusing to run " + needed_by + ": input " + path.string() + " has hash " +
                       actual.substr(0, 16) + " but stage " + stage + " recorded " +
                       recorded.substr(0, 16) + " (modified after it was written); rerun " + stage);
    }
    return std::pair{path, actual};
  };

  // Runs `body` unless a prior record has the same fingerprint and intact
  // outputs.
  auto stage = [&](const std::string& name, const nlohmann::json& inputs,
                   const std::vector<std::string>& outputs, auto&& body) {
    const auto fp = to_hex(sha256(inputs.dump()));
    if (!opt.force) {
      if (const auto* rec = manifest.get(name); rec && rec->value("fingerprint", "") == fp) {
        bool intact = true;
        for (const auto& f : outputs) {
          auto p = cfg.output_dir / f;
          intact = intact && fs::exists(p) && (*rec)["outputs"].value(f, "") == detail::file_hash_hex(p);
        }
        if (intact) {
          log("[" + name + "] up to date, reusing");
          report.stages.push_back({name, rec->value("seconds", 0.0), true});
          return;
        }
      }
    }
    log("[" + name + "] running");
    const auto t0 = clock::now();
    body();
    const double secs = seconds_since(t0);
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& f : outputs) outs[f] = detail::file_hash_hex(cfg.output_dir / f);
    manifest.put(name, {{"fingerprint", fp}, {"inputs", inputs}, {"outputs", outs}, {"seconds", secs}});
    report.stages.push_back({name, secs, false});
    log("[" + name + "] done in " + std::to_string(secs) + " s");
  };

  const std::string kAcs = "scores_acs.scm", kAcc = "scores_acc.scm", kCbl = "cbl.ckpt",
                    kModel = "model.ckpt", kEval = "eval.json";

  if (cfg.stages.acs) {
    nlohmann::json in = {{"train", train_hash},
                         {"concepts", concepts->hash_hex()},
                         {"embedder", need_embedder()->id()}};
    stage("acs", in, {kAcs}, [&] {
      const auto before = embedder->stats().embed_calls;
      auto s = acs_score_dataset(train.texts, *concepts, *embedder);
      report.embed_calls = embedder->stats().embed_calls - before;
      save_scores(s, (cfg.output_dir / kAcs).string());
    });
  }

  if (cfg.stages.acc) {
    auto [p, h] = artifact("acs", kAcs, "acc");
    nlohmann::json in = {{"scores", h}, {"train", train_hash}};
    stage("acc", in, {kAcc}, [&, p = p] {
      auto loaded = load_scores(p.string(), concepts.get());
      auto s = acc_correct(loaded.scores, train.labels, *concepts);
      save_scores(s, (cfg.output_dir / kAcc).string());
    });
  }

  if (cfg.stages.cbl) {
    const bool use_acc = cfg.stages.acc;
    auto [p, h] = use_acc ? artifact("acc", kAcc, "cbl") : artifact("acs", kAcs, "cbl");
    nlohmann::json in = {{"scores", h},
                         {"corrected", use_acc},
                         {"train", train_hash},
                         {"backbone", cfg.backbone.to_json()},
                         {"embedder", cfg.backbone.kind == "features" ? embedder->id() : ""},
                         {"config", tc.to_json()}};
    stage("cbl", in, {kCbl}, [&, p = p] {
      auto loaded = load_scores(p.string(), concepts.get());
      for (const auto& w : loaded.warnings) log("warning: " + w);
      if (loaded.scores.corrected != use_acc) {
        throw StageError("score file " + p.string() + " has corrected=" +
                         (loaded.scores.corrected ? "true" : "false") + ", expected otherwise");
      }
      auto model = CbmModel::create(make_backbone(cfg.backbone, embedder, cfg.seed), concepts, tc);
      auto rep = train_cbl(model, train.texts, loaded.scores);
      if (!rep.epoch_loss.empty()) report.cbl_similarity = -rep.epoch_loss.back();
      save_checkpoint(model, (cfg.output_dir / kCbl).string());
    });
  }

  if (cfg.stages.head) {
    auto [p, h] = artifact("cbl", kCbl, "head");
    nlohmann::json in = {{"cbl", h}, {"train", train_hash}, {"config", tc.to_json()}};
    stage("head", in, {kModel}, [&, p = p] {
      auto model = load_checkpoint(p.string(), concepts, embedder);
      model.set_config(tc);
      train_predictor(model, train.texts, train.labels);
      save_checkpoint(model, (cfg.output_dir / kModel).string());
    });
  }

  if (cfg.stages.eval) {
    auto [p, h] = artifact("head", kModel, "eval");
    auto test = load_split(manifest_ds, cfg.test_split);
    nlohmann::json in = {{"model", h},
                         {"test", detail::file_hash_hex(manifest_ds.splits.at(cfg.test_split))}};
    stage("eval", in, {kEval}, [&, p = p] {
      auto model = load_checkpoint(p.string(), concepts, embedder);
      nlohmann::json e = {{"accuracy", eval_accuracy(model, test)},
                          {"sparsity", head_sparsity(model.head())},
                          {"near_zero", count_near_zero(model.head())},
                          {"head_entries", model.head().w.data.size()},
                          {"test_size", test.size()}};
      write_text_file((cfg.output_dir / kEval).string(), e.dump(2) + "\n");
    });
    auto e = nlohmann::json::parse(read_text_file((cfg.output_dir / kEval).string()));
    report.accuracy = e.at("accuracy").get<double>();
    report.sparsity = e.at("sparsity").get<double>();
    report.near_zero = e.at("near_zero").get<std::size_t>();
    report.head_entries = e.at("head_entries").get<std::size_t>();
  }

  report.total_seconds = seconds_since(t_start);
  write_text_file((cfg.output_dir / "report.json").string(), report.to_json().dump(2) + "\n");
  return report;
}

}  // namespace cbllm

#endif  // CBLLM_PIPELINE_HPP_
