#ifndef CBLLM_SERVICE_HPP_
#define CBLLM_SERVICE_HPP_

#include <atomic>
#include <charconv>
#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/dataset.hpp"
#include "cbllm/interpret.hpp"
#include "cbllm/model.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cbllm {

struct ApiRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

// One model per process. Readers take the current snapshot; unlearn/restore
// build a new model off to the side and publish it as the next version, so
// reads during a mutation see the previous version. A mutation arriving while
// another is in flight, or carrying a stale expected_version, gets 409.
class ModelService {
 public:
  ModelService(CbmModel model, DatasetSplit dataset, std::string checkpoint_id)
      : dataset_(std::move(dataset)), checkpoint_id_(std::move(checkpoint_id)) {
    if (dataset_.n_classes() != model.n()) {
      throw ValidationError("dataset class count does not match the model");
    }
    CbmModel clean = model;
    clean.restore();
    raw_ = concept_activations(clean, dataset_.texts);
    snap_ = std::make_shared<const Snapshot>(
        Snapshot{std::make_shared<const CbmModel>(std::move(model)), 0});
  }

  std::uint64_t version() const { return snapshot()->version; }
  std::shared_ptr<const CbmModel> model() const { return snapshot()->model; }
  const DatasetSplit& dataset() const { return dataset_; }

  // Holds every mutation for this long inside the writer lock (tests use it
  // to widen race windows).
  void set_mutation_delay(std::chrono::milliseconds d) { delay_ = d; }

  ApiResponse handle(const ApiRequest& req) const {
    try {
      return route(req);
    } catch (const NotFound& e) {
      return error(404, e.what());
    } catch (const Conflict& e) {
      return error(409, e.what());
    } catch (const ValidationError& e) {
      return error(400, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("bad request body: ") + e.what());
    } catch (const std::exception& e) {
      return error(500, e.what());
    }
  }

  ApiResponse handle(const ApiRequest& req) {
    try {
      if (req.method == "POST" && req.path == "/unlearn") return post_unlearn(req);
      if (req.method == "POST" && req.path == "/restore") return post_restore(req);
    } catch (const NotFound& e) {
      return error(404, e.what());
    } catch (const Conflict& e) {
      return error(409, e.what());
    } catch (const ValidationError& e) {
      return error(400, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("bad request body: ") + e.what());
    } catch (const std::exception& e) {
      return error(500, e.what());
    }
    return std::as_const(*this).handle(req);
  }

  nlohmann::json audit_log() const {
    std::shared_lock lk(audit_mu_);
    return audit_;
  }

  void bind(httplib::Server& svr) {
    auto glue = [this](const httplib::Request& hr, httplib::Response& res) {
      ApiRequest req{hr.method, hr.path, {}, hr.body};
      for (const auto& [k, v] : hr.params) req.query[k] = v;
      auto out = handle(req);
      res.status = out.status;
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_content(out.body.dump(), "application/json");
    };
    svr.Get(".*", glue);
    svr.Post(".*", glue);
    svr.Options(".*", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
  }

 private:
  struct Snapshot {
    std::shared_ptr<const CbmModel> model;
    std::uint64_t version;
  };
  struct NotFound : Error {
    using Error::Error;
  };
  struct Conflict : Error {
    using Error::Error;
  };

  std::shared_ptr<const Snapshot> snapshot() const {
    std::shared_lock lk(snap_mu_);
    return snap_;
  }

  static ApiResponse error(int status, const std::string& msg) {
    return {status, {{"error", msg}, {"status", status}}};
  }

  static std::size_t parse_index(std::string_view s, const char* what) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
      throw ValidationError(std::string(what) + " must be a non-negative integer");
    }
    return v;
  }

  static std::size_t query_count(const ApiRequest& req, const char* key, std::size_t dflt) {
    auto it = req.query.find(key);
    if (it == req.query.end()) return dflt;
    auto v = parse_index(it->second, key);
    if (v == 0) throw ValidationError(std::string(key) + " must be >= 1");
    return v;
  }

  static nlohmann::json parse_body(const ApiRequest& req) {
    if (trim(req.body).empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw ValidationError("request body must be a JSON object");
    return j;
  }

  std::vector<double> masked_row(const CbmModel& m, std::size_t x) const {
    auto r = raw_.row(x);
    std::vector<double> a(r.begin(), r.end());
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (m.is_masked(j)) a[j] = 0.0;
    }
    return a;
  }

  nlohmann::json unlearned_json(const CbmModel& m) const {
    nlohmann::json arr = nlohmann::json::array();
    for (auto j : m.unlearned_concepts()) {
      nlohmann::json modes = nlohmann::json::array();
      if (m.is_masked(j)) modes.push_back(to_string(UnlearnMode::kMaskNeuron));
      if (m.is_zeroed(j)) modes.push_back(to_string(UnlearnMode::kZeroWeights));
      arr.push_back({{"concept_index", j}, {"concept", m.concepts().concept_text(j)}, {"modes", modes}});
    }
    return arr;
  }

  ApiResponse route(const ApiRequest& req) const {
    const auto snap = snapshot();
    const auto& m = *snap->model;
    const auto parts = split(req.path, '/');  // "", seg1, seg2, ...
    if (req.method == "GET") {
      if (req.path == "/model/summary") {
        return {200,
                {{"checkpoint", checkpoint_id_},
                 {"dataset", m.concepts().dataset_id()},
                 {"n", m.n()},
                 {"k", m.k()},
                 {"d", m.d()},
                 {"samples", dataset_.size()},
                 {"version", snap->version},
                 {"unlearned", unlearned_json(m)}}};
      }
      if (req.path == "/classes") {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& cls : m.concepts().classes()) {
          auto [lo, hi] = m.concepts().class_range(cls.index);
          nlohmann::json cs = nlohmann::json::array();
          for (auto j = lo; j < hi; ++j) {
            cs.push_back({{"index", j},
                          {"text", m.concepts().concept_text(j)},
                          {"masked", m.is_masked(j)},
                          {"zeroed", m.is_zeroed(j)}});
          }
          arr.push_back({{"index", cls.index}, {"name", cls.name}, {"concepts", cs}});
        }
        return {200, {{"version", snap->version}, {"classes", arr}}};
      }
      if (parts.size() == 4 && parts[1] == "neurons" && parts[3] == "top") {
        auto j = parse_index(parts[2], "neuron index");
        if (j >= m.k()) throw NotFound("no neuron " + parts[2] + " (k=" + std::to_string(m.k()) + ")");
        if (m.is_masked(j)) throw Conflict("neuron " + parts[2] + " is masked in version " +
                                           std::to_string(snap->version));
        auto prof = neuron_top_k(m, raw_, j, query_count(req, "k", kDefaultTopK));
        auto body = to_json(prof);
        for (auto& t : body["top"]) t["text"] = dataset_.texts[t["sample"].get<std::size_t>()];
        body["version"] = snap->version;
        return {200, body};
      }
      if (parts.size() == 4 && parts[1] == "samples" && parts[3] == "explanation") {
        auto x = parse_index(parts[2], "sample id");
        if (x >= dataset_.size()) throw NotFound("no sample " + parts[2]);
        auto e = explain_activations(m, masked_row(m, x), query_count(req, "r", kDefaultExplainR));
        e.sample = x;
        auto body = to_json(e);
        body["text"] = dataset_.texts[x];
        body["label"] = dataset_.labels[x];
        body["version"] = snap->version;
        return {200, body};
      }
      if (req.path == "/audit") return {200, {{"version", snap->version}, {"log", audit_log()}}};
    } else if (req.method == "POST" && req.path == "/predict") {
      auto body = parse_body(req);
      if (!body.contains("text") || !body["text"].is_string()) {
        throw ValidationError("predict needs a string field 'text'");
      }
      const auto text = body["text"].get<std::string>();
      std::size_t r = kDefaultExplainR;
      if (body.contains("r")) {
        r = body["r"].get<std::size_t>();
        if (r == 0) throw ValidationError("r must be >= 1");
      }
      auto e = explain(m, text, r);
      auto out = to_json(e);
      out["version"] = snap->version;
      return {200, out};
    }
    if (req.method == "POST" && (req.path == "/unlearn" || req.path == "/restore")) {
      throw Error("mutation routed to the read path");
    }
    throw NotFound("no route " + req.method + " " + req.path);
  }

  // Single writer; a busy lock is a conflict, not a wait.
  std::unique_lock<std::mutex> writer_lock() {
    std::unique_lock lk(writer_mu_, std::try_to_lock);
    if (!lk.owns_lock()) throw Conflict("another mutation is in progress");
    return lk;
  }

  void check_expected(const nlohmann::json& body, std::uint64_t current) const {
    if (body.contains("expected_version")) {
      auto ev = body["expected_version"].get<std::uint64_t>();
      if (ev != current) {
        throw Conflict("expected version " + std::to_string(ev) + " but current is " +
                       std::to_string(current));
      }
    }
  }

  void publish(std::shared_ptr<const CbmModel> m, std::uint64_t version) {
    auto next = std::make_shared<const Snapshot>(Snapshot{std::move(m), version});
    std::unique_lock lk(snap_mu_);
    snap_ = std::move(next);
  }

  void audit(nlohmann::json entry) {
    std::unique_lock lk(audit_mu_);
    audit_.push_back(std::move(entry));
  }

  ApiResponse post_unlearn(const ApiRequest& req) {
    auto body = parse_body(req);
    if (!body.contains("concept_index")) throw ValidationError("unlearn needs 'concept_index'");
    if (!body["concept_index"].is_number_integer() || body["concept_index"].get<long long>() < 0) {
      throw ValidationError("concept_index must be a non-negative integer");
    }
    const auto j = body["concept_index"].get<std::size_t>();
    const auto mode = parse_unlearn_mode(body.value("mode", to_string(UnlearnMode::kZeroWeights)));
    auto lk = writer_lock();
    const auto snap = snapshot();
    check_expected(body, snap->version);
    if (j >= snap->model->k()) throw NotFound("no concept " + std::to_string(j));
    if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
    auto res = unlearn(*snap->model, j, mode, raw_);
    auto version = snap->version;
    if (res.report.changed) {
      version += 1;
      publish(std::make_shared<const CbmModel>(std::move(res.model)), version);
      audit({{"version", version}, {"op", "unlearn"}, {"concept_index", j}, {"mode", to_string(mode)},
             {"flipped", res.report.flipped.size()}});
    }
    auto out = to_json(res.report);
    out["version"] = version;
    return {200, out};
  }

  ApiResponse post_restore(const ApiRequest& req) {
    auto body = parse_body(req);
    auto lk = writer_lock();
    const auto snap = snapshot();
    check_expected(body, snap->version);
    if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
    bool changed = false;
    auto restored = restore(*snap->model, &changed);
    auto version = snap->version;
    std::vector<std::string> warnings;
    if (changed) {
      version += 1;
      publish(std::make_shared<const CbmModel>(std::move(restored)), version);
      audit({{"version", version}, {"op", "restore"}});
    } else {
      warnings.emplace_back("nothing to restore");
    }
    return {200, {{"version", version}, {"changed", changed}, {"warnings", warnings}}};
  }

  DatasetSplit dataset_;
  std::string checkpoint_id_;
  Matrix raw_;  // unmasked A_N over the dataset; backbone and CBL never change here

  mutable std::shared_mutex snap_mu_;
  std::shared_ptr<const Snapshot> snap_;
  std::mutex writer_mu_;
  mutable std::shared_mutex audit_mu_;
  nlohmann::json audit_ = nlohmann::json::array();
  std::chrono::milliseconds delay_{0};
};

}  // namespace cbllm

#endif  // CBLLM_SERVICE_HPP_
