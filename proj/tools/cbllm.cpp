// cbllm command-line tool. Exit codes: 0 ok, 2 invalid input, 3 stage failure.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbllm/cbllm.hpp"
#include "cbllm/service.hpp"

using namespace cbllm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

std::shared_ptr<const ConceptSet> read_concepts(const std::string& path) {
  return std::make_shared<const ConceptSet>(load_concept_set(path));
}

// Defaults to concepts.json next to the checkpoint (what `run` writes).
std::string concepts_for(const std::string& concepts, const std::string& checkpoint) {
  if (!concepts.empty()) return concepts;
  auto p = fs::path(checkpoint).parent_path() / "concepts.json";
  if (!fs::exists(p)) throw ValidationError("--concepts is required (no " + p.string() + ")");
  return p.string();
}

DatasetSplit read_split(const std::string& manifest, const std::string& split) {
  return load_split(load_manifest(manifest), split);
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

struct ModelArgs {
  std::string checkpoint, concepts;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("--concepts", concepts, "concept set (default: concepts.json beside the checkpoint)");
  }
  CbmModel load() const {
    return load_checkpoint(checkpoint, read_concepts(concepts_for(concepts, checkpoint)));
  }
};

struct DataArgs {
  std::string dataset, split = "test";

  void add(CLI::App* app, const std::string& dflt_split, bool required = true) {
    split = dflt_split;
    auto* o = app->add_option("--dataset", dataset, "dataset manifest.json")->check(CLI::ExistingFile);
    if (required) o->required();
    app->add_option("--split", split, "split name")->capture_default_str();
  }
  DatasetSplit load() const { return read_split(dataset, split); }
};

std::vector<ClassPromptSpec> read_prompt_spec(const std::string& path) {
  auto j = nlohmann::json::parse(read_text_file(path));
  std::vector<ClassPromptSpec> specs;
  for (const auto& c : j) {
    specs.push_back({c.at("class_name").get<std::string>(),
                     c.at("examples").get<std::vector<std::string>>(), c.at("count").get<std::size_t>()});
  }
  return specs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept bottleneck text classifiers: build, train, inspect, edit"};
  app.require_subcommand(1);
  std::function<void()> action;

  // ---- concepts ----
  auto* concepts = app.add_subcommand("concepts", "concept prompts and concept sets");
  concepts->require_subcommand(1);

  std::string prompt_spec, prompt_dir;
  auto* c_prompts = concepts->add_subcommand("build-prompts", "write one prompt file per class");
  c_prompts->add_option("--spec", prompt_spec, "JSON list of {class_name, examples[4], count}")
      ->required()->check(CLI::ExistingFile);
  c_prompts->add_option("--out", prompt_dir, "output directory")->required();
  c_prompts->callback([&] {
    action = [&] {
      for (const auto& p : write_prompt_files(build_prompts(read_prompt_spec(prompt_spec)), prompt_dir)) {
        std::cout << p << "\n";
      }
    };
  });

  std::string response_file;
  auto* c_parse = concepts->add_subcommand("parse", "extract concepts from a chat-model response");
  c_parse->add_option("response", response_file, "response text file")->required()->check(CLI::ExistingFile);
  c_parse->callback([&] {
    action = [&] {
      auto parsed = parse_concept_response(read_text_file(response_file));
      for (const auto& c : parsed.concepts) std::cout << c << "\n";
      if (parsed.warnings) std::cerr << "warning: " << parsed.warnings << " malformed spans skipped\n";
    };
  });

  std::string asm_dataset, asm_responses, asm_out, asm_spec;
  auto* c_asm = concepts->add_subcommand("assemble", "merge per-class responses into a concept set");
  c_asm->add_option("--dataset-id", asm_dataset, "dataset identifier")->required();
  c_asm->add_option("--spec", asm_spec, "prompt spec (class names in index order)")
      ->required()->check(CLI::ExistingFile);
  c_asm->add_option("--responses", asm_responses, "directory with response_<i>.txt")
      ->required()->check(CLI::ExistingDirectory);
  c_asm->add_option("--out", asm_out, "concept set JSON")->required();
  c_asm->callback([&] {
    action = [&] {
      auto specs = read_prompt_spec(asm_spec);
      auto prompts = build_prompts(specs);
      FixtureConceptGenerator gen(asm_responses);
      std::vector<ConceptClass> subsets;
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto parsed = parse_concept_response(gen.complete(prompts[i], i));
        subsets.push_back({i, specs[i].class_name, parsed.concepts});
      }
      auto out = assemble_concept_set(asm_dataset, std::move(subsets));
      for (const auto& c : out.conflicts) {
        std::cerr << "dropped duplicate '" << c.concept_text << "' from class " << c.dropped_class
                  << " (kept in class " << c.kept_class << ")\n";
      }
      save_concept_set(out.set, asm_out);
      std::cout << "wrote " << asm_out << ": " << out.set.n() << " classes, k=" << out.set.k() << "\n";
    };
  });

  // ---- score ----
  auto* score = app.add_subcommand("score", "concept scoring");
  score->require_subcommand(1);

  DataArgs acs_data;
  std::string acs_concepts, acs_embedder = "mock:seed=0:dim=64", acs_out;
  auto* s_acs = score->add_subcommand("acs", "score texts against concepts with the embedder");
  acs_data.add(s_acs, "train");
  s_acs->add_option("--concepts", acs_concepts, "concept set")->required()->check(CLI::ExistingFile);
  s_acs->add_option("--embedder", acs_embedder, "mock:seed=S:dim=D, static:<dir> or a cached model id")
      ->capture_default_str();
  s_acs->add_option("--out", acs_out, "score matrix (.scm)")->required();
  s_acs->callback([&] {
    action = [&] {
      auto split = acs_data.load();
      auto set = read_concepts(acs_concepts);
      auto be = make_backend(acs_embedder);
      auto s = acs_score_dataset(split.texts, *set, *be);
      save_scores(s, acs_out);
      std::cout << "m=" << s.m << " k=" << s.k << " embed calls=" << be->stats().embed_calls << "\n";
    };
  });

  DataArgs acc_data;
  std::string acc_in, acc_concepts, acc_out;
  auto* s_acc = score->add_subcommand("acc", "correct scores with training labels");
  acc_data.add(s_acc, "train");
  s_acc->add_option("--scores", acc_in, "ACS score matrix")->required()->check(CLI::ExistingFile);
  s_acc->add_option("--concepts", acc_concepts, "concept set")->required()->check(CLI::ExistingFile);
  s_acc->add_option("--out", acc_out, "corrected score matrix")->required();
  s_acc->callback([&] {
    action = [&] {
      auto split = acc_data.load();
      auto set = read_concepts(acc_concepts);
      auto loaded = load_scores(acc_in, set.get());
      for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
      auto s = acc_correct(loaded.scores, split.labels, *set);
      save_scores(s, acc_out);
      std::size_t nz = 0;
      for (float v : s.values) nz += v != 0.0f;
      std::cout << "kept " << nz << " of " << s.values.size() << " entries\n";
    };
  });

  // ---- train ----
  auto* train = app.add_subcommand("train", "training stages");
  train->require_subcommand(1);

  DataArgs cbl_data;
  std::string cbl_concepts, cbl_scores, cbl_out, cbl_config, cbl_embedder = "mock:seed=0:dim=64";
  BackboneSpec cbl_backbone;
  std::uint64_t cbl_seed = 0;
  auto* t_cbl = train->add_subcommand("cbl", "stage 1: concept bottleneck layer (and backbone)");
  cbl_data.add(t_cbl, "train");
  t_cbl->add_option("--concepts", cbl_concepts, "concept set")->required()->check(CLI::ExistingFile);
  t_cbl->add_option("--scores", cbl_scores, "score matrix")->required()->check(CLI::ExistingFile);
  t_cbl->add_option("--config", cbl_config, "training config JSON")->check(CLI::ExistingFile);
  t_cbl->add_option("--seed", cbl_seed)->required();
  t_cbl->add_option("--backbone", cbl_backbone.kind, "token_encoder, static or features")->capture_default_str();
  t_cbl->add_option("--tokenizer", cbl_backbone.tokenizer)->capture_default_str();
  t_cbl->add_option("--dim", cbl_backbone.dim)->capture_default_str();
  t_cbl->add_option("--encoder", cbl_backbone.encoder, "static encoder id (static backbone)");
  t_cbl->add_option("--embedder", cbl_embedder, "embedder (features backbone)")->capture_default_str();
  t_cbl->add_option("--out", cbl_out)->required();
  t_cbl->callback([&] {
    action = [&] {
      auto split = cbl_data.load();
      auto set = read_concepts(cbl_concepts);
      TrainConfig cfg = cbl_config.empty() ? TrainConfig{}
                                           : TrainConfig::from_json(nlohmann::json::parse(read_text_file(cbl_config)));
      cfg.seed = cbl_seed;
      auto loaded = load_scores(cbl_scores, set.get());
      std::shared_ptr<EmbeddingBackend> be;
      if (cbl_backbone.kind == "features") be = make_backend(cbl_embedder);
      auto model = CbmModel::create(make_backbone(cbl_backbone, be, cbl_seed), set, cfg);
      auto rep = train_cbl(model, split.texts, loaded.scores);
      save_checkpoint(model, cbl_out);
      std::printf("steps %zu, mean similarity %.4f -> %.4f\n", rep.steps, -rep.initial_loss,
                  rep.epoch_loss.empty() ? -rep.initial_loss : -rep.epoch_loss.back());
    };
  });

  ModelArgs head_model;
  DataArgs head_data;
  std::string head_out;
  std::optional<double> head_lambda, head_alpha;
  std::optional<std::size_t> head_iters;
  auto* t_head = train->add_subcommand("head", "stage 2: sparse linear predictor");
  head_model.add(t_head);
  head_data.add(t_head, "train");
  t_head->add_option("--lambda", head_lambda, "elastic-net strength");
  t_head->add_option("--alpha", head_alpha, "L1 share of the penalty");
  t_head->add_option("--iterations", head_iters);
  t_head->add_option("--out", head_out)->required();
  t_head->callback([&] {
    action = [&] {
      auto model = head_model.load();
      auto cfg = model.config();
      if (head_lambda) cfg.lambda = *head_lambda;
      if (head_alpha) cfg.alpha = *head_alpha;
      if (head_iters) cfg.head_iterations = *head_iters;
      model.set_config(cfg);
      auto split = head_data.load();
      auto rep = train_predictor(model, split.texts, split.labels);
      save_checkpoint(model, head_out);
      std::printf("objective %.6f -> %.6f, sparsity %.4f\n", rep.objective.front(), rep.objective.back(),
                  head_sparsity(model.head()));
    };
  });

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluation");
  eval->require_subcommand(1);
  ModelArgs eval_model;
  DataArgs eval_data;
  auto* e_acc = eval->add_subcommand("accuracy", "test accuracy");
  eval_model.add(e_acc);
  eval_data.add(e_acc, "test");
  e_acc->callback([&] {
    action = [&] {
      auto model = eval_model.load();
      auto split = eval_data.load();
      print_json({{"accuracy", eval_accuracy(model, split)},
                  {"samples", split.size()},
                  {"sparsity", head_sparsity(model.head())}});
    };
  });

  // ---- interpret ----
  auto* interp = app.add_subcommand("interpret", "neurons, explanations, unlearning");
  interp->require_subcommand(1);

  ModelArgs n_model;
  DataArgs n_data;
  std::vector<std::size_t> n_neurons;
  std::size_t n_k = kDefaultTopK;
  auto* i_neurons = interp->add_subcommand("neurons", "top activating samples per neuron");
  n_model.add(i_neurons);
  n_data.add(i_neurons, "test");
  i_neurons->add_option("--neuron", n_neurons, "concept index (repeatable; default all)");
  i_neurons->add_option("-k,--top", n_k)->capture_default_str();
  i_neurons->callback([&] {
    action = [&] {
      auto model = n_model.load();
      auto split = n_data.load();
      auto acts = concept_activations(model, split.texts);
      if (n_neurons.empty()) {
        for (std::size_t j = 0; j < model.k(); ++j) {
          if (!model.is_masked(j)) n_neurons.push_back(j);
        }
      }
      nlohmann::json out = nlohmann::json::array();
      for (auto j : n_neurons) {
        auto p = to_json(neuron_top_k(model, acts, j, n_k));
        for (auto& t : p["top"]) t["text"] = split.texts[t["sample"].get<std::size_t>()];
        out.push_back(p);
      }
      print_json(out);
    };
  });

  ModelArgs x_model;
  DataArgs x_data;
  std::vector<std::size_t> x_samples;
  std::string x_text;
  std::size_t x_r = kDefaultExplainR;
  auto* i_explain = interp->add_subcommand("explain", "top contributing concepts for a prediction");
  x_model.add(i_explain);
  x_data.add(i_explain, "test", false);
  i_explain->add_option("--sample", x_samples, "sample id in the split (repeatable)");
  i_explain->add_option("--text", x_text, "free text to explain");
  i_explain->add_option("-r", x_r)->capture_default_str();
  i_explain->callback([&] {
    action = [&] {
      auto model = x_model.load();
      nlohmann::json out = nlohmann::json::array();
      if (!x_text.empty()) out.push_back(to_json(explain(model, x_text, x_r)));
      if (!x_samples.empty()) {
        if (x_data.dataset.empty()) throw ValidationError("--sample needs --dataset");
        auto split = x_data.load();
        for (auto x : x_samples) {
          if (x >= split.size()) throw ValidationError("sample " + std::to_string(x) + " out of range");
          auto e = to_json(explain(model, split.texts[x], x_r, x));
          e["text"] = split.texts[x];
          out.push_back(e);
        }
      }
      if (out.empty()) throw ValidationError("give --text or --sample");
      print_json(out);
    };
  });

  ModelArgs u_model;
  DataArgs u_data;
  std::size_t u_concept = 0;
  std::string u_mode = "zero-weights", u_out;
  bool u_restore = false;
  auto* i_unlearn = interp->add_subcommand("unlearn", "remove one concept and report flipped predictions");
  u_model.add(i_unlearn);
  u_data.add(i_unlearn, "test", false);
  i_unlearn->add_option("--concept", u_concept, "concept index");
  i_unlearn->add_option("--mode", u_mode, "zero-weights or mask-neuron")->capture_default_str();
  i_unlearn->add_flag("--restore", u_restore, "undo every unlearned concept instead");
  i_unlearn->add_option("--out", u_out, "write the edited checkpoint here")->required();
  i_unlearn->callback([&] {
    action = [&] {
      auto model = u_model.load();
      if (u_restore) {
        bool changed = false;
        auto back = restore(model, &changed);
        save_checkpoint(back, u_out);
        print_json({{"changed", changed}});
        return;
      }
      std::vector<std::string> probe;
      if (!u_data.dataset.empty()) probe = u_data.load().texts;
      auto res = unlearn(model, u_concept, parse_unlearn_mode(u_mode), probe);
      for (const auto& w : res.report.warnings) std::cerr << "warning: " << w << "\n";
      save_checkpoint(res.model, u_out);
      print_json(to_json(res.report));
    };
  });

  // ---- survey ----
  auto* survey = app.add_subcommand("survey", "human evaluation items and ratings");
  survey->require_subcommand(1);

  ModelArgs sg_model;
  DataArgs sg_data;
  std::string sg_name = "cbllm", sg_out, sg_html;
  std::size_t sg_neurons = 5, sg_k = kDefaultTopK, sg_samples = 5, sg_r = kDefaultExplainR;
  std::uint64_t sg_seed = 0;
  auto* v_gen = survey->add_subcommand("gen", "task 1 (neurons) and task 2 (explanations) items");
  sg_model.add(v_gen);
  sg_data.add(v_gen, "test");
  v_gen->add_option("--name", sg_name, "source name recorded in provenance")->capture_default_str();
  v_gen->add_option("--neurons", sg_neurons, "task 1 items per source")->capture_default_str();
  v_gen->add_option("-k", sg_k, "top samples shown per neuron")->capture_default_str();
  v_gen->add_option("--samples", sg_samples, "task 2 items")->capture_default_str();
  v_gen->add_option("-r", sg_r, "concepts shown per explanation")->capture_default_str();
  v_gen->add_option("--seed", sg_seed, "sampling seed for random baseline neurons and presentation order")->required();
  v_gen->add_option("--out", sg_out, "items JSON")->required();
  v_gen->add_option("--html", sg_html, "rendered survey page");
  v_gen->callback([&] {
    action = [&] {
      auto model = sg_model.load();
      auto split = sg_data.load();
      const auto dataset = model.concepts().dataset_id();
      auto ours = SurveySource::of_model(sg_name, model);
      auto rnd = SurveySource::random_baseline(model.concepts());
      auto neurons = most_activated_neurons(model, concept_activations(model, split.texts), sg_neurons);
      auto items = gen_task1_items(ours, dataset, split.texts, neurons, sg_k, sg_seed);
      auto base = gen_task1_items(rnd, dataset, split.texts, neurons, sg_k, sg_seed);
      items.insert(items.end(), base.begin(), base.end());
      Rng rng(sg_seed);
      auto picks = sample_without_replacement(split.size(), sg_samples, rng);
      auto t2 = gen_task2_items(ours, rnd, dataset, split.texts, picks, sg_r, sg_seed);
      items.insert(items.end(), t2.begin(), t2.end());
      write_text_file(sg_out, items_to_json_text(items));
      if (!sg_html.empty()) write_text_file(sg_html, render_survey_html(items));
      std::cout << "wrote " << items.size() << " items\n";
    };
  });

  std::string sa_items, sa_ratings;
  std::size_t sa_expected = kExpectedRatingsPerItem;
  bool sa_json = false;
  auto* v_agg = survey->add_subcommand("aggregate", "filter and average ratings");
  v_agg->add_option("--items", sa_items)->required()->check(CLI::ExistingFile);
  v_agg->add_option("--ratings", sa_ratings, "CSV or TSV: item_id, worker_id, rating | preference, rating_m1, rating_m2")
      ->required()->check(CLI::ExistingFile);
  v_agg->add_option("--expected", sa_expected, "ratings expected per item")->capture_default_str();
  v_agg->add_flag("--json", sa_json);
  v_agg->callback([&] {
    action = [&] {
      auto items = items_from_json_text(read_text_file(sa_items));
      auto rep = aggregate_ratings(items, parse_ratings(read_text_file(sa_ratings)), sa_expected);
      if (sa_json) {
        std::cout << to_json(rep).dump(2) << "\n";
      } else {
        std::cout << format_report(rep);
      }
    };
  });

  // ---- toy ----
  std::string toy_out;
  std::size_t toy_classes = 4, toy_train = 200, toy_test = 100;
  std::uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("toy", "write the synthetic topic task with concepts and a run config");
  toy->add_option("--out", toy_out)->required();
  toy->add_option("--classes", toy_classes)->capture_default_str()->check(CLI::Range(2, 4));
  toy->add_option("--train", toy_train)->capture_default_str();
  toy->add_option("--test", toy_test)->capture_default_str();
  toy->add_option("--seed", toy_seed)->capture_default_str();
  toy->callback([&] {
    action = [&] {
      auto t = make_toy_task(toy_seed, toy_train, toy_test, toy_classes);
      const fs::path dir = toy_out;
      save_dataset({"toy", t.train.class_names, {}}, {t.train, t.test}, dir / "data");
      save_concept_set(*t.concepts, (dir / "concepts.json").string());
      nlohmann::ordered_json cfg;
      cfg["seed"] = toy_seed;
      cfg["dataset"] = "data/manifest.json";
      cfg["concepts"] = "concepts.json";
      cfg["output_dir"] = "out";
      cfg["embedder"] = "mock:seed=0:dim=32";
      cfg["backbone"] = {{"kind", "token_encoder"}, {"tokenizer", "hash:buckets=512:seed=0"}, {"dim", 32}};
      cfg["train"] = {{"cbl_epochs", 5}, {"lambda", 1e-3}};
      write_text_file((dir / "run.json").string(), cfg.dump(2) + "\n");
      std::cout << "wrote " << (dir / "run.json").string() << "\n";
    };
  });

  // ---- run ----
  std::string run_config;
  bool run_force = false, run_quiet = false;
  auto* run = app.add_subcommand("run", "all enabled stages from a config file");
  run->add_option("--config", run_config, "run config JSON")->required()->check(CLI::ExistingFile);
  run->add_flag("--force", run_force, "rerun stages even when up to date");
  run->add_flag("-q,--quiet", run_quiet);
  run->callback([&] {
    action = [&] {
      auto cfg = load_run_config(run_config);
      RunOptions opt;
      opt.log = run_quiet ? nullptr : &std::cerr;
      opt.force = run_force;
      auto rep = run_pipeline(cfg, opt);
      std::cout << report_timing(rep);
      if (rep.accuracy) std::printf("accuracy %.4f\n", *rep.accuracy);
      if (rep.sparsity) std::printf("sparsity %.4f (%zu of %zu near zero)\n", *rep.sparsity, rep.near_zero, rep.head_entries);
    };
  });

  // ---- serve ----
  ModelArgs sv_model;
  DataArgs sv_data;
  std::string sv_host = "127.0.0.1";
  int sv_port = 8080;
  auto* serve = app.add_subcommand("serve", "HTTP inspection and unlearning service");
  sv_model.add(serve);
  sv_data.add(serve, "test");
  serve->add_option("--host", sv_host)->capture_default_str();
  serve->add_option("--port", sv_port)->capture_default_str()->check(CLI::Range(0, 65535));
  serve->callback([&] {
    action = [&] {
      ModelService svc(sv_model.load(), sv_data.load(), sv_model.checkpoint);
      httplib::Server svr;
      svc.bind(svr);
      static httplib::Server* running = &svr;
      std::signal(SIGINT, [](int) { running->stop(); });
      std::signal(SIGTERM, [](int) { running->stop(); });
      const int port = sv_port == 0 ? svr.bind_to_any_port(sv_host) : (svr.bind_to_port(sv_host, sv_port) ? sv_port : -1);
      if (port < 0) throw StageError("cannot bind " + sv_host + ":" + std::to_string(sv_port));
      std::cerr << "listening on http://" << sv_host << ":" << port << "\n";
      svr.listen_after_bind();
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }
  try {
    if (action) action();
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad JSON: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
}
