// Command-line entry point for the dialogue-coherence pipeline.
//
// Every command reads an optional JSON config, applies flag overrides, and
// writes its artifacts plus a config snapshot into a fresh run directory.
// Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime failure.

#include "hsdial/chat_service.hpp"
#include "hsdial/pipeline.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace hsdial;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // (dotted key, value) from named options
};

// Registers an option whose value, when given, overrides `key`.
void bind(CLI::App* app, Common& common, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&common, key](const std::string& v) { common.flags.emplace_back(key, v); }, help);
}

void add_common(CLI::App* app, Common& common) {
  app->add_option("-c,--config", common.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("--set", common.sets, "override a config key, e.g. --set sampling.mode=semi");
  bind(app, common, "--seed", "seed", "experiment seed");
  bind(app, common, "--workers", "workers", "worker threads (1 keeps runs reproducible)");
  bind(app, common, "--out", "output_dir", "parent directory for run directories");
  bind(app, common, "--run-name", "run_name", "fixed run directory name");
  bind(app, common, "--corpus", "corpus.dir", "ingest run directory");
  bind(app, common, "--train-file", "corpus.train", "training dialogues");
  bind(app, common, "--test-file", "corpus.test", "test dialogues");
  bind(app, common, "--model", "inputs.model", "model checkpoint");
  bind(app, common, "--classifier", "inputs.classifier", "classifier checkpoint");
}

ExperimentConfig resolve(const Common& common) {
  nlohmann::json j = nlohmann::json::object();
  if (!common.config.empty()) {
    std::ifstream in(common.config);
    j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("config " + common.config + " is not valid JSON");
  }
  for (const auto& [key, value] : common.flags) apply_override(j, key, value);
  for (const auto& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected KEY=VALUE, got " + s);
    try {
      apply_override(j, s.substr(0, eq), s.substr(eq + 1));
    } catch (const DataError& e) {
      throw CLI::ValidationError("--set", e.what());
    }
  }
  return experiment_from_json(j);
}

int run_stage(const Common& common, const std::string& command,
              nlohmann::json (*stage)(const ExperimentConfig&, const fs::path&)) {
  const auto cfg = resolve(common);
  const auto dir = make_run_dir(cfg, command);
  std::cerr << "run directory: " << dir.string() << "\n";
  std::cout << stage(cfg, dir).dump(2) << "\n";
  return kOk;
}

int run_eval(const std::string& run_dir) {
  const auto out = stage_eval(run_dir);
  std::cout << nlohmann::json{{"stored", to_json(out.stored)},
                              {"recomputed", to_json(out.recomputed)},
                              {"identical", out.identical}}
                   .dump(2)
            << "\n";
  if (!out.identical) {
    std::cerr << "recomputed metrics differ from " << (fs::path(run_dir) / "metrics.json").string() << "\n";
    return kRuntime;
  }
  return kOk;
}

int run_serve(const Common& common) {
  const auto cfg = resolve(common);
  ModelRegistry registry;
  if (!cfg.serve.registry.empty()) {
    registry = ModelRegistry::load(cfg.serve.registry);
  } else if (!cfg.inputs.model.empty()) {
    auto lm = load_model(cfg.inputs.model);
    auto tok = std::make_shared<WhitespaceTokenizer>(lm.vocab);
    registry.add("model", {std::make_shared<Transformer>(std::move(lm.model)), tok});
    if (!cfg.inputs.classifier.empty()) {
      auto lc = load_classifier(cfg.inputs.classifier);
      registry.set_classifier(std::make_shared<EncoderClassifier>(std::move(lc.classifier)));
    }
  } else {
    throw DataError("serve needs serve.registry or inputs.model");
  }
  ServiceConfig sc;
  sc.turn_limit = cfg.serve.turn_limit;
  sc.decode = cfg.decode.decode;
  sc.max_input_tokens = cfg.train.max_input_tokens;
  sc.seed = cfg.seed;
  ChatService service(std::move(registry), sc, cfg.serve.store);
  httplib::Server server;
  mount_routes(server, service);
  std::cerr << "serving on http://" << cfg.serve.host << ":" << cfg.serve.port << "\n";
  if (!server.listen(cfg.serve.host, cfg.serve.port)) {
    std::cerr << "could not listen on " << cfg.serve.host << ":" << cfg.serve.port << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsdial: hierarchical-sampling dialogue training and coherence evaluation"};
  app.require_subcommand(1);
  Common common;

  struct Stage {
    const char* name;
    const char* help;
    nlohmann::json (*fn)(const ExperimentConfig&, const fs::path&);
  };
  const Stage stages[] = {
      {"ingest", "load or generate a corpus and write train/test splits and the vocabulary", stage_ingest},
      {"train", "train a dialogue model (sampling.mode selects mixed-context training)", stage_train},
      {"train-classifier", "train the coherence classifier", stage_train_classifier},
      {"rl-finetune", "fine-tune a model against the coherence judge", stage_rl_finetune},
      {"self-talk", "run self-talk conversations and write transcripts and metrics", stage_self_talk},
      {"figures", "write CSVs for turn, beam, contradiction and golden-prefix curves", stage_figures},
  };
  std::vector<std::pair<CLI::App*, const Stage*>> stage_cmds;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, common);
    stage_cmds.emplace_back(sub, &s);
  }
  for (auto& [sub, s] : stage_cmds) {
    if (std::string(s->name) == "train") {
      bind(sub, common, "--mode", "sampling.mode", "off | utterance | semi | hierarchical | noise");
      bind(sub, common, "--epochs", "train.epochs", "training epochs");
    }
    if (std::string(s->name) == "self-talk" || std::string(s->name) == "figures") {
      bind(sub, common, "--k", "eval.K", "utterances per conversation, prompt included");
      bind(sub, common, "--d", "eval.D", "number of prompts");
      bind(sub, common, "--beam", "decode.beam_size", "beam size");
      bind(sub, common, "--judge", "eval.judge", "oracle | classifier");
      bind(sub, common, "--rerank", "decode.rerank", "true to re-rank beam candidates");
    }
    if (std::string(s->name) == "rl-finetune") {
      bind(sub, common, "--iterations", "rl.iterations", "policy updates");
      bind(sub, common, "--judge", "eval.judge", "oracle | classifier");
    }
  }
  std::string eval_dir;
  auto* eval = app.add_subcommand("eval", "recompute a self-talk run's metrics and compare with the stored report");
  eval->add_option("run_dir", eval_dir, "self-talk run directory")->required()->check(CLI::ExistingDirectory);
  auto* serve = app.add_subcommand("serve", "start the chat and annotation HTTP service");
  add_common(serve, common);
  bind(serve, common, "--port", "serve.port", "TCP port");
  bind(serve, common, "--host", "serve.host", "bind address");
  bind(serve, common, "--registry", "serve.registry", "model registry JSON");
  bind(serve, common, "--store", "serve.store", "session store directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (eval->parsed()) return run_eval(eval_dir);
    if (serve->parsed()) return run_serve(common);
    for (auto& [sub, s] : stage_cmds)
      if (sub->parsed()) return run_stage(common, s->name, s->fn);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
