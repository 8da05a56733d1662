#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "avoid/metrics.hpp"
#include "avoid/pipeline.hpp"
#include "avoid/remote.hpp"
#include "avoid/synthetic.hpp"
#include "avoid/theory.hpp"

namespace avoid::cli {

namespace fs = std::filesystem;

inline std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot hash " + p.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

// Hashes a file, or every regular file directly inside a directory.
inline json digest(const fs::path& p) {
  if (fs::is_directory(p)) {
    json j = json::object();
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_regular_file() && e.path().filename().string().find(".manifest.json") == std::string::npos)
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) j[f.filename().string()] = sha256_file(f);
    return j;
  }
  return sha256_file(p);
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config;
  json seeds = json::object();
  std::vector<fs::path> inputs, outputs;
  json extra = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  // Written to <first output>.manifest.json (or <dir>/<command>.manifest.json).
  fs::path write() const {
    if (outputs.empty()) return {};
    json in = json::object(), out = json::object();
    for (const auto& p : inputs)
      if (fs::exists(p)) in[p.string()] = digest(p);
    for (const auto& p : outputs)
      if (fs::exists(p)) out[p.string()] = digest(p);
    json j{{"command", command},
           {"argv", argv},
           {"resolved_config", config},
           {"rng_seeds", seeds},
           {"inputs", in},
           {"outputs", out},
           {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
    for (auto& [k, v] : extra.items()) j[k] = v;
    const auto& first = outputs.front();
    fs::path target = fs::is_directory(first) ? first / (command + ".manifest.json")
                                              : fs::path(first.string() + ".manifest.json");
    std::ofstream os(target);
    os << j.dump(2) << '\n';
    return target;
  }
};

struct BackendOptions {
  std::string backend = "mock";
  std::string embed = "hash";
  std::size_t embed_dim = 768;
  std::uint64_t embed_seed = HashEmbeddingProvider::kDefaultSeed;
  RemoteConfig remote;

  void add(CLI::App* app) {
    app->add_option("--backend", backend, "Decision backend")->check(CLI::IsMember({"mock", "remote"}));
    app->add_option("--embed", embed, "Embedding provider")->check(CLI::IsMember({"hash", "remote"}));
    app->add_option("--embed-dim", embed_dim, "Embedding width")->check(CLI::PositiveNumber);
    app->add_option("--embed-seed", embed_seed, "Hash embedding seed");
    app->add_option("--remote-url", remote.base_url, "Base URL of the chat/embedding service");
    app->add_option("--model", remote.model, "Remote chat model name");
    app->add_option("--embed-model", remote.embed_model, "Remote embedding model name");
    app->add_option("--api-key-env", remote.api_key_env, "Environment variable holding the API key");
    app->add_option("--retries", remote.max_retries, "Retries per remote request")->check(CLI::NonNegativeNumber);
    app->add_option("--backoff-ms", remote.backoff_ms, "Initial retry backoff")->check(CLI::NonNegativeNumber);
  }

  std::unique_ptr<EmbeddingProvider> provider() const {
    if (embed == "remote") return std::make_unique<RemoteEmbeddingProvider>(remote, embed_dim);
    return std::make_unique<HashEmbeddingProvider>(embed_dim, embed_seed);
  }
  ProviderSpec spec() const { return {embed, embed_dim, embed_seed}; }

  std::unique_ptr<DecisionBackend> decision_backend() const {
    if (backend == "remote") return std::make_unique<RemoteBackend>(remote);
    return std::make_unique<MockBackend>();
  }
};

struct DetectorOptions {
  DetectorConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--lrec", cfg.lambda_rec, "Reconstruction loss weight")->check(CLI::NonNegativeNumber);
    app->add_option("--lskl", cfg.lambda_skl, "Symmetric KL weight")->check(CLI::NonNegativeNumber);
    app->add_option("--lr", cfg.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    app->add_option("--epochs", cfg.max_epochs, "Maximum epochs")->check(CLI::PositiveNumber);
    app->add_option("--patience", cfg.patience, "Early-stopping patience")->check(CLI::PositiveNumber);
    app->add_option("--batch", cfg.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
    app->add_option("--hidden", cfg.hidden, "Recurrent hidden width")->check(CLI::PositiveNumber);
    app->add_option("--token-dim", cfg.token_dim, "Token vector width")->check(CLI::PositiveNumber);
    app->add_option("--gat-hidden", cfg.gat_hidden, "Graph attention width")->check(CLI::PositiveNumber);
    app->add_option("--latent", cfg.latent, "Latent width")->check(CLI::PositiveNumber);
    app->add_option("--monitor", cfg.monitor, "Early-stopping quantity")->check(CLI::IsMember({"cls", "total"}));
    app->add_option("--seed", cfg.seed, "Training seed");
  }
};

struct SimOptions {
  SimulationConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--seed", cfg.rng_seed, "Simulation seed");
    app->add_option("--depth", cfg.max_depth, "Maximum cascade depth")->check(CLI::PositiveNumber);
    app->add_option("--seeds", cfg.seed_count, "Seed agents per item")->check(CLI::PositiveNumber);
    app->add_option("--max-steps", cfg.max_steps, "Step cap (0 = depth only)")->check(CLI::NonNegativeNumber);
    app->add_option("--verifier-fraction", cfg.verifier_fraction, "Share of verifier agents")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--consolidation-period", cfg.consolidation_period, "Steps between consolidations")
        ->check(CLI::PositiveNumber);
    app->add_flag("--global-warnings", cfg.global_warnings, "Warnings reach every agent");
    app->add_flag("--calibrate", cfg.calibrate, "Verifier policy reflection on labelled train items");
  }
};

inline std::vector<double> parse_grid(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() != 3) throw ConfigError("grid must be start:stop:step, got '" + spec + "'");
  const double a = std::stod(parts[0]), b = std::stod(parts[1]), s = std::stod(parts[2]);
  if (!(s > 0) || b < a) throw ConfigError("bad grid '" + spec + "'");
  std::vector<double> out;
  for (int k = 0;; ++k) {
    const double v = a + k * s;
    if (v > b + 1e-9) break;
    out.push_back(std::round(v * 1e9) / 1e9);
  }
  return out;
}

inline std::vector<const NewsItem*> select_news(const Corpus& corpus, const std::string& split, const std::string& ids_file,
                                                std::size_t limit) {
  std::vector<const NewsItem*> out;
  if (!ids_file.empty()) {
    std::ifstream in(ids_file);
    if (!in) throw InputError("cannot open " + ids_file);
    for (std::string line; std::getline(in, line);) {
      line = text::trim(line);
      if (line.empty()) continue;
      const auto* n = corpus.find_news(line);
      if (!n) throw InputError("unknown news id " + line + " in " + ids_file);
      out.push_back(n);
    }
  } else if (split == "all") {
    for (const auto& n : corpus.news()) out.push_back(&n);
  } else {
    auto s = parse_split(split);
    if (!s) throw ConfigError("unknown split " + split);
    out = corpus.split(*s);
  }
  if (limit > 0 && out.size() > limit) out.resize(limit);
  return out;
}

inline std::vector<CascadeGraph> load_run_cascades(const std::vector<std::string>& runs, RunFile* first = nullptr) {
  std::vector<CascadeGraph> gs;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    auto rf = load_run(runs[i]);
    gs.insert(gs.end(), rf.cascades.begin(), rf.cascades.end());
    if (i == 0 && first) *first = std::move(rf);
  }
  return gs;
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw InputError("cannot write " + p.string());
  os << s;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

/// Parses argv and runs one subcommand. Exit codes: 0 success, 1 pipeline
/// error (message on stderr as JSON), 2 usage error.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Virtual propagation simulation and fake-news detection toolkit", "avoid"};
  app.set_config("--config", "", "Key-value config file (flags take precedence)");
  app.require_subcommand(1);
  app.fallthrough();

  Manifest manifest;
  for (int i = 0; i < argc; ++i) manifest.argv.emplace_back(argv[i]);
  std::function<void()> action;

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus");
  synth::SynthConfig synth_cfg;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--users", synth_cfg.users, "User count")->check(CLI::Range(3, 1000000));
  synth->add_option("--news", synth_cfg.news, "News count")->check(CLI::Range(10, 1000000));
  synth->add_option("--comments-per-news", synth_cfg.comments_per_news, "Comments per item");
  synth->add_option("--seed", synth_cfg.seed, "Generator seed");
  synth->callback([&] {
    action = [&] {
      auto c = synth::make_corpus(synth_cfg);
      save_corpus(c, synth_out);
      manifest.seeds["synth"] = synth_cfg.seed;
      manifest.outputs.push_back(synth_out);
      out << "wrote " << c.news().size() << " news, " << c.comments().size() << " comments, " << c.users().size()
          << " users to " << synth_out << "\n";
    };
  });

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate and normalise a corpus directory");
  std::string ingest_in, ingest_out;
  TruncationCaps caps;
  ingest->add_option("--corpus", ingest_in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  ingest->add_option("--out", ingest_out, "Output directory")->required();
  ingest->add_option("--max-sentences", caps.max_sentences, "Sentences kept per item")->check(CLI::PositiveNumber);
  ingest->add_option("--max-tokens", caps.max_tokens, "Tokens kept per sentence")->check(CLI::PositiveNumber);
  ingest->callback([&] {
    action = [&] {
      auto c = load_corpus(ingest_in, caps);
      save_corpus(c, ingest_out);
      json summary{{"news", c.news().size()}, {"comments", c.comments().size()}, {"users", c.users().size()}};
      for (auto s : {Split::Train, Split::Val, Split::Test}) summary["split"][to_string(s)] = c.split(s).size();
      write_json(fs::path(ingest_out) / "summary.json", summary);
      manifest.inputs.push_back(ingest_in);
      manifest.outputs.push_back(ingest_out);
      out << summary.dump() << "\n";
    };
  });

  // extract-personas
  auto* extract = app.add_subcommand("extract-personas", "Distil diffuser and verifier personas from training comments");
  std::string ex_corpus, ex_out;
  ExtractConfig ex_cfg;
  BackendOptions ex_backend;
  extract->add_option("--corpus", ex_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  extract->add_option("--out", ex_out, "Persona JSONL output")->required();
  extract->add_option("--seed", ex_cfg.seed, "Clustering seed");
  extract->add_option("--topics", ex_cfg.topics, "Topic clusters (0 = sqrt of news count)");
  extract->add_option("--max-per-topic", ex_cfg.max_per_topic, "Viewpoint groups per topic")->check(CLI::PositiveNumber);
  extract->add_option("--k-s", ex_cfg.sampling.k_s, "Evidence comments per group")->check(CLI::PositiveNumber);
  extract->add_option("--w-p", ex_cfg.sampling.w_p, "Prototypicality weight")->check(CLI::Range(0.0, 1.0));
  extract->add_option("--lambda", ex_cfg.distill.lambda, "Refinement similarity threshold");
  extract->add_option("--distill-batch", ex_cfg.distill.batch_size, "Comments per refinement round")
      ->check(CLI::PositiveNumber);
  extract->add_option("--max-rounds", ex_cfg.distill.max_rounds, "Refinement round cap")->check(CLI::PositiveNumber);
  extract->add_option("--verifier-fraction", ex_cfg.verifier_fraction, "Influential share for verifiers")
      ->check(CLI::Range(0.0, 1.0));
  ex_backend.add(extract);
  extract->callback([&] {
    action = [&] {
      auto corpus = load_corpus(ex_corpus);
      auto provider = ex_backend.provider();
      auto backend = ex_backend.decision_backend();
      DecisionClient client(*backend);
      auto pool = extract_personas(training_view(corpus), corpus.users(), *provider, client, ex_cfg);
      save_personas(ex_out, pool.all());
      manifest.seeds["extract"] = ex_cfg.seed;
      manifest.inputs.push_back(ex_corpus);
      manifest.outputs.push_back(ex_out);
      manifest.extra["token_ledger"] = client.ledger().to_json();
      out << "personas: " << pool.diffusers.size() << " diffuser, " << pool.verifiers.size() << " verifier\n";
    };
  });

  // simulate
  auto* simulate = app.add_subcommand("simulate", "Run virtual propagation for news items");
  std::string sim_corpus, sim_personas, sim_out, sim_split = "all", sim_ids, sim_ckpt, sim_resume;
  std::size_t sim_limit = 0;
  SimOptions sim;
  BackendOptions sim_backend;
  simulate->add_option("--corpus", sim_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  simulate->add_option("--personas", sim_personas, "Persona JSONL")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", sim_out, "Run file (JSONL)")->required();
  simulate->add_option("--split", sim_split, "Items to simulate")->check(CLI::IsMember({"train", "val", "test", "all"}));
  simulate->add_option("--ids", sim_ids, "File with one news id per line (overrides --split)")->check(CLI::ExistingFile);
  simulate->add_option("--limit", sim_limit, "Simulate at most this many items");
  simulate->add_option("--checkpoint", sim_ckpt, "Write the final environment state here");
  simulate->add_option("--resume", sim_resume, "Start from a saved environment state")->check(CLI::ExistingFile);
  sim.add(simulate);
  sim_backend.add(simulate);
  simulate->callback([&] {
    action = [&] {
      auto corpus = load_corpus(sim_corpus);
      auto pool = load_personas(sim_personas);
      auto provider = sim_backend.provider();
      auto backend = sim_backend.decision_backend();
      auto items = select_news(corpus, sim_split, sim_ids, sim_limit);
      Environment env = sim_resume.empty() ? init_environment(corpus.users(), pool, *provider, sim.cfg)
                                           : load_checkpoint(sim_resume, *provider, sim.cfg);
      auto run = run_batch(env, items, sim.cfg, *backend);
      save_run(sim_out, env, run, sim_backend.spec(), backend->name());
      manifest.seeds["simulation"] = sim.cfg.rng_seed;
      manifest.inputs = {sim_corpus, sim_personas};
      if (!sim_ids.empty()) manifest.inputs.push_back(sim_ids);
      if (!sim_resume.empty()) manifest.inputs.push_back(sim_resume);
      manifest.outputs.push_back(sim_out);
      if (!sim_ckpt.empty()) {
        save_checkpoint(sim_ckpt, env, run.decisions);
        manifest.outputs.push_back(sim_ckpt);
      }
      std::size_t aborted = 0;
      for (const auto& c : run.cascades) aborted += c.aborted;
      manifest.extra["token_ledger"] = run.ledger.to_json();
      out << "simulated " << run.cascades.size() << " cascades (" << aborted << " aborted), "
          << run.ledger.grand_total().total() << " tokens\n";
      if (aborted) throw TransportError(0, std::to_string(aborted) + " cascade(s) aborted; partial run written");
    };
  });

  // metrics
  auto* metrics = app.add_subcommand("metrics", "Structural and behavioural cascade statistics");
  std::vector<std::string> met_runs;
  std::string met_report = "table", met_degree = "out", met_reference = "politifact", met_out;
  metrics->add_option("--runs", met_runs, "One run (summary) or two runs (real then virtual)")
      ->required()
      ->expected(1, 2)
      ->check(CLI::ExistingFile);
  metrics->add_option("--report", met_report, "Output format")->check(CLI::IsMember({"table", "json"}));
  metrics->add_option("--degree", met_degree, "Degree convention")->check(CLI::IsMember({"out", "in", "total"}));
  metrics->add_option("--reference", met_reference, "Published reference column")
      ->check(CLI::IsMember({"politifact", "gossipcop", "none"}));
  metrics->add_option("--out", met_out, "Write the report here instead of stdout");
  metrics->callback([&] {
    action = [&] {
      const auto conv = parse_degree_convention(met_degree);
      std::vector<RunFile> rfs;
      for (const auto& r : met_runs) rfs.push_back(load_run(r));
      for (std::size_t i = 0; i < rfs.size(); ++i)
        if (rfs[i].cascades.empty()) throw InputError(met_runs[i] + ": no cascades");
      const auto& real = rfs.front();
      const auto& virt = rfs.back();
      auto sr = mean_stats(real.cascades, conv), sv = mean_stats(virt.cascades, conv);
      std::optional<double> j;
      if (rfs.size() == 2) j = degree_jsd(real.cascades, virt.cascades, conv);
      const PublishedReference* ref = met_reference == "none" ? nullptr : find_reference(met_reference);
      auto rep = compare_report(sr, sv, j, ref);
      auto br = behavior_report(real.cascades, real.verifier_ids());
      auto bv = behavior_report(virt.cascades, virt.verifier_ids());
      std::string text;
      if (met_report == "json") {
        json doc{{"degree_convention", met_degree}, {"structure", to_json(rep)}};
        doc["behavior"] = {{"real", to_json(br)}, {"virtual", to_json(bv)}};
        if (ref)
          doc["behavior"]["reference"] = {
              {"verifier_real", ref->verifier_real},
              {"verifier_virtual", ref->verifier_virt},
              {"stance_real", {ref->stance_real[0], ref->stance_real[1], ref->stance_real[2]}},
              {"stance_virtual", {ref->stance_virt[0], ref->stance_virt[1], ref->stance_virt[2]}}};
        text = doc.dump(2) + "\n";
      } else {
        text = render_table(rep) + "\n" + render_behavior("real", br) + render_behavior("virtual", bv);
      }
      if (met_out.empty()) {
        out << text;
      } else {
        write_text(met_out, text);
        manifest.outputs.push_back(met_out);
      }
      for (const auto& r : met_runs) manifest.inputs.push_back(r);
    };
  });

  // shared by train / evaluate / sweep
  auto load_training_inputs = [](const std::string& corpus_dir, const std::vector<std::string>& runs, Corpus& corpus,
                                 RunFile& first, std::map<std::string, CascadeGraph>& cascades) {
    corpus = load_corpus(corpus_dir);
    cascades = index_cascades(load_run_cascades(runs, &first));
  };
  auto provider_for = [](const RunFile& rf, const RemoteConfig& remote) -> std::unique_ptr<EmbeddingProvider> {
    if (rf.provider.kind == "remote") return std::make_unique<RemoteEmbeddingProvider>(remote, rf.provider.dim);
    return std::make_unique<HashEmbeddingProvider>(rf.provider.dim, rf.provider.seed);
  };

  // train
  auto* train = app.add_subcommand("train", "Train the fusion detector on simulated cascades");
  std::string tr_corpus, tr_out;
  std::vector<std::string> tr_runs;
  DetectorOptions tr;
  RemoteConfig tr_remote;
  train->add_option("--corpus", tr_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--runs", tr_runs, "Run files with cascades")->required()->check(CLI::ExistingFile);
  train->add_option("--out", tr_out, "Checkpoint path")->required();
  train->add_option("--remote-url", tr_remote.base_url, "Embedding service for remote-provider runs");
  tr.add(train);
  train->callback([&] {
    action = [&] {
      Corpus corpus;
      RunFile rf;
      std::map<std::string, CascadeGraph> cascades;
      load_training_inputs(tr_corpus, tr_runs, corpus, rf, cascades);
      auto provider = provider_for(rf, tr_remote);
      NodeFeatures features(*provider, roster_text(rf));
      auto cfg = tr.cfg;
      cfg.node_dim = provider->dim();
      TokenEmbedder tokens(cfg.token_dim, cfg.token_seed);
      auto tr_ex = build_examples(corpus.split(Split::Train), cascades, features, tokens);
      auto va_ex = build_examples(corpus.split(Split::Val), cascades, features, tokens);
      auto model = train_detector(tr_ex, va_ex, cfg, [&](const EpochRecord& r) {
        char line[160];
        std::snprintf(line, sizeof line, "epoch %3d  train %.4f (acc %.3f)  val %.4f (acc %.3f)\n", r.epoch,
                      r.train_loss, r.train_acc, r.val_loss, r.val_acc);
        out << line;
      });
      save_detector(tr_out, model);
      manifest.seeds["training"] = cfg.seed;
      manifest.inputs.push_back(tr_corpus);
      for (const auto& r : tr_runs) manifest.inputs.push_back(r);
      manifest.outputs.push_back(tr_out);
      out << "best epoch " << model.best_epoch << " of " << model.history.size() << "; " << tr_ex.size()
          << " train / " << va_ex.size() << " val examples\n";
    };
  });

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score a detector checkpoint on a split");
  std::string ev_corpus, ev_ckpt, ev_router, ev_out, ev_split = "test";
  std::vector<std::string> ev_runs;
  RemoteConfig ev_remote;
  evaluate->add_option("--corpus", ev_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--runs", ev_runs, "Run files with cascades")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--checkpoint", ev_ckpt, "Detector checkpoint")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--router", ev_router, "Router checkpoint; easy items keep its prediction")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--split", ev_split, "Split to score")->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--out", ev_out, "Metrics JSON path");
  evaluate->add_option("--remote-url", ev_remote.base_url, "Embedding service for remote-provider runs");
  evaluate->callback([&] {
    action = [&] {
      Corpus corpus;
      RunFile rf;
      std::map<std::string, CascadeGraph> cascades;
      load_training_inputs(ev_corpus, ev_runs, corpus, rf, cascades);
      auto provider = provider_for(rf, ev_remote);
      auto model = load_detector(ev_ckpt);
      std::optional<Router> router;
      if (!ev_router.empty()) router = load_router(ev_router);
      NodeFeatures features(*provider, roster_text(rf));
      TokenEmbedder tokens(model.config.token_dim, model.config.token_seed);
      std::vector<int> labels, preds;
      std::size_t easy = 0, hard = 0, missing = 0;
      for (const auto* n : corpus.split(*parse_split(ev_split))) {
        if (!n->label) continue;
        if (router) {
          auto d = route(*router, provider->embed(n->text));
          if (d.easy) {
            ++easy;
            labels.push_back(*n->label);
            preds.push_back(d.prediction);
            continue;
          }
          ++hard;
        }
        auto ex = build_examples({n}, cascades, features, tokens);
        if (ex.empty()) {
          ++missing;
          continue;
        }
        labels.push_back(*n->label);
        preds.push_back(predict_fake(model.params, model.config, ex[0]) >= 0.5 ? 1 : 0);
      }
      auto m = classification_metrics(labels, preds);
      json doc = to_json(m);
      doc["split"] = ev_split;
      doc["missing_cascades"] = missing;
      if (router) doc["routing"] = {{"easy", easy}, {"hard", hard}};
      if (ev_out.empty()) {
        out << doc.dump(2) << "\n";
      } else {
        write_json(ev_out, doc);
        manifest.outputs.push_back(ev_out);
        out << doc.dump() << "\n";
      }
      manifest.inputs = {ev_corpus, ev_ckpt};
      for (const auto& r : ev_runs) manifest.inputs.push_back(r);
      if (!ev_router.empty()) manifest.inputs.push_back(ev_router);
      if (missing == labels.size() + missing) throw InputError("no scorable items in split " + ev_split);
    };
  });

  // route
  auto* routec = app.add_subcommand("route", "Train or apply the confidence router");
  std::string ro_corpus, ro_out, ro_router, ro_report, ro_hard, ro_split = "test";
  RouterConfig ro_cfg;
  BackendOptions ro_embed;
  routec->add_option("--corpus", ro_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  routec->add_option("--out", ro_out, "Router checkpoint to write (trains on the train split)");
  routec->add_option("--router", ro_router, "Existing router checkpoint")->check(CLI::ExistingFile);
  routec->add_option("--tau", ro_cfg.tau, "Confidence threshold")->check(CLI::Range(0.5, 1.0));
  routec->add_option("--split", ro_split, "Items to route")->check(CLI::IsMember({"train", "val", "test", "all"}));
  routec->add_option("--report", ro_report, "Per-item routing JSONL");
  routec->add_option("--hard-ids", ro_hard, "Write hard item ids here (input for simulate --ids)");
  routec->add_option("--epochs", ro_cfg.epochs, "Router training epochs")->check(CLI::PositiveNumber);
  routec->add_option("--lr", ro_cfg.lr, "Router learning rate")->check(CLI::PositiveNumber);
  ro_embed.add(routec);
  routec->callback([&] {
    action = [&] {
      auto corpus = load_corpus(ro_corpus);
      auto provider = ro_embed.provider();
      Router router;
      if (!ro_router.empty()) {
        router = load_router(ro_router);
        if (routec->count("--tau")) router.config.tau = ro_cfg.tau;
        router.config.validate();
        manifest.inputs.push_back(ro_router);
      } else {
        if (ro_out.empty()) throw ConfigError("route needs --out (to train) or --router (to apply)");
        router = fit_router(corpus.split(Split::Train), *provider, ro_cfg);
        save_router(ro_out, router);
        manifest.outputs.push_back(ro_out);
      }
      auto recs = route_items(router, select_news(corpus, ro_split, "", 0), *provider);
      auto s = summarize_routes(recs);
      if (!ro_report.empty()) {
        std::vector<json> rows;
        for (const auto& r : recs) rows.push_back(to_json(r));
        write_jsonl(ro_report, rows);
        manifest.outputs.push_back(ro_report);
      }
      if (!ro_hard.empty()) {
        std::string ids;
        for (const auto& r : recs)
          if (!r.decision.easy) ids += r.news_id + "\n";
        write_text(ro_hard, ids);
        manifest.outputs.push_back(ro_hard);
      }
      manifest.inputs.push_back(ro_corpus);
      out << json{{"total", s.total}, {"easy", s.easy}, {"hard", s.hard}, {"tau", router.config.tau}}.dump() << "\n";
    };
  });

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Grid over the two auxiliary loss weights");
  std::string sw_corpus, sw_out, sw_lrec = "0.1:1.0:0.1", sw_lskl = "0.1:1.0:0.1";
  std::vector<std::string> sw_runs;
  DetectorOptions sw;
  RemoteConfig sw_remote;
  sweep->add_option("--corpus", sw_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--runs", sw_runs, "Run files with cascades")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sw_out, "Sweep results JSON")->required();
  sweep->add_option("--lrec-grid", sw_lrec, "start:stop:step");
  sweep->add_option("--lskl-grid", sw_lskl, "start:stop:step");
  sw.add(sweep);
  sweep->callback([&] {
    action = [&] {
      Corpus corpus;
      RunFile rf;
      std::map<std::string, CascadeGraph> cascades;
      load_training_inputs(sw_corpus, sw_runs, corpus, rf, cascades);
      auto provider = provider_for(rf, sw_remote);
      NodeFeatures features(*provider, roster_text(rf));
      auto base = sw.cfg;
      base.node_dim = provider->dim();
      TokenEmbedder tokens(base.token_dim, base.token_seed);
      auto tr_ex = build_examples(corpus.split(Split::Train), cascades, features, tokens);
      auto va_ex = build_examples(corpus.split(Split::Val), cascades, features, tokens);
      auto te_ex = build_examples(corpus.split(Split::Test), cascades, features, tokens);
      json grid = json::array();
      for (double a : parse_grid(sw_lrec))
        for (double b : parse_grid(sw_lskl)) {
          auto cfg = base;
          cfg.lambda_rec = a;
          cfg.lambda_skl = b;
          auto model = train_detector(tr_ex, va_ex, cfg);
          std::vector<int> labels, preds;
          for (const auto& ex : te_ex) {
            labels.push_back(ex.label);
            preds.push_back(predict_fake(model.params, cfg, ex) >= 0.5 ? 1 : 0);
          }
          auto m = classification_metrics(labels, preds);
          json row = to_json(m);
          row["lambda_rec"] = a;
          row["lambda_skl"] = b;
          row["best_epoch"] = model.best_epoch;
          grid.push_back(row);
          char line[128];
          std::snprintf(line, sizeof line, "lrec %.2f lskl %.2f  acc %.3f  f1 %.3f\n", a, b, m.accuracy, m.f1);
          out << line;
        }
      write_json(sw_out, json{{"grid", grid}});
      manifest.seeds["training"] = base.seed;
      manifest.inputs.push_back(sw_corpus);
      for (const auto& r : sw_runs) manifest.inputs.push_back(r);
      manifest.outputs.push_back(sw_out);
    };
  });

  // theory-check
  auto* theoryc = app.add_subcommand("theory-check", "Property checks for the latent alignment objective");
  std::size_t th_trials = 1000, th_dim = 16, th_instances = 50;
  std::uint64_t th_seed = 1;
  std::string th_out;
  theoryc->add_option("--trials", th_trials, "Random Gaussian pairs for the bound check")->check(CLI::PositiveNumber);
  theoryc->add_option("--max-dim", th_dim, "Largest latent dimension")->check(CLI::PositiveNumber);
  theoryc->add_option("--instances", th_instances, "Synthetic instances for sweep and cancellation")
      ->check(CLI::PositiveNumber);
  theoryc->add_option("--seed", th_seed, "Harness seed");
  theoryc->add_option("--out", th_out, "Report JSON path");
  theoryc->callback([&] {
    action = [&] {
      auto b = theory::check_skl_bound(th_trials, th_dim, th_seed);
      auto e = theory::check_eta_sweep(th_instances, th_seed);
      auto c = theory::check_cancellation(th_instances, th_seed);
      json doc{{"skl_bound", {{"trials", b.trials}, {"violations", b.violations}, {"min_margin", b.min_margin}}},
               {"eta_sweep",
                {{"instances", e.instances},
                 {"argmin_at_one", e.argmin_at_one},
                 {"strictly_decreasing", e.strictly_decreasing},
                 {"etas", e.etas},
                 {"example_curve", e.first_curve}}},
               {"cancellation", {{"instances", c.instances}, {"max_abs_diff", c.max_abs_diff}, {"passed", c.passed}}}};
      const bool ok = b.violations == 0 && e.argmin_at_one == e.instances && c.passed;
      doc["passed"] = ok;
      if (th_out.empty()) {
        out << doc.dump(2) << "\n";
      } else {
        write_json(th_out, doc);
        manifest.outputs.push_back(th_out);
        out << "violations " << b.violations << "/" << b.trials << ", argmin at 1: " << e.argmin_at_one << "/"
            << e.instances << ", cancellation max diff " << c.max_abs_diff << "\n";
      }
      manifest.seeds["theory"] = th_seed;
      if (!ok) throw Error("theory check failed");
    };
  });

  // token-report
  auto* tokens = app.add_subcommand("token-report", "Token usage by prompt kind");
  std::vector<std::string> tk_runs;
  std::string tk_format = "table";
  tokens->add_option("--runs", tk_runs, "Run files")->required()->check(CLI::ExistingFile);
  tokens->add_option("--format", tk_format, "Output format")->check(CLI::IsMember({"table", "json"}));
  tokens->callback([&] {
    action = [&] {
      TokenLedger total;
      for (const auto& r : tk_runs) total.merge(load_run(r).ledger);
      if (tk_format == "json")
        out << total.to_json().dump(2) << "\n";
      else
        out << ledger_report(total);
    };
  });

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Route, simulate hard items, train and evaluate in one go");
  std::string pp_corpus, pp_out;
  PipelineConfig pp_cfg;
  SimOptions pp_sim;
  DetectorOptions pp_det;
  BackendOptions pp_backend;
  pipe->add_option("--corpus", pp_corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  pipe->add_option("--out", pp_out, "Output directory")->required();
  pipe->add_option("--tau", pp_cfg.router.tau, "Router confidence threshold")->check(CLI::Range(0.5, 1.0));
  pipe->add_flag("--score-full-model", pp_cfg.score_full_model, "Also score the fusion model on all test items");
  pipe->add_option("--sim-seed", pp_sim.cfg.rng_seed, "Simulation seed");
  pipe->add_option("--depth", pp_sim.cfg.max_depth, "Maximum cascade depth")->check(CLI::PositiveNumber);
  pp_det.add(pipe);
  pp_backend.add(pipe);
  pipe->callback([&] {
    action = [&] {
      auto corpus = load_corpus(pp_corpus);
      auto provider = pp_backend.provider();
      auto backend = pp_backend.decision_backend();
      pp_cfg.sim = pp_sim.cfg;
      pp_cfg.detector = pp_det.cfg;
      auto res = run_pipeline(corpus, *provider, *backend, pp_cfg);
      fs::create_directories(pp_out);
      const fs::path dir(pp_out);
      save_personas(dir / "personas.jsonl", res.personas.all());
      std::vector<json> rows;
      for (const auto& r : res.routes) rows.push_back(to_json(r));
      write_jsonl(dir / "routes.jsonl", rows);
      save_detector(dir / "model.ckpt", res.model);
      json doc{{"test", to_json(res.test)},
               {"routing", {{"total", res.summary.total}, {"easy", res.summary.easy}, {"hard", res.summary.hard}}},
               {"cascades", res.run.cascades.size()},
               {"best_epoch", res.model.best_epoch},
               {"tokens", res.ledger.to_json()}};
      if (res.full_model_test) doc["full_model_test"] = to_json(*res.full_model_test);
      write_json(dir / "metrics.json", doc);
      manifest.seeds = {{"simulation", pp_cfg.sim.rng_seed}, {"training", pp_cfg.detector.seed},
                        {"extract", pp_cfg.extract.seed}};
      manifest.inputs.push_back(pp_corpus);
      manifest.outputs.push_back(pp_out);
      out << doc.dump(2) << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }
  auto subs = app.get_subcommands();
  manifest.command = subs.empty() ? "" : subs.front()->get_name();
  manifest.config = app.config_to_str(true, false);
  try {
    if (!action) throw ConfigError("no subcommand selected");
    action();
    manifest.write();
    return 0;
  } catch (const std::exception& e) {
    const char* kind = dynamic_cast<const ParseError*>(&e)       ? "parse"
                       : dynamic_cast<const IntegrityError*>(&e) ? "integrity"
                       : dynamic_cast<const ConfigError*>(&e)    ? "config"
                       : dynamic_cast<const InputError*>(&e)     ? "input"
                       : dynamic_cast<const TransportError*>(&e) ? "transport"
                       : dynamic_cast<const DomainError*>(&e)    ? "domain"
                                                                 : "error";
    try {
      manifest.write();
    } catch (...) {
    }
    err << json{{"error", kind}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace avoid::cli
