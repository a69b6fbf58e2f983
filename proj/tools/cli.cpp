#include "cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "laser/eval.hpp"
#include "laser/trainkit.hpp"

namespace laser::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Everything a --config file may carry. Missing sections keep defaults.
struct RunConfig {
  GenConfig gen;
  BackboneConfig model;
  TrainConfig train;
  BenchConfig bench;
};

BenchConfig bench_from_json(const json& j) {
  BenchConfig b;
  b.latent_K = j.value("latent_K", b.latent_K);
  b.primary_K = j.value("primary_K", b.primary_K);
  b.rationale_tokens = j.value("rationale_tokens", b.rationale_tokens);
  b.warmup = j.value("warmup", b.warmup);
  b.max_queries = j.value("max_queries", b.max_queries);
  return b;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

json read_json_file(const fs::path& p) {
  require_file(p, "config file");
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(p.string() + ": not valid JSON (" + e.what() + ")");
  }
}

void write_json_file(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

// Flags shared by every subcommand.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* sub, bool out_required) {
    sub->add_option("--config", config, "JSON config with gen/model/train/bench sections");
    seed_opt = sub->add_option("--seed", seed, "Override every seed in the config");
    auto* o = sub->add_option("--out", out, "Output path");
    if (out_required) o->required();
  }

  RunConfig load() const {
    RunConfig rc;
    if (!config.empty()) {
      const json j = read_json_file(config);
      try {
        if (j.contains("gen")) rc.gen = j.at("gen").get<GenConfig>();
        if (j.contains("model")) rc.model = j.at("model").get<BackboneConfig>();
        if (j.contains("train")) rc.train = j.at("train").get<TrainConfig>();
        if (j.contains("bench")) rc.bench = bench_from_json(j.at("bench"));
      } catch (const json::exception& e) {
        throw UsageError(config + ": " + e.what());
      }
    }
    if (seed_opt->count() > 0) rc.gen.seed = rc.model.seed = rc.train.seed = seed;
    return rc;
  }
};

QueryMode parse_mode(const std::string& mode, int k) {
  QueryMode m;
  try {
    m.kind = encode_kind_from_string(mode);
  } catch (const std::invalid_argument&) {
    throw UsageError("--mode must be plain, latent or explicit (got '" + mode + "')");
  }
  m.K_infer = k;
  if (m.kind == EncodeKind::kLatent && k < 1) throw UsageError("--k-infer must be >= 1");
  return m;
}

Checkpoint open_checkpoint(const std::string& path) {
  require_file(path, "checkpoint");
  return load_checkpoint(path);
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

// --- gen-data ---------------------------------------------------------------

int cmd_gen(const Common& c, std::ostream& out) {
  const RunConfig rc = c.load();
  const Dataset ds = gen_multihop(rc.gen);
  std::size_t bad = 0;
  for (const auto* split : {&ds.train, &ds.eval}) {
    for (const auto& ex : *split) bad += !check_ground_truth(ex, rc.gen).empty();
  }
  save_dataset(c.out, ds);
  const json summary = {{"format", "laser-gen"},
                        {"version", 1},
                        {"n_train", ds.train.size()},
                        {"n_eval", ds.eval.size()},
                        {"n_corpus", ds.corpus.size()},
                        {"ground_truth_violations", bad},
                        {"chains_disjoint", chains_disjoint(ds.train, ds.eval)},
                        {"gen_config", rc.gen}};
  write_json_file(fs::path(c.out) / "summary.json", summary);
  out << "wrote " << ds.train.size() << " train, " << ds.eval.size() << " eval, "
      << ds.corpus.size() << " corpus docs to " << c.out << '\n';
  return bad == 0 ? kExitOk : kExitFailure;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string variant = "full";
  std::string resume;
  std::string log;
  std::int64_t stop_at = 0;
  int max_steps = -1;
  int epochs = -1;
  double lr = -1;
  int log_every = 0;
};

int cmd_train(const Common& c, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig rc = c.load();
  require_file(fs::path(a.data) / "train.jsonl", "training data");
  const auto data = load_examples(fs::path(a.data) / "train.jsonl");

  std::optional<Checkpoint> resume;
  BackboneConfig model_cfg = rc.model;
  TrainConfig cfg;
  if (!a.resume.empty()) {
    resume = open_checkpoint(a.resume);
    model_cfg = resume->model_config;
    cfg = resume->train_config;
    if (!c.config.empty()) err << "note: --resume uses the configs stored in the checkpoint\n";
  } else {
    try {
      cfg = apply_variant(rc.train, variant_from_string(a.variant));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (a.max_steps >= 0) cfg.max_steps = a.max_steps;
    if (a.epochs >= 0) cfg.epochs = a.epochs;
    if (a.lr > 0) cfg.lr = a.lr;
  }
  try {
    model_cfg.validate();
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (data.empty()) throw UsageError(a.data + ": training split is empty");

  const fs::path log_path = a.log.empty() ? fs::path(c.out + ".log.jsonl") : fs::path(a.log);
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!resume) {
    log << json{{"format", "laser-trainlog"}, {"version", 1}, {"model", model_cfg}, {"train", cfg}}
               .dump()
        << '\n';
  }

  const std::int64_t total = total_steps(cfg, data.size());
  const std::int64_t every = a.log_every > 0 ? a.log_every : std::max<std::int64_t>(1, total / 10);
  TrainHooks hooks;
  hooks.on_step = [&](const LogEntry& e) {
    log << json(e).dump() << '\n';
    if (e.step % every == 0 || e.step == total) {
      out << "step " << e.step << "/" << total << "  lr " << e.lr << "  loss " << fmt(e.loss.total)
          << "  (cl " << fmt(e.loss.cl_latent) << ", cl* " << fmt(e.loss.cl_explicit) << ", kd "
          << fmt(e.loss.kd_out) << ", mid " << fmt(e.loss.kd_mid) << ")\n";
    }
  };
  hooks.on_warning = [&](const std::string& w) { err << "warning: " << w << '\n'; };

  const auto t0 = std::chrono::steady_clock::now();
  TrainRun run = train(model_cfg, cfg, data, resume ? &*resume : nullptr, a.stop_at, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(c.out, make_checkpoint(run.model, run.opt, cfg, run.step));
  out << "saved " << c.out << " at step " << run.step << "/" << run.total << " in " << fmt(secs, 1)
      << " s";
  if (run.aborted_steps > 0) out << " (" << run.aborted_steps << " steps aborted)";
  out << '\n';
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "eval";
  std::string mode = "latent";
  int k_infer = 3;
  std::string embeddings;
  int max_queries = 0;
};

int cmd_eval(const Common& c, const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  if (a.split != "eval" && a.split != "train") throw UsageError("--split must be eval or train");
  const fs::path qpath = fs::path(a.data) / (a.split + ".jsonl");
  require_file(qpath, "query file");
  auto queries = load_examples(qpath);
  if (a.max_queries > 0 && queries.size() > static_cast<std::size_t>(a.max_queries)) {
    queries.resize(static_cast<std::size_t>(a.max_queries));
  }
  const QueryMode mode = parse_mode(a.mode, a.k_infer);
  const Backbone<float> model = restore_model(ck);

  CorpusIndex index;
  if (!a.embeddings.empty()) {
    require_file(a.embeddings, "embedding dump");
    index = load_embeddings(a.embeddings);
  } else {
    const fs::path cpath = fs::path(a.data) / "corpus.jsonl";
    require_file(cpath, "corpus file");
    index = build_index(model, load_corpus(cpath), ck.train_config.doc_mode);
  }
  const EvalResult r = evaluate(model, queries, index, mode);
  if (!c.out.empty()) write_json_file(c.out, r);
  out << mode.label() << " on " << r.n_queries << " " << a.split << " queries";
  if (!r.skipped.empty()) out << " (" << r.skipped.size() << " skipped)";
  out << ": nDCG@10 " << fmt(r.ndcg_at_10) << "  R@1 " << fmt(r.recall_at_1) << "  R@5 "
      << fmt(r.recall_at_5) << "  R@10 " << fmt(r.recall_at_10) << "  MRR " << fmt(r.mrr) << '\n';
  return kExitOk;
}

// --- embed ------------------------------------------------------------------

struct EmbedArgs {
  std::string checkpoint;
  std::string data;
  std::string mode;
  int k_infer = 3;
};

int cmd_embed(const Common& c, const EmbedArgs& a, std::ostream& out) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  const fs::path cpath = fs::path(a.data) / "corpus.jsonl";
  require_file(cpath, "corpus file");
  EncodeMode mode = ck.train_config.doc_mode;
  if (!a.mode.empty()) {
    const QueryMode q = parse_mode(a.mode, a.k_infer);
    if (q.kind == EncodeKind::kExplicit) throw UsageError("documents are encoded plain or latent");
    mode = q.kind == EncodeKind::kPlain ? EncodeMode::plain() : EncodeMode::latent(q.K_infer);
  }
  const auto index = build_index(restore_model(ck), load_corpus(cpath), mode);
  save_embeddings(c.out, index);
  out << "embedded " << index.doc_ids.size() << " documents (dim " << index.vectors.cols << ") to "
      << c.out << '\n';
  return kExitOk;
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint;
  std::string data;
  int rationale_tokens = -1;
  int max_queries = -1;
};

int cmd_bench(const Common& c, const BenchArgs& a, std::ostream& out) {
  RunConfig rc = c.load();
  if (a.rationale_tokens >= 0) rc.bench.rationale_tokens = a.rationale_tokens;
  if (a.max_queries > 0) rc.bench.max_queries = a.max_queries;
  const Backbone<float> model =
      a.checkpoint.empty() ? Backbone<float>(rc.model) : restore_model(open_checkpoint(a.checkpoint));
  const fs::path qpath = fs::path(a.data) / "eval.jsonl";
  require_file(qpath, "query file");
  std::vector<TokenSeq> queries;
  for (const auto& ex : load_examples(qpath)) queries.push_back(ex.query);
  if (queries.empty()) throw UsageError(qpath.string() + " has no queries");

  const LatencyReport rep = bench_latency(model, queries, rc.bench);
  if (!c.out.empty()) write_json_file(c.out, rep);
  for (const auto& t : rep.timings) {
    out << std::left << std::setw(10) << t.mode << std::setw(5) << t.steps << " mean "
        << fmt(t.mean_ms, 3) << " ms  median " << fmt(t.median_ms, 3) << " ms  p95 "
        << fmt(t.p95_ms, 3) << " ms  (" << t.samples << " queries)\n";
  }
  out << "latent/plain " << fmt(rep.latent_over_plain, 3) << "  latent/explicit "
      << fmt(rep.latent_over_explicit, 4) << '\n';
  return kExitOk;
}

// --- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const Common& c, double step, std::ostream& out) {
  constexpr double kTolerance = 1e-4;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = gradient_audit(c.seed, step);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = r.max_rel_error < kTolerance;
  if (!c.out.empty()) {
    write_json_file(c.out, {{"format", "laser-gradcheck"},
                            {"version", 1},
                            {"max_rel_error", r.max_rel_error},
                            {"tolerance", kTolerance},
                            {"n_parameters", r.n_parameters},
                            {"seconds", secs},
                            {"loss", r.loss},
                            {"pass", pass}});
  }
  out << "max relative error " << std::scientific << std::setprecision(3) << r.max_rel_error
      << std::defaultfloat << " over " << r.n_parameters << " parameters in " << fmt(secs, 2)
      << " s: " << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? kExitOk : kExitFailure;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"laser: dense retrieval with latent reasoning steps"};
  app.name("laser");
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, embed_c, bench_c, grad_c;
  TrainArgs ta;
  EvalArgs ea;
  EmbedArgs ma;
  BenchArgs ba;
  double fd_step = 1e-6;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-hop dataset");
  gen_c.attach(gen, true);

  auto* tr = app.add_subcommand("train", "Train a backbone; writes a checkpoint and a loss log");
  train_c.attach(tr, true);
  tr->add_option("--data", ta.data, "Dataset directory from gen-data")->required();
  tr->add_option("--variant", ta.variant, "full, no_explicit_view or no_latent_view");
  tr->add_option("--resume", ta.resume, "Continue from this checkpoint");
  tr->add_option("--stop-at", ta.stop_at, "Stop after this many completed steps");
  tr->add_option("--max-steps", ta.max_steps, "Override train.max_steps");
  tr->add_option("--epochs", ta.epochs, "Override train.epochs");
  tr->add_option("--lr", ta.lr, "Override train.lr");
  tr->add_option("--log", ta.log, "Loss log path (default <out>.log.jsonl)");
  tr->add_option("--log-every", ta.log_every, "Print every N steps");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_c.attach(ev, false);
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--split", ea.split, "eval or train");
  ev->add_option("--mode", ea.mode, "plain, latent or explicit");
  ev->add_option("--k-infer", ea.k_infer, "Latent steps at inference");
  ev->add_option("--embeddings", ea.embeddings, "Reuse a corpus embedding dump");
  ev->add_option("--max-queries", ea.max_queries, "Evaluate only the first N queries");

  auto* em = app.add_subcommand("embed", "Embed the corpus into a binary dump");
  embed_c.attach(em, true);
  em->add_option("--checkpoint", ma.checkpoint, "Checkpoint file")->required();
  em->add_option("--data", ma.data, "Dataset directory")->required();
  em->add_option("--mode", ma.mode, "plain or latent (default: the checkpoint's doc mode)");
  em->add_option("--k-infer", ma.k_infer, "Latent steps for --mode latent");

  auto* be = app.add_subcommand("bench", "Per-query latency of plain, latent and explicit modes");
  bench_c.attach(be, false);
  be->add_option("--checkpoint", ba.checkpoint, "Checkpoint (default: fresh model from --config)");
  be->add_option("--data", ba.data, "Dataset directory (queries from eval.jsonl)")->required();
  be->add_option("--rationale-tokens", ba.rationale_tokens, "Decoded tokens R for explicit mode");
  be->add_option("--max-queries", ba.max_queries, "Queries timed per mode");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of the full training loss");
  grad_c.attach(gc, false);
  gc->add_option("--step", fd_step, "Central difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_c, out);
    if (*tr) return cmd_train(train_c, ta, out, err);
    if (*ev) return cmd_eval(eval_c, ea, out);
    if (*em) return cmd_embed(embed_c, ma, out);
    if (*be) return cmd_bench(bench_c, ba, out);
    if (*gc) return cmd_gradcheck(grad_c, fd_step, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataFormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace laser::cli
