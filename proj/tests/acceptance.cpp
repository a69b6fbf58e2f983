// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. All tolerances and the desk-scale configuration live here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "laser/eval.hpp"
#include "laser/trainkit.hpp"

namespace {

using namespace laser;
using ad::Graph;
using ad::Matrix;
namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int g_failures = 0;
std::map<int, std::string> g_lines;

// Prints the verdict as soon as it is known and keeps it for the ordered
// summary at the end.
void report(int id, bool pass, const std::string& what, const std::string& detail) {
  const std::string line = std::string(pass ? "PASS" : "FAIL") + "  [" + std::to_string(id) +
                           "] " + what + ": " + detail;
  std::cout << line << std::endl;
  g_lines[id] = line;
  if (!pass) ++g_failures;
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// ---- desk-scale configuration ---------------------------------------------

constexpr std::uint64_t kSeeds[] = {0, 1, 2};

GenConfig desk_gen(std::uint64_t seed) {
  GenConfig g;  // vocab 512, 50 keys, 7 relations, H=2, 2000/200, corpus 1000
  g.seed = seed;
  return g;
}

BackboneConfig desk_model(std::uint64_t seed) {
  BackboneConfig b;
  b.model_dim = 32;
  b.n_layers = 2;
  b.n_heads = 2;
  b.seed = seed;
  return b;
}

TrainConfig desk_train(std::uint64_t seed) {
  TrainConfig t;
  t.lr = 3e-3;
  t.epochs = 10;
  t.kd_warmup_ratio = 1.0;
  t.seed = seed;
  return t;
}

// ---- criterion 1 ------------------------------------------------------------

void gradient_audit_criterion() {
  constexpr double kTol = 1e-4, kBudget = 60.0;
  const auto t0 = Clock::now();
  const auto r = gradient_audit(0);
  const double secs = seconds_since(t0);
  const bool all_terms = r.loss.cl_latent > 0 && r.loss.cl_explicit > 0 && r.loss.kd_out > 0 &&
                         r.loss.kd_mid > 0;
  report(1, r.max_rel_error < kTol && secs < kBudget && all_terms, "gradient audit",
         "max rel error " + num(r.max_rel_error, 3) + " (< 1e-4) over " +
             std::to_string(r.n_parameters) + " parameters, " + num(secs, 3) +
             " s (< 60 s), four terms active: " + (all_terms ? "yes" : "no"));
}

// ---- criterion 2 ------------------------------------------------------------

void loss_identity_criterion() {
  bool ok = true;
  double worst_lnb = 0;
  for (std::size_t B : {1u, 2u, 8u, 32u}) {
    Graph<double> g;
    Matrix<double> docs(B, 3);
    for (std::size_t i = 0; i < B; ++i) docs(i, 0) = 1.0;
    CandidateSet<double> c{g.constant(docs), {0}};
    const double l = info_nce(g.constant(Matrix<double>::from_rows({{0, 1, 0}})), c, 0.02).item();
    worst_lnb = std::max(worst_lnb, std::abs(l - std::log(static_cast<double>(B))));
  }
  ok &= worst_lnb <= 1e-9;
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
  const double kl_self = kl_div(p, p);
  ok &= std::abs(kl_self) <= 1e-10;
  const double kl_ln2 = kl_div(std::vector<double>{1, 0}, std::vector<double>{.5, .5});
  ok &= std::abs(kl_ln2 - std::log(2.0)) <= 1e-9;
  const double total = total_loss(LossReport{1, 1, 1, 1, 0}, LossWeights{});
  ok &= total == 12.1;
  report(2, ok, "loss identities",
         "|InfoNCE - ln B| " + num(worst_lnb, 3) + " (<= 1e-9), KL(p,p) " + num(kl_self, 3) +
             " (<= 1e-10), KL([1,0],[.5,.5]) - ln 2 = " + num(kl_ln2 - std::log(2.0), 3) +
             " (<= 1e-9), total on unit parts " + num(total, 17) + " (== 12.1)");
}

// ---- criterion 3 ------------------------------------------------------------

void downsample_criterion() {
  using V = std::vector<int>;
  bool ok = downsample_indices(9, 3) == V{3, 6, 9} && downsample_indices(2, 3) == V{1, 1, 2};
  for (int m = 1; m <= 12; ++m) {
    V id(static_cast<std::size_t>(m));
    std::iota(id.begin(), id.end(), 1);
    ok &= downsample_indices(m, m) == id;
  }
  report(3, ok, "temporal downsampling",
         "(9,3)->[3,6,9], (2,3)->[1,1,2], (M,M)->identity for M=1..12");
}

// ---- criterion 4 ------------------------------------------------------------

template <typename T>
void widen(Backbone<T>& b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, 0.3);
  for (auto* p : b.parameters())
    for (auto& v : p->value.data) v += static_cast<T>(d(rng));
}

void mechanism_criterion() {
  BackboneConfig cfg;  // default backbone: vocab 512, m 64, 4 layers, 128 positions
  cfg.seed = 11;
  Backbone<float> model(cfg);
  widen(model, 12);
  const auto& E = model.tok_emb.value;
  const std::size_t m = E.cols;

  // Soft tokens stay inside the coordinate bounds of the embedding table.
  std::vector<float> lo(m, 1e30f), hi(m, -1e30f);
  for (std::size_t r = 0; r < E.rows; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      lo[c] = std::min(lo[c], E(r, c));
      hi[c] = std::max(hi[c], E(r, c));
    }
  std::mt19937_64 rng(13);
  std::normal_distribution<float> n01(0, 1);
  double hull_violation = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const float spread = std::exp(std::uniform_real_distribution<float>(-3, 5)(rng));
    Matrix<float> logits(1, E.rows);
    for (auto& v : logits.data) v = spread * n01(rng);
    Graph<float> g;
    const auto t = soft_token(g.constant(logits), g.constant(E), 1.0f).value();
    for (std::size_t c = 0; c < m; ++c) {
      hull_violation = std::max<double>(hull_violation, lo[c] - t(0, c));
      hull_violation = std::max<double>(hull_violation, t(0, c) - hi[c]);
    }
  }
  const bool hull_ok = hull_violation <= 1e-6;

  // Extending K leaves the first K states and soft tokens bitwise unchanged.
  bool prefix_ok = true;
  for (int trial = 0; trial < 5; ++trial) {
    TokenSeq q(3 + trial * 7);
    for (auto& t : q) t = 4 + static_cast<int>(rng() % 500);
    Graph<float> g;
    BackboneView<float> view(g, model);
    const auto a = encode_latent(view, q, 3), b = encode_latent(view, q, 8);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        prefix_ok &= a.trajectory.value()(r, c) == b.trajectory.value()(r, c);
        prefix_ok &= a.soft_tokens.value()(r, c) == b.soft_tokens.value()(r, c);
      }
  }

  // Cached incremental decoding against full recomputation, up to 128.
  float cache_diff = 0;
  for (std::size_t len : {1u, 16u, 64u, 128u}) {
    Matrix<float> x(len, m);
    for (auto& v : x.data) v = n01(rng);
    Graph<float> g;
    BackboneView<float> view(g, model);
    const auto full = view.forward(g.constant(x)).value();
    AttnCache<float> cache;
    for (std::size_t i = 0; i < len; ++i) {
      Matrix<float> row(1, m);
      std::copy(x.row(i).begin(), x.row(i).end(), row.data.begin());
      const auto h = view.forward(g.constant(row), cache).value();
      for (std::size_t c = 0; c < m; ++c) cache_diff = std::max(cache_diff, std::abs(h(0, c) - full(i, c)));
    }
  }
  for (std::size_t qlen : {4u, 60u, 124u}) {
    TokenSeq q(qlen);
    for (auto& t : q) t = 4 + static_cast<int>(rng() % 500);
    Graph<float> g;
    BackboneView<float> view(g, model);
    const auto a = encode_latent(view, q, 3), b = encode_latent(view, q, 3, {.recompute = true});
    for (std::size_t k = 0; k < a.trajectory.value().size(); ++k)
      cache_diff = std::max(cache_diff, std::abs(a.trajectory.value().data[k] - b.trajectory.value().data[k]));
  }
  const bool cache_ok = cache_diff <= 1e-5f;

  report(4, hull_ok && prefix_ok && cache_ok, "mechanism invariants",
         "soft-token hull violation " + num(hull_violation, 3) + " over 1000 draws (<= 1e-6), "
             "K-extension prefix " + (prefix_ok ? "exact" : "NOT exact") +
             ", cache vs recompute max diff " + num(cache_diff, 3) + " up to length 128 (<= 1e-5)");
}

// ---- criteria 5, 6, 8, 9 ----------------------------------------------------

struct SeedOutcome {
  double full_k1 = 0, full_k3 = 0, full_explicit = 0;
  double no_explicit_k3 = 0;
  double no_latent_plain = 0;
};

void write_bytes(const fs::path& p, const Checkpoint& ck) { save_checkpoint(p, ck); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double eval_ndcg(const Backbone<float>& model, const Dataset& ds, const CorpusIndex& idx,
                 QueryMode mode) {
  const auto r = evaluate(model, ds.eval, idx, mode);
  return r.ndcg_at_10;
}

}  // namespace

int main() {
  const auto t_start = Clock::now();
  std::cout << "laser acceptance run" << std::endl;

  gradient_audit_criterion();
  loss_identity_criterion();
  downsample_criterion();
  mechanism_criterion();

  // Data contract on every seed's dataset.
  std::vector<Dataset> datasets;
  {
    bool ok = true;
    std::size_t n_checked = 0, solved = 0, n_eval = 0;
    for (auto seed : kSeeds) {
      datasets.push_back(gen_multihop(desk_gen(seed)));
      const auto& ds = datasets.back();
      for (const auto* split : {&ds.train, &ds.eval})
        for (const auto& ex : *split) {
          ++n_checked;
          ok &= check_ground_truth(ex, ds.config).empty();
        }
      const auto pred = symbolic_solve(ds.train, ds.corpus, ds.eval, ds.config);
      for (std::size_t i = 0; i < ds.eval.size(); ++i) solved += pred[i] == ds.eval[i].meta.positive_doc;
      n_eval += ds.eval.size();
      ok &= chains_disjoint(ds.train, ds.eval);
    }
    ok &= solved == n_eval && n_eval > 0;
    report(9, ok, "data contract",
           std::to_string(n_checked) + " examples checked over 3 seeds, symbolic oracle solved " +
               std::to_string(solved) + "/" + std::to_string(n_eval) +
               " eval queries, train/eval chains disjoint");
  }

  // Ablation training: three variants on three seeds.
  std::vector<SeedOutcome> outcomes;
  std::vector<TrainRun> full_runs;
  for (std::size_t s = 0; s < std::size(kSeeds); ++s) {
    const auto seed = kSeeds[s];
    const auto& ds = datasets[s];
    SeedOutcome o;
    for (auto v : {Variant::kFull, Variant::kNoExplicitView, Variant::kNoLatentView}) {
      const auto cfg = apply_variant(desk_train(seed), v);
      const auto t0 = Clock::now();
      auto run = train(desk_model(seed), cfg, ds.train);
      const auto idx = build_index(run.model, ds.corpus, cfg.doc_mode);
      switch (v) {
        case Variant::kFull:
          o.full_k1 = eval_ndcg(run.model, ds, idx, {EncodeKind::kLatent, 1});
          o.full_k3 = eval_ndcg(run.model, ds, idx, {EncodeKind::kLatent, 3});
          o.full_explicit = eval_ndcg(run.model, ds, idx, {EncodeKind::kExplicit, 0});
          break;
        case Variant::kNoExplicitView:
          o.no_explicit_k3 = eval_ndcg(run.model, ds, idx, {EncodeKind::kLatent, 3});
          break;
        case Variant::kNoLatentView:
          o.no_latent_plain = eval_ndcg(run.model, ds, idx, {EncodeKind::kPlain, 0});
          break;
      }
      std::cout << "      seed " << seed << " " << to_string(v) << ": " << run.log.size()
                << " steps in " << num(seconds_since(t0), 3) << " s, final loss "
                << num(run.log.back().loss.total) << std::endl;
      if (v == Variant::kFull) full_runs.push_back(std::move(run));
    }
    std::cout << "      seed " << seed << " nDCG@10: full K1 " << num(o.full_k1) << ", K3 "
              << num(o.full_k3) << ", explicit " << num(o.full_explicit) << "; no_explicit_view "
              << num(o.no_explicit_k3) << "; no_latent_view " << num(o.no_latent_plain) << std::endl;
    outcomes.push_back(o);
  }
  auto mean = [&](double SeedOutcome::*f) {
    double s = 0;
    for (const auto& o : outcomes) s += o.*f;
    return s / static_cast<double>(outcomes.size());
  };
  const double full = mean(&SeedOutcome::full_k3), k1 = mean(&SeedOutcome::full_k1);
  const double expl = mean(&SeedOutcome::full_explicit);
  const double no_exp = mean(&SeedOutcome::no_explicit_k3), no_lat = mean(&SeedOutcome::no_latent_plain);
  constexpr double kMargin = 0.02;
  report(5, full - no_exp >= kMargin && full - no_lat >= kMargin && expl >= full,
         "ablation ordering (3-seed mean nDCG@10)",
         "full " + num(full) + " vs w/o explicit view " + num(no_exp) + " (margin " +
             num(full - no_exp) + ", need >= 0.02), vs w/o latent view " + num(no_lat) +
             " (margin " + num(full - no_lat) + ", need >= 0.02); explicit-view eval " + num(expl) +
             " >= latent eval " + num(full));
  report(6, full >= k1, "inference-step scaling (3-seed mean nDCG@10)",
         "K_infer=3 " + num(full) + " >= K_infer=1 " + num(k1));

  // Latency ordering on the default backbone.
  {
    BackboneConfig bc;
    Backbone<float> model(bc);
    std::vector<TokenSeq> qs;
    for (const auto& ex : datasets[0].eval) qs.push_back(ex.query);
    BenchConfig cfg;
    cfg.latent_K = {3};
    const auto rep = bench_latency(model, qs, cfg);
    const double lat = rep.find("latent", 3).mean_ms, pl = rep.find("plain").mean_ms;
    const double ex = rep.find("explicit", cfg.rationale_tokens).mean_ms;
    report(7, lat < 0.25 * ex && lat / pl > 1 && lat / pl < 4, "efficiency ordering",
           "latent(K=3) " + num(lat, 3) + " ms < 0.25 x explicit(R=64) " + num(ex, 3) +
               " ms; latent/plain " + num(lat / pl, 3) + " in (1, 4) over " +
               std::to_string(rep.find("plain").samples) + " queries");
  }

  // Reproducibility: repeat the seed-0 full run, then resume from mid-run.
  {
    const auto dir = fs::temp_directory_path() / "laser_acceptance";
    fs::create_directories(dir);
    const auto cfg = desk_train(kSeeds[0]);
    const auto model_cfg = desk_model(kSeeds[0]);
    const auto& data = datasets[0].train;
    const auto& first = full_runs[0];
    const auto second = train(model_cfg, cfg, data);
    write_bytes(dir / "a.ckpt", make_checkpoint(first.model, first.opt, cfg, first.step));
    write_bytes(dir / "b.ckpt", make_checkpoint(second.model, second.opt, cfg, second.step));
    const bool same_run = first.log == second.log && slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");

    const auto half = first.total / 2;
    const auto head = train(model_cfg, cfg, data, nullptr, half);
    write_bytes(dir / "mid.ckpt", make_checkpoint(head.model, head.opt, cfg, head.step));
    const auto mid = load_checkpoint(dir / "mid.ckpt");
    const auto tail = train(model_cfg, cfg, data, &mid);
    auto joined = head.log;
    joined.insert(joined.end(), tail.log.begin(), tail.log.end());
    write_bytes(dir / "c.ckpt", make_checkpoint(tail.model, tail.opt, cfg, tail.step));
    const bool same_resume = joined == first.log && slurp(dir / "a.ckpt") == slurp(dir / "c.ckpt");
    report(8, same_run && same_resume, "reproducibility",
           std::string("repeat run logs+checkpoint ") + (same_run ? "bitwise equal" : "DIFFER") +
               ", resume at step " + std::to_string(half) + "/" + std::to_string(first.total) +
               " " + (same_resume ? "bitwise equal" : "DIFFERS") + " to the straight run");
    fs::remove_all(dir);
  }

  std::cout << "\nsummary\n";
  for (const auto& [id, line] : g_lines) std::cout << line << '\n';
  std::cout << (g_failures == 0 ? "ALL PASS" : std::to_string(g_failures) + " criteria FAILED")
            << " in " << num(seconds_since(t_start), 4) << " s" << std::endl;
  return g_failures == 0 ? 0 : 1;
}
