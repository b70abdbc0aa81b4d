// Acceptance runner. One PASS/FAIL line per criterion.
//
//   acceptance                 all criteria
//   acceptance --criterion 6   one criterion
//
// Exit status: 0 when every selected criterion passes, 1 when any fails on
// its merits, 77 when the only failures are criteria whose input data is
// absent (reported as FAIL with a "blocked" reason).

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <set>

#include "CLI11.hpp"
#include "slvae/experiment.hpp"
#include "slvae/gradcheck.hpp"
#include "slvae/lpsi.hpp"

using namespace slvae;
namespace fs = std::filesystem;

namespace {

const fs::path kData = SLVAE_DATA_DIR;
const fs::path kSource = SLVAE_SOURCE_DIR;
const fs::path kWork = fs::temp_directory_path() / "slvae_acceptance";

enum class Status { pass, fail, blocked };

struct Outcome {
  Status status = Status::fail;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

RunConfig preset(const std::string& name) {
  RunConfig c = load_config(kSource / "configs" / (name + ".json"));
  if (c.graph.is_relative()) c.graph = kData / c.graph.filename();
  c.out = kWork / name;
  return c;
}

Matrix uniform_matrix(std::size_t r, std::size_t c, Rng& rng, double lo, double hi) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = lo + (hi - lo) * uniform01(rng);
  return m;
}

MlpVars vars_at(const std::vector<Var>& v, std::size_t offset, const MlpParams& like) {
  MlpVars out;
  for (std::size_t l = 0; l < like.layers.size(); ++l) {
    out.weights.push_back(v[offset + 2 * l]);
    out.biases.push_back(v[offset + 2 * l + 1]);
    out.activations.push_back(like.layers[l].activation);
  }
  return out;
}

// Fresh layers start with zero biases, which puts whole rows exactly on a ReLU
// kink; a random point needs random biases too.
void jitter_biases(MlpParams& p, Rng& rng) {
  for (auto& l : p.layers)
    for (double& b : l.bias.data()) b = 0.2 * (uniform01(rng) - 0.5);
}

std::vector<Matrix> flatten(std::initializer_list<const MlpParams*> nets) {
  std::vector<Matrix> out;
  for (const MlpParams* p : nets)
    for (const Matrix* m : p->tensors()) out.push_back(*m);
  return out;
}

// Experiments are shared between criteria that read the same preset.
std::map<std::string, ExperimentReport> g_reports;
std::map<std::string, double> g_report_seconds;
ModelCache g_cache;

const ExperimentReport& experiment(const std::string& name, double* seconds = nullptr) {
  auto it = g_reports.find(name);
  if (it == g_reports.end()) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t hits = g_cache.hits();
    ExperimentReport r = run_experiment(preset(name), &g_cache);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // models trained earlier by another criterion still count toward this one
    if (g_cache.hits() > hits) secs += r.train_seconds;
    g_report_seconds[name] = secs;
    it = g_reports.emplace(name, std::move(r)).first;
  }
  if (seconds) *seconds = g_report_seconds[name];
  return it->second;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const int points = 20;
  double worst_mlp = 0.0, worst_elbo = 0.0, worst_init = 0.0, worst_pred = 0.0;

  for (int p = 0; p < points; ++p) {
    const std::vector<std::size_t> dims{4, 6, 5, 3};
    const std::vector<Activation> acts{Activation::relu, Activation::relu, Activation::sigmoid};
    MlpParams net = init_mlp(dims, acts, rng);
    jitter_biases(net, rng);
    const Matrix x = uniform_matrix(3, 4, rng, -1.0, 1.0), target = uniform_matrix(3, 3, rng, 0.0, 1.0);
    std::vector<Matrix> point = flatten({&net});
    point.push_back(x);
    ScalarExpression f = [&](Tape& t, const std::vector<Var>& v) {
      return ad::squared_norm(ad::sub(apply(vars_at(v, 0, net), v.back()), t.constant(target)));
    };
    worst_mlp = std::max(worst_mlp, finite_diff_check(f, point, 1e-6).max_relative_error);
  }

  const std::vector<Edge> ring{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 0}, {1, 4}};
  const Graph small = Graph::from_edges(6, ring);
  for (int p = 0; p < points; ++p) {
    VaeParams vae = init_vae(6, 2, 5, rng);
    ForwardParams fp = init_forward(2, 4, rng);
    for (MlpParams* net : {&vae.encoder, &vae.decoder, &fp.mlp}) jitter_biases(*net, rng);
    const Matrix x = uniform_matrix(2, 6, rng, 0.1, 0.9), y = uniform_matrix(2, 6, rng, 0.0, 1.0);
    const Matrix subs = uniform_matrix(3, 6, rng, 0.1, 0.9), eps = noise_matrix(2, 2, rng);
    const std::vector<std::size_t> owner{0, 1, 1};
    std::vector<Matrix> point{x};
    for (const Matrix& m : flatten({&vae.encoder, &vae.decoder, &fp.mlp})) point.push_back(m);
    const std::size_t enc = 1, dec = enc + 2 * vae.encoder.layers.size(), fwd = dec + 2 * vae.decoder.layers.size();
    ScalarExpression f = [&](Tape& t, const std::vector<Var>& v) {
      const MlpVars fnet = vars_at(v, fwd, fp.mlp);
      ForwardFn fw = [&](Var in) { return surrogate_predict(fnet, fp.depth, small, in); };
      return elbo_terms(vars_at(v, enc, vae.encoder), vars_at(v, dec, vae.decoder), 2, &fw, v[0], t.constant(y),
                        t.constant(subs), owner, t.constant(eps), 1.0)
          .total;
    };
    const auto rep = finite_diff_check(f, point, 1e-6);
    worst_elbo = std::max(worst_elbo, rep.max_relative_error);
  }

  const Graph karate = load_edge_list(kData / "karate.txt");
  for (int p = 0; p < points; ++p) {
    VaeParams vae = init_vae(34, 4, 16, rng);
    ForwardParams fp = init_forward(3, 16, rng);
    for (MlpParams* net : {&vae.decoder, &fp.mlp}) jitter_biases(*net, rng);
    const SurrogateForward fwd(fp);
    LatentBank bank;
    bank.mean = standard_normal_vector(4, rng);
    for (int j = 0; j < 5; ++j) bank.samples.push_back(standard_normal_vector(4, rng));
    const DecodedBank d = decode_bank(vae, bank);
    const Matrix x = uniform_matrix(1, 34, rng, 0.05, 0.95), y = uniform_matrix(1, 34, rng, 0.0, 1.0);
    auto init = [&](Tape&, const std::vector<Var>& v) { return loss_init_expr(v[0], y, fwd, karate, d.prior); };
    auto pred = [&](Tape&, const std::vector<Var>& v) { return loss_pred_expr(v[0], y, fwd, karate, d); };
    worst_init = std::max(worst_init, finite_diff_check(init, {x}, 1e-6).max_relative_error);
    worst_pred = std::max(worst_pred, finite_diff_check(pred, {x}, 1e-6).max_relative_error);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double worst = std::max({worst_mlp, worst_elbo, worst_init, worst_pred});
  return verdict(worst < 1e-3 && secs < 60.0,
                 "max rel err mlp " + num(worst_mlp) + ", elbo " + num(worst_elbo) + ", loss_init " +
                     num(worst_init) + ", loss_pred " + num(worst_pred) + " (< 1e-3, 20 points each), " +
                     num(secs, 3) + " s (< 60)");
}

Outcome numerical_stability() {
  Rng rng(202);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    VaeParams vae = init_vae(10, 3, 8, rng);
    LatentBank bank;
    bank.mean.assign(3, 0.0);
    for (int j = 0; j < 6; ++j) bank.samples.push_back(standard_normal_vector(3, rng));
    const DecodedBank d = decode_bank(vae, bank);
    DenseVector x(10);
    for (double& v : x) v = bernoulli(rng, 0.3) ? 1.0 : 0.0;
    double naive = 0.0;
    for (std::size_t j = 0; j < d.probs.rows(); ++j) {
      double prod = 1.0;
      for (std::size_t i = 0; i < 10; ++i) prod *= x[i] > 0.5 ? d.probs(j, i) : 1.0 - d.probs(j, i);
      naive += prod;
    }
    worst = std::max(worst, std::abs(log_pmf(x, d) - std::log(naive)));
  }

  VaeParams big = init_vae(2000, 4, 16, rng);
  LatentBank bank;
  bank.mean.assign(4, 0.0);
  for (int j = 0; j < 8; ++j) bank.samples.push_back(standard_normal_vector(4, rng));
  const DecodedBank d = decode_bank(big, bank);
  DenseVector x(2000);
  for (double& v : x) v = bernoulli(rng, 0.1) ? 1.0 : 0.0;
  double naive = 0.0;
  for (std::size_t j = 0; j < d.probs.rows(); ++j) {
    double prod = 1.0;
    for (std::size_t i = 0; i < 2000; ++i) prod *= x[i] > 0.5 ? d.probs(j, i) : 1.0 - d.probs(j, i);
    naive += prod;
  }
  const double lse = log_pmf(x, d);
  return verdict(worst <= 1e-10 && naive == 0.0 && std::isfinite(lse),
                 "10 nodes: max |lse - naive| " + num(worst) + " (<= 1e-10); 2000 nodes: naive product " +
                     num(naive) + ", lse " + num(lse, 8));
}

Outcome closed_forms() {
  Rng rng(303);
  double worst_kl = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t k = 3;
    DenseVector mu(k), sigma(k);
    for (std::size_t d = 0; d < k; ++d) {
      mu[d] = -1.5 + 3.0 * uniform01(rng);
      sigma[d] = 0.3 + 1.5 * uniform01(rng);
    }
    double acc = 0.0;
    const std::size_t samples = 1000000;
    for (std::size_t s = 0; s < samples; ++s) {
      double lr = 0.0;
      for (std::size_t d = 0; d < k; ++d) {
        const double e = standard_normal(rng), z = mu[d] + sigma[d] * e;
        lr += -0.5 * e * e - std::log(sigma[d]) + 0.5 * z * z;
      }
      acc += lr;
    }
    const double mc = acc / static_cast<double>(samples), exact = kl_normal(mu, sigma);
    worst_kl = std::max(worst_kl, std::abs(mc - exact) / exact);
  }

  std::size_t mismatches = 0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 2 + uniform_index(rng, 199);
    DenseVector s(n), y(n);
    const std::uint64_t levels = 1 + uniform_index(rng, 15);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(uniform_index(rng, levels)) * 0.1;
      y[i] = bernoulli(rng, 0.25) ? 1.0 : 0.0;
    }
    y[0] = 1.0;
    y[n - 1] = 0.0;
    std::uint64_t twice = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) (y[i] > 0.5 ? pos : neg)++;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] > 0.5 && y[j] < 0.5) twice += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
    const double oracle = static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    mismatches += roc_auc(s, y) != oracle;
  }
  return verdict(worst_kl < 0.02 && mismatches == 0,
                 "kl vs 1e6-sample MC: max rel err " + num(worst_kl) + " over 20 cases (< 0.02); roc_auc vs pairwise: " +
                     std::to_string(mismatches) + "/50 mismatches");
}

Outcome diffusion_correctness() {
  const Graph g = load_edge_list(kData / "karate.txt");
  Rng rng(404);
  SimConfig si;
  si.beta = 0.2;
  si.max_iterations = 10;
  std::size_t mono_bad = 0;
  for (int run = 0; run < 1000; ++run) {
    const SeedVector x = sample_sources(g, 0.1, rng);
    std::vector<NodeState> prev;
    simulate_si(g, x, si, rng, [&](std::size_t step, std::span<const NodeState> s) {
      if (step > 0)
        for (std::size_t v = 0; v < s.size(); ++v)
          mono_bad += prev[v] == NodeState::infected && s[v] != NodeState::infected;
      prev.assign(s.begin(), s.end());
    });
  }

  SimConfig sir = si;
  sir.pattern = DiffusionPattern::sir;
  sir.gamma = 0.3;
  std::size_t partition_bad = 0;
  for (int run = 0; run < 1000; ++run) {
    const SeedVector x = sample_sources(g, 0.1, rng);
    simulate_sir(g, x, sir, rng, [&](std::size_t, std::span<const NodeState> s) {
      for (NodeState v : s)
        partition_bad +=
            !(v == NodeState::susceptible || v == NodeState::infected || v == NodeState::recovered);
    });
    const auto r = simulate_sir(g, x, sir, rng);
    for (std::size_t v = 0; v < r.status.size(); ++v)
      partition_bad += r.observation[v] != (r.status[v] == NodeState::infected ? 1.0 : 0.0);
  }

  std::size_t bitwise_bad = 0;
  SimConfig sir0 = sir;
  sir0.gamma = 0.0;
  for (int run = 0; run < 1000; ++run) {
    const SeedVector x = sample_sources(g, 0.1, rng);
    Rng a(5000 + run), b(5000 + run);
    bitwise_bad += simulate_si(g, x, si, a) != simulate_sir(g, x, sir0, b).observation || a() != b();
  }

  const std::vector<Edge> e{{0, 1}};
  const Graph pair = Graph::from_edges(2, e);
  SimConfig one;
  one.beta = 0.3;
  one.max_iterations = 1;
  const auto y = estimate_mc_observation(pair, SeedVector{1.0, 0.0}, one, 100000, rng);
  const bool analytic = std::abs(y[1] - 0.3) <= 0.01;
  return verdict(mono_bad == 0 && partition_bad == 0 && bitwise_bad == 0 && analytic,
                 "SI monotone violations " + std::to_string(mono_bad) + "/1000 runs; SIR partition violations " +
                     std::to_string(partition_bad) + "; SIR(gamma=0) != SI in " + std::to_string(bitwise_bad) +
                     "/1000; two-node P(infected) " + num(y[1]) + " (0.3 +- 0.01)");
}

Outcome monotonicity() {
  const Graph g = load_edge_list(kData / "karate.txt");
  Rng rng(505);
  SimConfig si;
  si.beta = 1.0;
  si.max_iterations = 2;
  DatasetConfig dc;
  dc.episodes = 200;
  dc.subsets_per_episode = 4;
  dc.mc_runs = 1;
  const auto det = build_dataset(g, si, dc, rng);
  const MeanFieldSi oracle(1.0, 2);
  double oracle_penalty = 0.0;
  std::size_t pairs = 0;
  for (const auto& ep : det) {
    const auto ysup = forward_predict(oracle, g, ep.source);
    for (const auto& s : ep.subsets) {
      oracle_penalty += monotonicity_penalty(ysup, forward_predict(oracle, g, s.source));
      ++pairs;
    }
  }

  // the surrogate trained by the Karate SI preset, on Monte-Carlo SI targets
  const RunConfig c = preset("karate_si");
  const Graph kg = load_run_graph(c);
  const auto data = make_dataset(c, kg);
  const auto models = g_cache.get(c, kg, data);
  const SurrogateForward learned(models->forward_params());
  double violation = 0.0;
  std::size_t entries = 0;
  for (const auto& ep : data) {
    const auto ysup = forward_predict(learned, kg, ep.source);
    for (const auto& s : ep.subsets) {
      const auto ysub = forward_predict(learned, kg, s.source);
      for (std::size_t v = 0; v < ysup.size(); ++v) violation += std::max(0.0, ysub[v] - ysup[v]);
      entries += ysup.size();
    }
  }
  violation /= static_cast<double>(std::max<std::size_t>(entries, 1));
  return verdict(oracle_penalty == 0.0 && pairs > 0 && violation < 0.05,
                 "oracle penalty " + num(oracle_penalty) + " over " + std::to_string(pairs) +
                     " superset pairs (== 0); learned surrogate mean violation " + num(violation) + " (< 0.05)");
}

std::string method_line(const MethodReport& m) {
  return std::string(to_string(m.method)) + " F1 " + num(m.f1.mean, 3) + " AUC " + num(m.auc.mean, 3) + " (" +
         std::to_string(m.successes) + "/" + std::to_string(m.trials.size()) + ")";
}

Outcome localization(const std::string& name, double min_auc, double min_f1, double max_seconds) {
  const RunConfig c = preset(name);
  if (!fs::exists(c.graph))
    return {Status::blocked, "blocked: " + c.graph.string() + " is not present and cannot be fetched offline"};
  double secs = 0.0;
  const auto& r = experiment(name, &secs);
  const auto& s = r.method(Method::slvae);
  const auto& l = r.method(Method::lpsi);
  const bool ok = !s.flagged && s.auc.mean >= min_auc && s.f1.mean >= min_f1 && s.auc.mean > l.auc.mean &&
                  secs < max_seconds;
  return verdict(ok, method_line(s) + " vs " + method_line(l) + "; need AUC >= " + num(min_auc) + ", F1 >= " +
                         num(min_f1) + ", AUC above baseline; " + num(secs, 3) + " s (< " + num(max_seconds) + ")");
}

Outcome ablation() {
  const auto& r = experiment("karate_si");
  const auto& full = r.method(Method::slvae);
  const auto& init = r.method(Method::slvae_init_only);
  return verdict(!full.flagged && !init.flagged && full.f1.mean >= init.f1.mean,
                 "full F1 " + num(full.f1.mean, 3) + " >= init-only F1 " + num(init.f1.mean, 3) + " over " +
                     std::to_string(full.trials.size()) + " trials");
}

Outcome sir_robustness() {
  double secs = 0.0;
  const auto& r = experiment("karate_sir", &secs);
  const auto& s = r.method(Method::slvae);
  const auto& l = r.method(Method::lpsi);
  return verdict(!s.flagged && s.auc.mean >= 0.60 && s.auc.mean > l.auc.mean,
                 method_line(s) + " vs " + method_line(l) + "; need AUC >= 0.6 and above baseline");
}

Outcome scalability() {
  const RunConfig c = preset("scale");
  const auto rows = time_scaling(c);
  const ScalingRow *lo = nullptr, *hi = nullptr;
  for (const auto& r : rows) {
    if (r.nodes == 1000) lo = &r;
    if (r.nodes == 4000) hi = &r;
  }
  if (!lo || !hi) return {Status::fail, "scale preset must include 1000 and 4000 nodes"};
  const double ratio = hi->infer_seconds / lo->infer_seconds;
  std::string detail;
  for (const auto& r : rows) detail += std::to_string(r.nodes) + ": " + num(r.infer_seconds, 3) + " s, ";
  return verdict(ratio <= 6.0, "inference " + detail + "ratio 4000/1000 = " + num(ratio, 3) + " (<= 6)");
}

Outcome determinism() {
  // the CLI steps, twice, on the smoke preset; byte comparison of every artifact
  auto pipeline = [](unsigned threads) {
    RunConfig c = preset("smoke");
    c.experiment.threads = threads;
    c.data.threads = threads;
    std::map<std::string, std::string> out;
    const Graph g = load_run_graph(c);
    const auto data = make_dataset(c, g);
    out["dataset"] = serialize_dataset(data, g.num_nodes());
    const auto models = train_models(c, g, data);
    out["bundle"] = serialize_bundle(models.bundle());
    Rng qrng = stage_rng(c.seed, stage::query, 0);
    const Query q = make_query(c, g, qrng);
    Rng irng = stage_rng(c.seed, stage::infer, 0);
    const auto res = infer(q.observation, SurrogateForward(models.forward_params()), models.decoded, g,
                           c.resolved_inference(), irng);
    std::string pred;
    for (std::size_t i = 0; i < res.x.size(); ++i) pred += fmt(res.relaxed[i]) + "," + fmt(res.x[i]) + "\n";
    out["prediction"] = pred;
    const auto rep = run_experiment(c);
    out["results.csv"] = results_csv(rep);
    out["summary.json"] = experiment_summary(rep).dump(2);
    for (const auto& m : rep.methods)
      for (const auto& t : m.trials) out["scores " + std::string(to_string(m.method))] += scores_csv(t, rep.truths[t.trial]);
    return out;
  };
  const auto a = pipeline(1), b = pipeline(1), t = pipeline(4);
  std::vector<std::string> diff;
  for (const auto& [k, v] : a) {
    if (b.at(k) != v) diff.push_back(k + " (rerun)");
    // the summary echoes the config, thread count included
    if (k != "summary.json" && t.at(k) != v) diff.push_back(k + " (4 threads)");
  }
  std::string list;
  for (const auto& d : diff) list += (list.empty() ? "" : ", ") + d;
  return verdict(diff.empty(), std::to_string(a.size()) + " artifact kinds compared across reruns and thread counts" +
                                   (diff.empty() ? ", all byte-identical" : "; differing: " + list));
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--criterion", only, "run only these criteria (1-11)");
  CLI11_PARSE(app, argc, argv);
  log::set_level(log::Level::warn);
  fs::create_directories(kWork);

  const std::vector<Criterion> all{
      {1, "gradient integrity", gradient_integrity},
      {2, "numerical stability", numerical_stability},
      {3, "closed-form correctness", closed_forms},
      {4, "diffusion correctness", diffusion_correctness},
      {5, "monotonicity machinery", monotonicity},
      {6, "karate SI localization", [] { return localization("karate_si", 0.70, 0.45, 300.0); }},
      {7, "jazz SI localization", [] { return localization("jazz_si", 0.80, 0.50, 1200.0); }},
      {8, "ablation direction", ablation},
      {9, "SIR robustness", sir_robustness},
      {10, "scalability", scalability},
      {11, "determinism", determinism},
  };
  const std::set<int> want(only.begin(), only.end());
  int failed = 0, blocked = 0;
  for (const auto& c : all) {
    if (!want.empty() && !want.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::fail, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s [%2d] %s: %s [%.1f s]\n", o.status == Status::pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.status == Status::fail;
    blocked += o.status == Status::blocked;
  }
  if (failed) return 1;
  return blocked ? 77 : 0;
}
