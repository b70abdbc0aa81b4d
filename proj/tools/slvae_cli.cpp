// slvae_cli: gen-data, train, infer, eval and scale over one JSON run config.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "slvae/experiment.hpp"

using namespace slvae;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string observation;
  std::string prediction;
};

RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  c.validate();
  return c;
}

void echo(const std::string& command, const RunConfig& c) {
  std::cout << "# " << command << " resolved config\n" << to_json(c).dump(2) << "\n" << std::flush;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string vector_text(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += std::to_string(i) + " " + fmt(v[i]) + "\n";
  return s;
}

/// "value" per line in node order, or "node value" pairs. '#' starts a comment.
DenseVector read_vector(const fs::path& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  DenseVector v(n, 0.0);
  std::vector<bool> seen(n, false);
  std::string line;
  std::size_t line_no = 0, next = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string t; ss >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    std::size_t node = next;
    double value = 0.0;
    try {
      if (tok.size() == 2) {
        node = std::stoul(tok[0]);
        value = std::stod(tok[1]);
      } else if (tok.size() == 1) {
        value = std::stod(tok[0]);
      } else {
        throw std::invalid_argument("too many fields");
      }
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 'value' or 'node value'");
    }
    if (node >= n)
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": node " + std::to_string(node) +
                               " outside a graph of " + std::to_string(n) + " nodes");
    v[node] = value;
    seen[node] = true;
    next = node + 1;
  }
  const auto covered = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
  if (covered != n)
    throw std::runtime_error(path.string() + ": observation covers " + std::to_string(covered) +
                             " nodes, graph has " + std::to_string(n));
  return v;
}

/// Exit status contract: nonzero iff some declared artifact is missing.
int check_artifacts(const std::vector<fs::path>& declared) {
  int missing = 0;
  for (const auto& p : declared)
    if (!fs::exists(p)) {
      std::cerr << "error: declared artifact was not produced: " << p << "\n";
      ++missing;
    }
  return missing ? 1 : 0;
}

int cmd_gen_data(const Options& o) {
  RunConfig c = resolve(o);
  echo("gen-data", c);
  const Graph g = load_run_graph(c);
  const auto data = make_dataset(c, g);
  const fs::path ds = c.resolved_dataset();
  save_dataset(data, g.num_nodes(), ds);

  Json m;
  m["episodes"] = data.size();
  m["nodes"] = g.num_nodes();
  m["pattern"] = to_string(c.pattern);
  m["beta"] = c.sim.beta;
  m["gamma"] = c.sim.gamma;
  m["max_iterations"] = c.sim.max_iterations;
  m["mc_runs"] = c.data.mc_runs;
  m["subsets_per_episode"] = c.data.subsets_per_episode;
  m["master_seed"] = c.seed;
  m["dataset_seed"] = derive_seed(c.seed, stage::dataset);
  m["dataset_hash"] = hex(dataset_hash(data, g.num_nodes()));
  m["config"] = to_json(c);
  std::vector<fs::path> declared{ds, c.out / "dataset_manifest.json"};
  write_text(c.out / "dataset_manifest.json", m.dump(2) + "\n");

  if (c.pattern != PatternKind::cascade) {
    // one held-out query for trying out infer
    Rng rng = stage_rng(c.seed, stage::query, 0);
    const Query q = make_query(c, g, rng);
    write_text(c.out / "query_observation.txt", vector_text(q.observation));
    write_text(c.out / "query_truth.txt", vector_text(q.truth));
    declared.push_back(c.out / "query_observation.txt");
    declared.push_back(c.out / "query_truth.txt");
  }
  if (g.remapped()) {
    write_id_map(g, c.out / "id_map.txt");
    declared.push_back(c.out / "id_map.txt");
  }
  std::cout << "dataset: " << data.size() << " episodes over " << g.num_nodes() << " nodes, hash "
            << m["dataset_hash"].get<std::string>() << " -> " << ds.string() << "\n";
  return check_artifacts(declared);
}

std::vector<EpisodePair> load_checked_dataset(const RunConfig& c, const Graph& g) {
  std::size_t n = 0;
  auto data = load_dataset(c.resolved_dataset(), &n);
  if (n != g.num_nodes())
    throw std::runtime_error("dataset " + c.resolved_dataset().string() + " has " + std::to_string(n) +
                             " nodes, graph has " + std::to_string(g.num_nodes()));
  return data;
}

int cmd_train(const Options& o) {
  RunConfig c = resolve(o);
  echo("train", c);
  const Graph g = load_run_graph(c);
  const auto data = load_checked_dataset(c, g);
  const TrainedModels models = train_models(c, g, data);
  const fs::path bundle = c.resolved_bundle();
  const std::string bytes = serialize_bundle(models.bundle());
  write_file(bundle, bytes);

  std::string fl = "epoch,train_mse,holdout_mse\n";
  for (std::size_t e = 0; e < models.forward.train_mse.size(); ++e)
    fl += std::to_string(e) + "," + fmt(models.forward.train_mse[e]) + "," + fmt(models.forward.holdout_mse[e]) + "\n";
  std::string vl = "epoch,loss\n";
  for (std::size_t e = 0; e < models.vae.loss_trace.size(); ++e)
    vl += std::to_string(e) + "," + fmt(models.vae.loss_trace[e]) + "\n";
  write_text(c.out / "forward_loss.csv", fl);
  write_text(c.out / "vae_loss.csv", vl);

  double delta = c.inference.delta;
  if (c.experiment.delta_mode == DeltaMode::calibrated && c.pattern != PatternKind::cascade)
    delta = calibrate_delta(g, SurrogateForward(models.forward_params()), models.decoded,
                            variant_config(c, Method::slvae), calibration_queries(c, g, data), c.seed);

  Json m;
  m["latent_dim"] = c.vae.latent_dim;
  m["lambda"] = c.vae.lambda;
  m["vae_epochs"] = c.vae.epochs;
  m["forward_epochs"] = c.forward.epochs;
  m["forward_best_epoch"] = models.forward.best_epoch;
  m["joint"] = c.vae.joint;
  m["master_seed"] = c.seed;
  m["seeds"] = {{"forward", derive_seed(c.seed, stage::forward)},
                {"vae", derive_seed(c.seed, stage::vae)},
                {"bank", derive_seed(c.seed, stage::bank)}};
  m["dataset_hash"] = hex(models.dataset_hash);
  m["bundle_hash"] = hex(fnv1a(bytes));
  m["delta"] = delta;
  m["delta_mode"] = to_string(c.experiment.delta_mode);
  m["config"] = to_json(c);
  write_text(c.out / "model_manifest.json", m.dump(2) + "\n");
  std::cout << "trained: forward best epoch " << models.forward.best_epoch << ", vae loss "
            << fmt(models.vae.loss_trace.front()) << " -> " << fmt(models.vae.loss_trace.back()) << ", delta "
            << fmt(delta) << " -> " << bundle.string() << "\n";
  return check_artifacts({bundle, c.out / "model_manifest.json", c.out / "forward_loss.csv", c.out / "vae_loss.csv"});
}

int cmd_infer(const Options& o) {
  RunConfig c = resolve(o);
  echo("infer", c);
  if (o.observation.empty()) throw ConfigError("infer: --observation is required");
  const Graph g = load_run_graph(c);
  const auto data = load_checked_dataset(c, g);
  const ModelBundle b = load_bundle(c.resolved_bundle());
  if (b.vae.num_nodes() != g.num_nodes())
    throw std::runtime_error("model bundle was trained on " + std::to_string(b.vae.num_nodes()) +
                             " nodes, graph has " + std::to_string(g.num_nodes()));
  InferenceConfig ic = c.resolved_inference();
  const fs::path manifest = c.resolved_bundle().parent_path() / "model_manifest.json";
  if (c.experiment.delta_mode == DeltaMode::calibrated && fs::exists(manifest)) {
    std::ifstream in(manifest);
    ic.delta = Json::parse(in).at("delta").get<double>();
  }
  const DenseVector y = read_vector(o.observation, g.num_nodes());
  const LatentBank bank = make_bank(c, b.vae, data);
  Rng rng = stage_rng(c.seed, stage::infer, 0);
  const InferenceResult res = infer(y, SurrogateForward(b.forward), b.vae, bank, g, ic, rng);

  const fs::path pred = o.prediction.empty() ? c.out / "prediction.csv" : fs::path(o.prediction);
  std::string s = "node,score,decision\n";
  for (std::size_t i = 0; i < res.x.size(); ++i)
    s += std::to_string(i) + "," + fmt(res.relaxed[i]) + "," + fmt(res.x[i]) + "\n";
  write_text(pred, s);
  std::cout << "predicted " << seed_count(res.x) << " sources (delta " << fmt(ic.delta) << ")";
  if (!res.trace.empty())
    std::cout << ", loss " << fmt(res.trace.front().loss) << " -> " << fmt(res.trace.back().loss);
  std::cout << " -> " << pred.string() << "\n";
  return check_artifacts({pred});
}

int cmd_eval(const Options& o) {
  RunConfig c = resolve(o);
  echo("eval", c);
  const ExperimentReport r = run_experiment(c);
  const auto declared = write_experiment_reports(r, c.out);
  std::printf("%-16s %6s %6s %6s %6s %6s  %s\n", "method", "PR", "RE", "F1", "AUC", "delta", "trials");
  for (const auto& m : r.methods)
    std::printf("%-16s %6.3f %6.3f %6.3f %6.3f %6s  %zu/%zu%s\n", to_string(m.method), m.precision.mean,
                m.recall.mean, m.f1.mean, m.auc.mean, is_slvae(m.method) ? fmt(m.delta).c_str() : "-", m.successes,
                m.trials.size(), m.flagged ? " FLAGGED" : "");
  std::printf("train %.1f s, inference %.1f s\n", r.train_seconds, r.infer_seconds);
  return check_artifacts(declared);
}

int cmd_scale(const Options& o) {
  RunConfig c = resolve(o);
  echo("scale", c);
  const auto rows = time_scaling(c);
  write_text(c.out / "scaling.csv", scaling_csv(rows));
  Json j;
  j["config"] = to_json(c);
  Json table = Json::array();
  for (const auto& r : rows)
    table.push_back({{"nodes", r.nodes},
                     {"edges", r.edges},
                     {"train_seconds", r.train_seconds},
                     {"infer_seconds", r.infer_seconds}});
  j["rows"] = table;
  j["artifacts"] = {"scaling.csv", "scaling.json"};
  write_text(c.out / "scaling.json", j.dump(2) + "\n");
  std::cout << scaling_csv(rows);
  return check_artifacts({c.out / "scaling.csv", c.out / "scaling.json"});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion source localization with a VAE prior and a learned forward model"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed (overrides the config)");
    sub->add_option("--out", o.out, "output directory (overrides the config)");
  };
  auto* gen = app.add_subcommand("gen-data", "simulate the training dataset");
  auto* train = app.add_subcommand("train", "train the forward surrogate and the VAE");
  auto* inf = app.add_subcommand("infer", "localize sources for one observation");
  auto* eval = app.add_subcommand("eval", "repeated-trial experiment with reports");
  auto* scale = app.add_subcommand("scale", "runtime against graph size");
  for (auto* s : {gen, train, inf, eval, scale}) common(s);
  inf->add_option("--observation", o.observation, "observation file")->required()->check(CLI::ExistingFile);
  inf->add_option("--prediction", o.prediction, "prediction file (default <out>/prediction.csv)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (train->parsed()) return cmd_train(o);
    if (inf->parsed()) return cmd_infer(o);
    if (eval->parsed()) return cmd_eval(o);
    if (scale->parsed()) return cmd_scale(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
