// i2i: staged command-line driver. Exit codes: 0 ok, 1 unexpected, 2 bad
// config or data, 3 missing checkpoint, 4 numerical abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "i2i/checkpoint.hpp"
#include "i2i/config.hpp"
#include "i2i/synthetic.hpp"

namespace fs = std::filesystem;
using namespace i2i;

namespace {

fs::path prepare_out(const std::string &dir, const RunConfig &c) {
  fs::path out(dir);
  fs::create_directories(out);
  std::ofstream(out / "config.ini") << dump_config(c);
  return out;
}

void write_loss_trace(const fs::path &path, const std::vector<double> &trace, const char *column) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write " + path.string());
  out.precision(17);
  out << "step," << column << '\n';
  for (std::size_t k = 0; k < trace.size(); ++k)
    out << k << ',' << trace[k] << '\n';
}

int cmd_ingest(const RunConfig &c) {
  const auto d = load_run_dataset(c);
  std::size_t users = user_histories(d.log, *d.catalog).size();
  std::cout << "items " << d.catalog->size() << '\n'
            << "users " << users << '\n'
            << "interactions " << d.log.size() << '\n'
            << "train_items " << d.split.train_items.size() << '\n'
            << "test_items " << d.split.test_items.size() << '\n'
            << "channels " << d.catalog->channels.size() << '\n';
  for (const auto &ch : d.catalog->channels)
    std::cout << "channel " << ch.name << ' ' << to_string(ch.kind) << ' ' << ch.dim << '\n';
  return 0;
}

int cmd_train_baseline(const RunConfig &c, const std::string &dir) {
  const auto d = load_run_dataset(c);
  const auto out = prepare_out(dir, c);
  auto res = run_baseline(d, initial_params(d, c.pipeline), c.pipeline);
  write_loss_trace(out / "baseline_trace.csv", res.loss_trace, "loss");
  save_metric_checkpoint(res.params, (out / "baseline.json").string());
  std::cout << "baseline loss " << res.loss_trace.front() << " -> " << res.loss_trace.back() << '\n';
  return 0;
}

int cmd_train_ssl(const RunConfig &c, const std::string &init_path, const std::string &dir) {
  const auto init = load_metric_checkpoint(init_path);
  const auto d = load_run_dataset(c);
  const auto out = prepare_out(dir, c);
  try {
    auto res = run_ssl(d, init, c.pipeline);
    write_trace_csv(res.trace, (out / "ssl_trace.csv").string());
    save_gp_checkpoint(res.state, (out / "ssl.json").string());
    std::cout << "ssl nll " << res.trace.rows.front().nll << " -> best " << nll(res.state) << ", sigma2 "
              << res.state.noise() << '\n';
  } catch (const TrainingAborted &e) {
    write_trace_csv(e.trace, (out / "ssl_trace.csv").string());
    throw;
  }
  return 0;
}

int cmd_personalize(const RunConfig &c, const std::string &ssl_path, const std::string &dir) {
  const auto psi = load_metric_checkpoint(ssl_path);
  const double noise = std::exp(load_log_noise(ssl_path));
  const auto d = load_run_dataset(c);
  const auto out = prepare_out(dir, c);
  auto res = run_personalization(d, psi, noise, c.pipeline);
  write_loss_trace(out / "meta_trace.csv", res.meta_trace, "post_update_loss");
  save_metric_checkpoint(with_aggregation(psi, res.meta_w), (out / "meta.json").string());
  write_user_weights_csv((out / "user_weights.csv").string(), res.user_w);
  std::cout << "personalized " << res.user_w.size() << " users, post-update loss " << res.meta_trace.front()
            << " -> " << res.meta_trace.back() << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig &c, const std::string &model_path, const std::string &scope,
                 const std::string &weights_path, const std::string &dir) {
  const auto model = load_metric_checkpoint(model_path);
  std::map<std::string, Eigen::VectorXd> user_w;
  if (!weights_path.empty())
    for (auto &[u, w] : read_user_weights_csv(weights_path))
      user_w[u] = w;
  const auto d = load_run_dataset(c);
  const auto out = prepare_out(dir, c);
  const auto &s = c.pipeline;
  if (scope == "population") {
    const auto rep = evaluate_population(model, d, s);
    write_report_csv(rep, (out / "report_population.csv").string(),
                     [&](const QueryScore &q) { return d.catalog->items[q.query]; });
    std::cout << "population HR@" << s.k << ' ' << rep.mean_hr << " MRR " << rep.mean_mrr << " NDCG "
              << rep.mean_ndcg << " over " << rep.num_queries << " queries\n";
    return 0;
  }
  // one row per user: that user's means under their own weights when given
  RankingReport all;
  all.k = s.k;
  std::vector<std::string> labels;
  for (const auto &[user, _] : user_histories(d.log, *d.catalog)) {
    if (c.eval_users && labels.size() == c.eval_users)
      break;
    auto params = model;
    if (auto it = user_w.find(user); it != user_w.end())
      params.set_aggregation(it->second);
    RankingReport rep;
    try {
      rep = evaluate_user(params, d, user, s);
    } catch (const DataError &) {
      continue;
    }
    all.per_query.push_back({labels.size(), rep.mean_hr, rep.mean_mrr, rep.mean_ndcg});
    labels.push_back(user);
  }
  if (labels.empty())
    throw DataError("no user has co-interactions within the horizon");
  all.num_queries = labels.size();
  for (const auto &q : all.per_query) {
    all.mean_hr += q.hr / static_cast<double>(labels.size());
    all.mean_mrr += q.mrr / static_cast<double>(labels.size());
    all.mean_ndcg += q.ndcg / static_cast<double>(labels.size());
  }
  write_report_csv(all, (out / "report_user.csv").string(), [&](const QueryScore &q) { return labels[q.query]; });
  std::cout << "user HR@" << s.k << ' ' << all.mean_hr << " MRR " << all.mean_mrr << " NDCG " << all.mean_ndcg
            << " over " << labels.size() << " users\n";
  return 0;
}

int cmd_theory(RunConfig c, int threads, const std::string &dir) {
  c.theory.threads = threads;
  const auto out = prepare_out(dir, c);
  const auto rep = convergence_experiment(c.theory);
  write_theory_csv(rep, (out / "theory.csv").string());
  std::ofstream sum(out / "theory_summary.csv");
  sum.precision(17);
  sum << "n,mean_sup_gap,mean_lemma_bound\n";
  for (std::size_t g = 0; g < rep.n_grid.size(); ++g) {
    sum << rep.n_grid[g] << ',' << rep.mean_sup_gap[g] << ',' << rep.mean_lemma_bound[g] << '\n';
    std::cout << "n " << rep.n_grid[g] << " mean sup gap " << rep.mean_sup_gap[g] << '\n';
  }
  if (rep.failed)
    std::cout << rep.failed << " trials failed\n";
  return 0;
}

int cmd_generate(std::uint64_t seed, const std::string &dir) {
  SyntheticConfig sc;
  sc.seed = seed;
  write_synthetic(generate_synthetic(sc), dir);
  std::cout << "wrote synthetic dataset to " << dir << '\n';
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Item-to-item metric learning with GP kernels"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker cap for parallel experiments")->check(CLI::PositiveNumber);

  std::string config, out, init, ssl, model, scope, weights;
  std::uint64_t seed = 7;
  auto add_config = [&](CLI::App *sub) { sub->add_option("--config", config, "Run config (INI)")->required(); };
  auto add_out = [&](CLI::App *sub) {
    sub->add_option("--out", out, "Output directory")->envname("I2I_OUT")->required();
  };

  auto *ingest = app.add_subcommand("ingest", "Validate data files and print a catalog summary");
  add_config(ingest);
  auto *baseline = app.add_subcommand("train-baseline", "Contrastive training of the Siamese ensemble");
  add_config(baseline);
  add_out(baseline);
  auto *train_ssl = app.add_subcommand("train-ssl", "GP marginal-likelihood training from a metric checkpoint");
  add_config(train_ssl);
  train_ssl->add_option("--init", init, "Metric checkpoint to start from")->required();
  add_out(train_ssl);
  auto *personalize = app.add_subcommand("personalize", "Meta-learn and adapt per-user aggregation weights");
  add_config(personalize);
  personalize->add_option("--ssl", ssl, "GP checkpoint from train-ssl")->required();
  add_out(personalize);
  auto *evaluate_cmd = app.add_subcommand("evaluate", "Ranking metrics of a metric checkpoint");
  add_config(evaluate_cmd);
  evaluate_cmd->add_option("--model", model, "Metric or GP checkpoint")->required();
  evaluate_cmd->add_option("--scope", scope, "population or user")
      ->required()
      ->check(CLI::IsMember({"population", "user"}));
  evaluate_cmd->add_option("--weights", weights, "user_weights.csv from personalize (user scope)");
  add_out(evaluate_cmd);
  auto *theory = app.add_subcommand("theory", "Convergence experiment on synthetic oracle worlds");
  add_config(theory);
  add_out(theory);
  auto *generate = app.add_subcommand("generate-synthetic", "Write the two-archetype synthetic dataset");
  generate->add_option("--seed", seed, "Generator seed");
  add_out(generate);

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed())
      return cmd_generate(seed, out);
    const auto cfg = load_config(config);
    if (ingest->parsed())
      return cmd_ingest(cfg);
    if (baseline->parsed())
      return cmd_train_baseline(cfg, out);
    if (train_ssl->parsed())
      return cmd_train_ssl(cfg, init, out);
    if (personalize->parsed())
      return cmd_personalize(cfg, ssl, out);
    if (evaluate_cmd->parsed())
      return cmd_evaluate(cfg, model, scope, weights, out);
    if (theory->parsed())
      return cmd_theory(cfg, threads, out);
  } catch (const MissingCheckpointError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError &e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 4;
  } catch (const DivergenceError &e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 4;
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
