#pragma once

// Run configuration: an INI file with sections data, split, annotation,
// model, baseline, train, personalize, evaluate, theory and run. Every key is
// optional; unknown sections and keys are rejected. Data paths resolve
// relative to the config file.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "i2i/errors.hpp"
#include "i2i/optim.hpp"
#include "i2i/personalization.hpp"
#include "i2i/pipeline.hpp"
#include "i2i/siamese.hpp"
#include "i2i/ssl.hpp"
#include "i2i/theory.hpp"

namespace i2i {

struct RunConfig {
  std::filesystem::path interactions;
  std::filesystem::path manifest;
  PipelineSettings pipeline;
  std::size_t eval_users = 0; ///< user scope: first this many eligible users, 0 for all
  ConvergenceConfig theory;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class T> T parse_as(const std::string &key, const std::string &text) {
  T v{};
  if (!parse_number(text, v))
    throw ConfigError("config key " + key + ": cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string &key, const std::string &text) {
  if (text == "true" || text == "1")
    return true;
  if (text == "false" || text == "0")
    return false;
  throw ConfigError("config key " + key + ": expected true or false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string &text) {
  std::vector<std::string> out;
  for (auto f : split_csv(text)) {
    auto t = trim(f);
    if (!t.empty())
      out.emplace_back(t);
  }
  return out;
}

inline std::string join(const std::vector<std::string> &v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k)
    s += (k ? "," : "") + v[k];
  return s;
}

struct Binding {
  std::string section, key;
  std::function<void(RunConfig &, const std::string &)> set;
  std::function<std::string(const RunConfig &)> get;
};

template <class Field> Binding num(const std::string &section, const std::string &key, Field field) {
  return {section, key,
          [=](RunConfig &c, const std::string &v) {
            auto &slot = field(c);
            slot = parse_as<std::remove_cvref_t<decltype(slot)>>(section + "." + key, v);
          },
          [=](const RunConfig &c) {
            const auto &slot = field(c);
            if constexpr (std::is_floating_point_v<std::remove_cvref_t<decltype(slot)>>)
              return format_double(slot);
            else
              return std::to_string(slot);
          }};
}

template <class Field> Binding flag(const std::string &section, const std::string &key, Field field) {
  return {section, key, [=](RunConfig &c, const std::string &v) { field(c) = parse_bool(section + "." + key, v); },
          [=](const RunConfig &c) { return std::string(field(c) ? "true" : "false"); }};
}

inline std::vector<Binding> bindings() {
  using C = RunConfig;
  std::vector<Binding> b;
  b.push_back({"data", "interactions", [](C &c, const std::string &v) { c.interactions = v; },
               [](const C &c) { return c.interactions.string(); }});
  b.push_back({"data", "manifest", [](C &c, const std::string &v) { c.manifest = v; },
               [](const C &c) { return c.manifest.string(); }});
  b.push_back(num("split", "test_fraction", [](auto &c) -> auto & { return c.pipeline.test_fraction; }));

  b.push_back(num("annotation", "window", [](auto &c) -> auto & { return c.pipeline.annotation.window; }));
  b.push_back(num("annotation", "samples", [](auto &c) -> auto & { return c.pipeline.annotation.samples; }));
  b.push_back(num("annotation", "anchors_per_user",
                  [](auto &c) -> auto & { return c.pipeline.annotation.anchors_per_user; }));

  b.push_back(num("model", "hidden", [](auto &c) -> auto & { return c.pipeline.model.hidden; }));
  b.push_back(num("model", "id_dim", [](auto &c) -> auto & { return c.pipeline.model.id_dim; }));
  b.push_back(flag("model", "use_id", [](auto &c) -> auto & { return c.pipeline.model.use_id; }));
  b.push_back(flag("model", "ensemble", [](auto &c) -> auto & { return c.pipeline.model.ensemble; }));
  b.push_back({"model", "lambda_mode",
               [](C &c, const std::string &v) {
                 if (v == "identity")
                   c.pipeline.model.lambda_mode = LambdaMode::fixed_identity;
                 else if (v == "learned")
                   c.pipeline.model.lambda_mode = LambdaMode::learned;
                 else
                   throw ConfigError("config key model.lambda_mode: expected identity or learned, got '" + v + "'");
               },
               [](const C &c) {
                 return std::string(c.pipeline.model.lambda_mode == LambdaMode::learned ? "learned" : "identity");
               }});
  b.push_back(num("model", "init_agg_h", [](auto &c) -> auto & { return c.pipeline.model.init_agg_h; }));
  b.push_back(num("model", "init_agg_b", [](auto &c) -> auto & { return c.pipeline.model.init_agg_b; }));

  b.push_back(num("baseline", "steps", [](auto &c) -> auto & { return c.pipeline.baseline.steps; }));
  b.push_back(num("baseline", "learning_rate", [](auto &c) -> auto & { return c.pipeline.baseline.learning_rate; }));
  b.push_back(num("baseline", "margin", [](auto &c) -> auto & { return c.pipeline.baseline.margin; }));
  b.push_back({"baseline", "optimizer",
               [](C &c, const std::string &v) { c.pipeline.baseline.optimizer = parse_optimizer(v); },
               [](const C &c) { return to_string(c.pipeline.baseline.optimizer); }});

  b.push_back(num("train", "steps", [](auto &c) -> auto & { return c.pipeline.train.steps; }));
  b.push_back(num("train", "learning_rate", [](auto &c) -> auto & { return c.pipeline.train.learning_rate; }));
  b.push_back({"train", "optimizer",
               [](C &c, const std::string &v) { c.pipeline.train.optimizer = parse_optimizer(v); },
               [](const C &c) { return to_string(c.pipeline.train.optimizer); }});
  b.push_back({"train", "batch_items",
               [](C &c, const std::string &v) {
                 const auto n = parse_as<std::size_t>("train.batch_items", v);
                 c.pipeline.train.batch_items = n ? std::optional<std::size_t>(n) : std::nullopt;
               },
               [](const C &c) { return std::to_string(c.pipeline.train.batch_items.value_or(0)); }});
  b.push_back(num("train", "eval_every", [](auto &c) -> auto & { return c.pipeline.train.eval_every; }));
  b.push_back({"train", "frozen", [](C &c, const std::string &v) { c.pipeline.train.frozen = split_list(v); },
               [](const C &c) { return join(c.pipeline.train.frozen); }});
  b.push_back(num("train", "inducing", [](auto &c) -> auto & { return c.pipeline.train.inducing; }));
  b.push_back(num("train", "init_noise", [](auto &c) -> auto & { return c.pipeline.init_noise; }));
  b.push_back(flag("train", "standardize_targets", [](auto &c) -> auto & { return c.pipeline.standardize_targets; }));

  b.push_back(num("personalize", "inner_rate", [](auto &c) -> auto & { return c.pipeline.meta.inner_rate; }));
  b.push_back(num("personalize", "inner_steps", [](auto &c) -> auto & { return c.pipeline.meta.inner_steps; }));
  b.push_back(num("personalize", "outer_rate", [](auto &c) -> auto & { return c.pipeline.meta.outer_rate; }));
  b.push_back(num("personalize", "outer_steps", [](auto &c) -> auto & { return c.pipeline.meta.outer_steps; }));
  b.push_back({"personalize", "jacobian",
               [](C &c, const std::string &v) { c.pipeline.meta.jacobian_mode = parse_jacobian_mode(v); },
               [](const C &c) { return to_string(c.pipeline.meta.jacobian_mode); }});
  b.push_back(num("personalize", "min_items", [](auto &c) -> auto & { return c.pipeline.users.min_items; }));
  b.push_back(num("personalize", "max_items", [](auto &c) -> auto & { return c.pipeline.users.max_items; }));

  b.push_back(num("evaluate", "k", [](auto &c) -> auto & { return c.pipeline.k; }));
  b.push_back(num("evaluate", "horizon", [](auto &c) -> auto & { return c.pipeline.horizon; }));
  b.push_back(num("evaluate", "users", [](auto &c) -> auto & { return c.eval_users; }));

  b.push_back({"theory", "n_grid",
               [](C &c, const std::string &v) {
                 c.theory.n_grid.clear();
                 for (const auto &f : split_list(v))
                   c.theory.n_grid.push_back(parse_as<Eigen::Index>("theory.n_grid", f));
               },
               [](const C &c) {
                 std::vector<std::string> f;
                 for (auto n : c.theory.n_grid)
                   f.push_back(std::to_string(n));
                 return join(f);
               }});
  b.push_back(num("theory", "trials", [](auto &c) -> auto & { return c.theory.trials; }));
  b.push_back(num("theory", "dim", [](auto &c) -> auto & { return c.theory.dim; }));
  b.push_back(num("theory", "scale", [](auto &c) -> auto & { return c.theory.scale; }));
  b.push_back(num("theory", "sigma2", [](auto &c) -> auto & { return c.theory.sigma2; }));
  b.push_back(num("theory", "hidden", [](auto &c) -> auto & { return c.theory.hidden; }));
  b.push_back(num("theory", "heldout_factor", [](auto &c) -> auto & { return c.theory.heldout_factor; }));
  b.push_back(num("theory", "steps", [](auto &c) -> auto & { return c.theory.train.steps; }));
  b.push_back(num("theory", "learning_rate", [](auto &c) -> auto & { return c.theory.train.learning_rate; }));

  b.push_back({"run", "seed",
               [](C &c, const std::string &v) {
                 c.pipeline.seed = parse_as<std::uint64_t>("run.seed", v);
                 c.theory.seed = c.pipeline.seed;
               },
               [](const C &c) { return std::to_string(c.pipeline.seed); }});
  return b;
}

} // namespace detail

/// Range checks on everything the config sets.
inline void validate(const RunConfig &c) {
  const auto &p = c.pipeline;
  if (c.interactions.empty() || c.manifest.empty())
    throw ConfigError("data.interactions and data.manifest are required");
  if (!(p.test_fraction > 0.0 && p.test_fraction < 1.0))
    throw ConfigError("split.test_fraction must lie in (0, 1)");
  if (p.annotation.window < 1 || p.annotation.samples < 1 || p.annotation.anchors_per_user < 1)
    throw ConfigError("annotation window, samples and anchors_per_user must be >= 1");
  if (p.model.hidden < 1 || (p.model.use_id && p.model.id_dim < 1))
    throw ConfigError("model.hidden (and id_dim when use_id) must be >= 1");
  if (p.baseline.steps < 0 || !(p.baseline.learning_rate >= 0.0) || !(p.baseline.margin > 0.0))
    throw ConfigError("baseline steps, learning_rate must be nonnegative and margin positive");
  if (p.train.steps < 0 || !(p.train.learning_rate > 0.0) || p.train.eval_every < 1 || p.train.inducing < 1)
    throw ConfigError("train steps >= 0, learning_rate > 0, eval_every >= 1 and inducing >= 1 required");
  if (!(p.init_noise > 0.0))
    throw ConfigError("train.init_noise must be positive");
  validate(p.meta);
  if (p.users.min_items < 2 || p.users.max_items < p.users.min_items)
    throw ConfigError("personalize.min_items must be >= 2 and <= max_items");
  if (p.k < 1 || p.horizon <= 0)
    throw ConfigError("evaluate.k and evaluate.horizon must be positive");
  const auto &t = c.theory;
  if (t.n_grid.empty() || t.n_grid.front() < 2)
    throw ConfigError("theory.n_grid needs sizes >= 2");
  for (std::size_t k = 1; k < t.n_grid.size(); ++k)
    if (t.n_grid[k] <= t.n_grid[k - 1])
      throw ConfigError("theory.n_grid must be increasing");
  if (t.trials < 1 || t.dim < 1 || t.hidden < 1 || !(t.scale > 0.0) || !(t.sigma2 > 0.0) ||
      t.train.steps < 0 || !(t.train.learning_rate > 0.0))
    throw ConfigError("theory settings out of range");
}

/// Parses INI text; relative data paths are resolved against `base_dir`.
inline RunConfig parse_config(const std::string &text, const std::filesystem::path &base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error &e) {
    throw ConfigError(std::string("config is not valid INI: ") + e.what());
  }
  const auto table = detail::bindings();
  std::map<std::pair<std::string, std::string>, const detail::Binding *> index;
  for (const auto &b : table)
    index[{b.section, b.key}] = &b;
  RunConfig c;
  for (const auto &[section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config key '" + section + "' sits outside any section");
    for (const auto &[key, value] : body) {
      auto it = index.find({section, key});
      if (it == index.end())
        throw ConfigError("unknown config key " + section + "." + key);
      it->second->set(c, std::string(detail::trim(value.data())));
    }
  }
  for (auto *path : {&c.interactions, &c.manifest})
    if (!path->empty() && path->is_relative())
      *path = (base_dir / *path).lexically_normal();
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), std::filesystem::absolute(path).parent_path());
}

/// Interactions and channels named by the config, split by time.
inline Dataset load_run_dataset(const RunConfig &c) {
  auto log = load_interactions(c.interactions);
  auto catalog = load_catalog(c.manifest, log);
  return prepare_dataset(std::move(log), std::move(catalog), c.pipeline.test_fraction);
}

/// Every key in table order; parse_config() of the result gives back `c`.
inline std::string dump_config(const RunConfig &c) {
  std::ostringstream out;
  std::string section;
  for (const auto &b : detail::bindings()) {
    if (b.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << b.section << "]\n";
      section = b.section;
    }
    out << b.key << " = " << b.get(c) << '\n';
  }
  return out.str();
}

} // namespace i2i
