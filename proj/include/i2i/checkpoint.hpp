#pragma once

// JSON checkpoints for metric parameters and GP states. Matrices are stored
// as {rows, cols, data} with column-major data; doubles are written in
// shortest round-trip form so reloads are bit-exact.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "i2i/data_model.hpp"
#include "i2i/errors.hpp"
#include "i2i/gp.hpp"
#include "i2i/siamese.hpp"

namespace i2i {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char *kCheckpointFormat = "i2i-checkpoint";

namespace detail {

using json = nlohmann::json;

inline json finite_number(double v) {
  if (!std::isfinite(v))
    throw DataError("cannot checkpoint a non-finite value");
  return v;
}

inline json matrix_to_json(const Eigen::MatrixXd &m) {
  json data = json::array();
  for (Eigen::Index k = 0; k < m.size(); ++k)
    data.push_back(finite_number(m.data()[k]));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline json vector_to_json(const Eigen::VectorXd &v) {
  json data = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k)
    data.push_back(finite_number(v[k]));
  return data;
}

inline Eigen::MatrixXd matrix_from_json(const json &j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto &data = j.at("data");
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw DataError("checkpoint matrix has inconsistent shape");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k)
    m.data()[k] = data[static_cast<std::size_t>(k)].get<double>();
  return m;
}

inline Eigen::VectorXd vector_from_json(const json &j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index k = 0; k < v.size(); ++k)
    v[k] = j[static_cast<std::size_t>(k)].get<double>();
  return v;
}

inline json metric_to_json(const SiameseEnsembleParams &p) {
  json channels = json::array();
  for (const auto &c : p.channels)
    channels.push_back({{"W_o", matrix_to_json(c.tower.W_o)},
                        {"b_o", vector_to_json(c.tower.b_o)},
                        {"W_s", matrix_to_json(c.tower.W_s)},
                        {"b_s", vector_to_json(c.tower.b_s)},
                        {"W_t", matrix_to_json(c.tower.W_t)},
                        {"b_t", vector_to_json(c.tower.b_t)},
                        {"lambda", vector_to_json(c.lambda_diag)}});
  return {{"channels", std::move(channels)},
          {"id_embed", matrix_to_json(p.id_embed.table)},
          {"use_id", p.use_id},
          {"ensemble", p.ensemble},
          {"lambda_mode", p.lambda_mode == LambdaMode::learned ? "learned" : "identity"},
          {"agg_h", vector_to_json(p.agg_h)},
          {"agg_b", finite_number(p.agg_b)}};
}

inline SiameseEnsembleParams metric_from_json(const json &j) {
  SiameseEnsembleParams p;
  for (const auto &c : j.at("channels")) {
    ChannelMetricParams m;
    m.tower.W_o = matrix_from_json(c.at("W_o"));
    m.tower.b_o = vector_from_json(c.at("b_o"));
    m.tower.W_s = matrix_from_json(c.at("W_s"));
    m.tower.b_s = vector_from_json(c.at("b_s"));
    m.tower.W_t = matrix_from_json(c.at("W_t"));
    m.tower.b_t = vector_from_json(c.at("b_t"));
    m.lambda_diag = vector_from_json(c.at("lambda"));
    const auto &t = m.tower;
    const auto h = t.W_t.rows();
    if (t.b_o.size() != t.W_o.rows() || t.W_s.cols() != t.W_o.rows() || t.b_s.size() != t.W_s.rows() ||
        t.W_t.cols() != t.W_s.rows() || t.b_t.size() != h || m.lambda_diag.size() != h)
      throw DataError("checkpoint channel has inconsistent layer shapes");
    p.channels.push_back(std::move(m));
  }
  p.id_embed.table = matrix_from_json(j.at("id_embed"));
  p.use_id = j.at("use_id").get<bool>();
  p.ensemble = j.at("ensemble").get<bool>();
  const auto mode = j.at("lambda_mode").get<std::string>();
  if (mode == "learned")
    p.lambda_mode = LambdaMode::learned;
  else if (mode == "identity")
    p.lambda_mode = LambdaMode::fixed_identity;
  else
    throw DataError("unknown lambda_mode '" + mode + "' in checkpoint");
  p.agg_h = vector_from_json(j.at("agg_h"));
  p.agg_b = j.at("agg_b").get<double>();
  if (p.agg_h.size() != static_cast<Eigen::Index>(p.num_components()))
    throw DataError("checkpoint aggregation weights do not match the component count");
  return p;
}

inline json read_checkpoint_json(const std::string &path) {
  if (!std::filesystem::exists(path))
    throw MissingCheckpointError("checkpoint not found: " + path);
  std::ifstream in(path);
  if (!in)
    throw MissingCheckpointError("cannot open checkpoint " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception &e) {
    throw DataError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat)
    throw DataError("checkpoint " + path + " has an unknown format");
  if (j.value("version", 0) != kCheckpointVersion)
    throw DataError("checkpoint " + path + " has unsupported version");
  return j;
}

inline void write_checkpoint_json(const json &j, const std::string &path) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write checkpoint " + path);
  out << j.dump(1) << '\n';
}

template <class F> auto guard_json(const std::string &path, F &&f) {
  try {
    return f();
  } catch (const json::exception &e) {
    throw DataError("checkpoint " + path + " is malformed: " + e.what());
  }
}

} // namespace detail

enum class CheckpointKind { metric, gp };

inline void save_metric_checkpoint(const SiameseEnsembleParams &p, const std::string &path) {
  detail::json j{{"format", kCheckpointFormat},
                 {"version", kCheckpointVersion},
                 {"kind", "metric"},
                 {"metric", detail::metric_to_json(p)}};
  detail::write_checkpoint_json(j, path);
}

inline CheckpointKind checkpoint_kind(const std::string &path) {
  const auto j = detail::read_checkpoint_json(path);
  const auto kind = j.value("kind", "");
  if (kind == "metric")
    return CheckpointKind::metric;
  if (kind == "gp")
    return CheckpointKind::gp;
  throw DataError("checkpoint " + path + " has unknown kind '" + kind + "'");
}

/// Metric parameters from either checkpoint kind.
inline SiameseEnsembleParams load_metric_checkpoint(const std::string &path) {
  const auto j = detail::read_checkpoint_json(path);
  return detail::guard_json(path, [&] { return detail::metric_from_json(j.at("metric")); });
}

/// Metric, log noise, training item ids and targets.
inline void save_gp_checkpoint(const GPState &s, const std::string &path) {
  if (!s.catalog)
    throw DataError("GP state has no catalog");
  std::vector<std::string> ids;
  for (auto i : s.train_items)
    ids.push_back(s.catalog->items.at(i));
  detail::json j{{"format", kCheckpointFormat},
                 {"version", kCheckpointVersion},
                 {"kind", "gp"},
                 {"metric", detail::metric_to_json(s.metric)},
                 {"log_noise", detail::finite_number(s.log_noise)},
                 {"train_items", ids},
                 {"r", detail::vector_to_json(s.r)}};
  detail::write_checkpoint_json(j, path);
}

/// Rebuilds (and refactorises) a GP state against `catalog`.
inline GPState load_gp_checkpoint(const std::string &path, std::shared_ptr<const ItemCatalog> catalog,
                                  bool factor = true) {
  const auto j = detail::read_checkpoint_json(path);
  if (j.value("kind", "") != "gp")
    throw DataError("checkpoint " + path + " does not hold a GP state");
  return detail::guard_json(path, [&] {
    auto metric = detail::metric_from_json(j.at("metric"));
    std::vector<std::size_t> items;
    for (const auto &id : j.at("train_items"))
      items.push_back(catalog->index_of(id.get<std::string>()));
    Eigen::VectorXd r = detail::vector_from_json(j.at("r"));
    if (r.size() != static_cast<Eigen::Index>(items.size()))
      throw DataError("checkpoint targets do not match its training items");
    return make_gp_state(std::move(catalog), std::move(metric), j.at("log_noise").get<double>(),
                         std::move(items), std::move(r), factor);
  });
}

/// Log noise stored in a GP checkpoint.
inline double load_log_noise(const std::string &path) {
  const auto j = detail::read_checkpoint_json(path);
  if (!j.contains("log_noise"))
    throw DataError("checkpoint " + path + " carries no noise level");
  return detail::guard_json(path, [&] { return j.at("log_noise").get<double>(); });
}

} // namespace i2i
