#pragma once

// Interaction logs, multi-channel item catalogs, time splits, noisy pair
// annotations, surrogate rating targets and co-interaction ground truth.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "i2i/errors.hpp"

namespace i2i {

struct Interaction {
  std::string user;
  std::string item;
  double rating = 0.0;
  std::int64_t timestamp = 0;
};

using InteractionLog = std::vector<Interaction>;

enum class ChannelKind { numeric, multi_hot, dense };

inline std::string to_string(ChannelKind kind) {
  switch (kind) {
  case ChannelKind::numeric:
    return "numeric";
  case ChannelKind::multi_hot:
    return "multi-hot";
  case ChannelKind::dense:
    return "dense";
  }
  return "unknown";
}

inline ChannelKind parse_channel_kind(std::string_view s) {
  if (s == "numeric")
    return ChannelKind::numeric;
  if (s == "multi-hot" || s == "multi_hot")
    return ChannelKind::multi_hot;
  if (s == "dense")
    return ChannelKind::dense;
  throw ParseError("unknown channel kind '" + std::string(s) + "'");
}

/// One meta-data channel. Row i of `values` belongs to catalog item i.
struct MetaChannel {
  std::string name;
  ChannelKind kind = ChannelKind::numeric;
  Eigen::Index dim = 0;
  Eigen::MatrixXd values;
};

struct ItemCatalog {
  std::vector<std::string> items;
  std::vector<MetaChannel> channels;
  std::unordered_map<std::string, std::size_t> id_index;

  std::size_t size() const { return items.size(); }
  std::size_t num_channels() const { return channels.size(); }

  std::size_t index_of(const std::string &id) const {
    auto it = id_index.find(id);
    if (it == id_index.end())
      throw DataError("unknown item id '" + id + "'");
    return it->second;
  }

  std::optional<std::size_t> find(const std::string &id) const {
    auto it = id_index.find(id);
    if (it == id_index.end())
      return std::nullopt;
    return it->second;
  }
};

inline ItemCatalog make_catalog(std::vector<std::string> item_ids) {
  ItemCatalog catalog;
  catalog.items = std::move(item_ids);
  for (std::size_t i = 0; i < catalog.items.size(); ++i) {
    if (!catalog.id_index.emplace(catalog.items[i], i).second)
      throw DataError("duplicate item id '" + catalog.items[i] + "'");
  }
  return catalog;
}

/// Adds a channel. Items missing from `values` get the zero vector; ids not in
/// the catalog are ignored.
inline void add_channel(ItemCatalog &catalog, std::string name,
                        ChannelKind kind, Eigen::Index dim,
                        const std::unordered_map<std::string, Eigen::VectorXd> &values) {
  if (dim <= 0)
    throw DimensionError("channel '" + name + "' has non-positive dim");
  MetaChannel channel{std::move(name), kind, dim,
                      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(catalog.size()), dim)};
  for (const auto &[id, vec] : values) {
    if (vec.size() != dim)
      throw DimensionError("channel '" + channel.name + "': item '" + id +
                           "' has length " + std::to_string(vec.size()) +
                           ", expected " + std::to_string(dim));
    if (kind == ChannelKind::multi_hot) {
      for (Eigen::Index j = 0; j < dim; ++j)
        if (vec[j] != 0.0 && vec[j] != 1.0)
          throw DataError("channel '" + channel.name + "': item '" + id +
                          "' is not a 0/1 vector");
    }
    if (!vec.allFinite())
      throw DataError("channel '" + channel.name + "': non-finite entry for item '" + id + "'");
    auto idx = catalog.find(id);
    if (idx)
      channel.values.row(static_cast<Eigen::Index>(*idx)) = vec.transpose();
  }
  catalog.channels.push_back(std::move(channel));
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

template <typename T> bool parse_number(std::string_view s, T &out) {
  s = trim(s);
  if (s.empty())
    return false;
  if (s.front() == '+')
    s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

} // namespace detail

/// Reads `user,item,rating,timestamp` rows. Row order is preserved. The
/// MovieLens header `userId,movieId,rating,timestamp` is accepted as well.
inline InteractionLog load_interactions(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open interactions file " + path.string());
  InteractionLog log;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = detail::trim(line);
    if (view.empty())
      continue;
    if (!header_seen) {
      header_seen = true;
      if (view != "user,item,rating,timestamp" && view != "userId,movieId,rating,timestamp")
        throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": expected header 'user,item,rating,timestamp'",
                         line_no);
      continue;
    }
    auto fields = detail::split_csv(view);
    auto fail = [&](const std::string &why) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + why, line_no);
    };
    if (fields.size() != 4)
      fail("expected 4 fields, got " + std::to_string(fields.size()));
    Interaction row;
    row.user = std::string(detail::trim(fields[0]));
    row.item = std::string(detail::trim(fields[1]));
    if (row.user.empty() || row.item.empty())
      fail("empty user or item id");
    if (!detail::parse_number(fields[2], row.rating) || !std::isfinite(row.rating))
      fail("rating is not a finite number");
    if (!detail::parse_number(fields[3], row.timestamp))
      fail("timestamp is not an integer");
    if (row.timestamp < 0)
      fail("negative timestamp");
    log.push_back(std::move(row));
  }
  if (log.empty())
    throw DataError("interaction log " + path.string() + " is empty");
  return log;
}

inline void save_interactions(const std::filesystem::path &path, const InteractionLog &log) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot write " + path.string());
  out << "user,item,rating,timestamp\n";
  char buf[64];
  for (const auto &row : log) {
    auto res = std::to_chars(buf, buf + sizeof(buf), row.rating);
    out << row.user << ',' << row.item << ',' << std::string_view(buf, res.ptr - buf) << ','
        << row.timestamp << '\n';
  }
}

struct ChannelSpec {
  std::string name;
  ChannelKind kind;
  Eigen::Index dim;
  std::filesystem::path path;
};

/// Manifest rows `name,kind,dim,path`; paths resolve relative to the manifest.
inline std::vector<ChannelSpec> load_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open channel manifest " + path.string());
  std::vector<ChannelSpec> specs;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    auto view = detail::trim(line);
    if (view.empty())
      continue;
    if (!header_seen) {
      header_seen = true;
      if (view != "name,kind,dim,path")
        throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": expected header 'name,kind,dim,path'",
                         line_no);
      continue;
    }
    auto fields = detail::split_csv(view);
    if (fields.size() != 4)
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 4 fields",
                       line_no);
    ChannelSpec spec;
    spec.name = std::string(detail::trim(fields[0]));
    try {
      spec.kind = parse_channel_kind(detail::trim(fields[1]));
    } catch (const ParseError &e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
    long dim = 0;
    if (!detail::parse_number(fields[2], dim) || dim <= 0)
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad dim", line_no);
    spec.dim = dim;
    std::filesystem::path p{std::string(detail::trim(fields[3]))};
    spec.path = p.is_absolute() ? p : path.parent_path() / p;
    specs.push_back(std::move(spec));
  }
  return specs;
}

inline std::unordered_map<std::string, Eigen::VectorXd>
load_channel_values(const ChannelSpec &spec, std::size_t manifest_row) {
  std::ifstream in(spec.path);
  if (!in)
    throw DataError("manifest row " + std::to_string(manifest_row) + " (" + spec.name +
                    "): cannot open channel file " + spec.path.string());
  std::unordered_map<std::string, Eigen::VectorXd> values;
  std::string line;
  std::size_t line_no = 0;
  const auto where = [&] { return spec.path.string() + ":" + std::to_string(line_no) + ": "; };
  if (spec.kind == ChannelKind::dense) {
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::trim(line).empty())
        continue;
      nlohmann::json row;
      try {
        row = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception &e) {
        throw ParseError(where() + e.what(), line_no);
      }
      if (!row.contains("item") || !row.contains("vec") || !row["vec"].is_array())
        throw ParseError(where() + "expected {item, vec:[...]}", line_no);
      std::string id = row["item"].is_string() ? row["item"].get<std::string>()
                                               : row["item"].dump();
      const auto &vec = row["vec"];
      if (static_cast<Eigen::Index>(vec.size()) != spec.dim)
        throw DimensionError(where() + "vector length " + std::to_string(vec.size()) +
                             " != dim " + std::to_string(spec.dim));
      Eigen::VectorXd v(spec.dim);
      for (Eigen::Index j = 0; j < spec.dim; ++j) {
        if (!vec[static_cast<std::size_t>(j)].is_number())
          throw ParseError(where() + "non-numeric vector entry", line_no);
        v[j] = vec[static_cast<std::size_t>(j)].get<double>();
      }
      values[id] = std::move(v);
    }
    return values;
  }
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    auto view = detail::trim(line);
    if (view.empty())
      continue;
    if (!header_seen) {
      header_seen = true;
      if (view.substr(0, 4) == "item")
        continue;
    }
    auto fields = detail::split_csv(view);
    if (static_cast<Eigen::Index>(fields.size()) != spec.dim + 1)
      throw DimensionError(where() + "expected " + std::to_string(spec.dim + 1) + " fields");
    Eigen::VectorXd v(spec.dim);
    for (Eigen::Index j = 0; j < spec.dim; ++j)
      if (!detail::parse_number(fields[static_cast<std::size_t>(j) + 1], v[j]))
        throw ParseError(where() + "non-numeric value", line_no);
    values[std::string(detail::trim(fields[0]))] = std::move(v);
  }
  return values;
}

/// Catalog items are the log's items in order of first appearance, followed by
/// channel-only items in manifest/file order.
inline ItemCatalog load_catalog(const std::filesystem::path &manifest, const InteractionLog &log) {
  auto specs = load_manifest(manifest);
  std::vector<std::unordered_map<std::string, Eigen::VectorXd>> loaded;
  loaded.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i)
    loaded.push_back(load_channel_values(specs[i], i + 1));

  std::vector<std::string> ids;
  std::unordered_set<std::string> seen;
  for (const auto &row : log)
    if (seen.insert(row.item).second)
      ids.push_back(row.item);
  for (const auto &values : loaded) {
    std::vector<std::string> extra;
    for (const auto &[id, _] : values)
      if (!seen.count(id))
        extra.push_back(id);
    std::sort(extra.begin(), extra.end());
    for (auto &id : extra) {
      seen.insert(id);
      ids.push_back(std::move(id));
    }
  }
  ItemCatalog catalog = make_catalog(std::move(ids));
  for (std::size_t i = 0; i < specs.size(); ++i)
    add_channel(catalog, specs[i].name, specs[i].kind, specs[i].dim, loaded[i]);
  return catalog;
}

struct TimeSplit {
  std::int64_t cutoff = 0;
  std::vector<std::size_t> train_items;
  std::vector<std::size_t> test_items;
};

/// Earliest interaction time per catalog item; items never interacted with
/// get the int64 maximum.
inline std::vector<std::int64_t> first_interaction_times(const InteractionLog &log,
                                                         const ItemCatalog &catalog) {
  std::vector<std::int64_t> first(catalog.size(), std::numeric_limits<std::int64_t>::max());
  for (const auto &row : log) {
    auto idx = catalog.index_of(row.item);
    first[idx] = std::min(first[idx], row.timestamp);
  }
  return first;
}

/// Items whose first interaction is after the cutoff form the test set. The
/// cutoff is the smallest first-interaction time leaving at most
/// floor(fraction * n) items (at least one) after it.
inline TimeSplit split_by_time(const InteractionLog &log, const ItemCatalog &catalog,
                               double test_fraction) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw DomainError("test_fraction must lie in (0, 1)");
  auto first = first_interaction_times(log, catalog);
  std::vector<std::int64_t> sorted = first;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  std::size_t cap = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n) + 1e-9));
  cap = std::max<std::size_t>(cap, 1);

  std::optional<std::int64_t> cutoff;
  for (std::size_t j = 0; j < n; ++j) {
    // number of items strictly after sorted[j]
    auto after = static_cast<std::size_t>(
        sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), sorted[j]));
    if (after <= cap) {
      if (after == 0)
        break;
      cutoff = sorted[j];
      break;
    }
  }
  if (!cutoff)
    throw DataError("degenerate split: no cutoff leaves between 1 and " + std::to_string(cap) +
                    " test items (first-interaction times are not separable)");
  TimeSplit split;
  split.cutoff = *cutoff;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (first[i] > *cutoff)
      split.test_items.push_back(i);
    else
      split.train_items.push_back(i);
  }
  return split;
}

struct PairExample {
  std::size_t a = 0;
  std::size_t b = 0;
  int label = 0; ///< 0 similar, 1 dissimilar
};

struct AnnotationConfig {
  int window = 5;           ///< forward window length
  int samples = 4;          ///< positives (and negatives) per anchor
  int anchors_per_user = 1; ///< anchors drawn per eligible user
  std::uint64_t seed = 0;
};

struct AnnotationResult {
  std::vector<PairExample> pairs;
  std::size_t skipped_users = 0;
};

struct TimedItem {
  std::int64_t timestamp;
  std::size_t item;
  double rating;
};

/// Per-user chronological histories (stable on equal timestamps), keyed by
/// user id in lexical order.
inline std::map<std::string, std::vector<TimedItem>> user_histories(const InteractionLog &log,
                                                                    const ItemCatalog &catalog) {
  std::map<std::string, std::vector<TimedItem>> histories;
  for (const auto &row : log)
    histories[row.user].push_back({row.timestamp, catalog.index_of(row.item), row.rating});
  for (auto &[_, h] : histories)
    std::stable_sort(h.begin(), h.end(),
                     [](const TimedItem &x, const TimedItem &y) { return x.timestamp < y.timestamp; });
  return histories;
}

/// Noisy similar/dissimilar pairs: for each user with at least two train
/// interactions, an anchor is drawn, `samples` positives are drawn with
/// replacement from its forward window and `samples` negatives uniformly from
/// the train items other than the anchor.
inline AnnotationResult generate_pair_annotations(const InteractionLog &log,
                                                  const ItemCatalog &catalog,
                                                  const std::vector<std::size_t> &train_items,
                                                  const AnnotationConfig &config) {
  if (config.window < 1 || config.samples < 1 || config.anchors_per_user < 1)
    throw ConfigError("annotation window, samples and anchors_per_user must be >= 1");
  if (train_items.size() < 2)
    throw DataError("need at least two train items to sample negatives");
  std::vector<char> is_train(catalog.size(), 0);
  for (auto i : train_items)
    is_train[i] = 1;

  std::mt19937_64 rng(config.seed);
  AnnotationResult result;
  for (const auto &[user, history] : user_histories(log, catalog)) {
    std::vector<std::size_t> seq;
    for (const auto &e : history)
      if (is_train[e.item])
        seq.push_back(e.item);
    if (seq.size() < 2) {
      ++result.skipped_users;
      continue;
    }
    for (int rep = 0; rep < config.anchors_per_user; ++rep) {
      std::uniform_int_distribution<std::size_t> anchor_dist(0, seq.size() - 2);
      const std::size_t i = anchor_dist(rng);
      const std::size_t last = std::min(seq.size() - 1, i + static_cast<std::size_t>(config.window));
      std::uniform_int_distribution<std::size_t> pos_dist(i + 1, last);
      const std::size_t anchor = seq[i];
      for (int s = 0; s < config.samples; ++s) {
        std::size_t b = seq[pos_dist(rng)];
        if (b != anchor)
          result.pairs.push_back({anchor, b, 0});
      }
      std::uniform_int_distribution<std::size_t> neg_dist(0, train_items.size() - 1);
      for (int s = 0; s < config.samples; ++s) {
        std::size_t b = anchor;
        while (b == anchor)
          b = train_items[neg_dist(rng)];
        result.pairs.push_back({anchor, b, 1});
      }
    }
  }
  return result;
}

/// Mean rating per listed item, then mean-centred across the list.
inline Eigen::VectorXd surrogate_targets(const InteractionLog &log, const ItemCatalog &catalog,
                                         const std::vector<std::size_t> &items) {
  std::vector<double> sum(catalog.size(), 0.0);
  std::vector<std::size_t> count(catalog.size(), 0);
  for (const auto &row : log) {
    auto idx = catalog.index_of(row.item);
    sum[idx] += row.rating;
    ++count[idx];
  }
  Eigen::VectorXd r(static_cast<Eigen::Index>(items.size()));
  for (std::size_t k = 0; k < items.size(); ++k) {
    if (count[items[k]] == 0)
      throw DataError("missing target: item '" + catalog.items[items[k]] + "' has no ratings");
    r[static_cast<Eigen::Index>(k)] = sum[items[k]] / static_cast<double>(count[items[k]]);
  }
  if (r.size() > 0)
    r.array() -= r.mean();
  return r;
}

/// G(x) per catalog index, sorted. Symmetric by construction.
using GroundTruth = std::vector<std::vector<std::size_t>>;

namespace detail {
inline void add_cointeractions(const std::vector<TimedItem> &history, std::int64_t horizon,
                               std::vector<std::set<std::size_t>> &sets) {
  std::size_t lo = 0;
  for (std::size_t j = 0; j < history.size(); ++j) {
    while (history[j].timestamp - history[lo].timestamp > horizon)
      ++lo;
    for (std::size_t i = lo; i < j; ++i) {
      if (history[i].item == history[j].item)
        continue;
      sets[history[i].item].insert(history[j].item);
      sets[history[j].item].insert(history[i].item);
    }
  }
}
} // namespace detail

/// x' is in G(x) when one user touched both within `horizon` seconds. With
/// `user` set, only that user's events count.
inline GroundTruth build_ground_truth(const InteractionLog &log, const ItemCatalog &catalog,
                                      std::int64_t horizon,
                                      const std::optional<std::string> &user = std::nullopt) {
  if (horizon <= 0)
    throw DomainError("ground-truth horizon must be positive");
  std::vector<std::set<std::size_t>> sets(catalog.size());
  auto histories = user_histories(log, catalog);
  if (user) {
    auto it = histories.find(*user);
    if (it != histories.end())
      detail::add_cointeractions(it->second, horizon, sets);
  } else {
    for (const auto &[_, h] : histories)
      detail::add_cointeractions(h, horizon, sets);
  }
  GroundTruth g(catalog.size());
  for (std::size_t i = 0; i < sets.size(); ++i)
    g[i].assign(sets[i].begin(), sets[i].end());
  return g;
}

constexpr std::int64_t kDefaultHorizonSeconds = 30LL * 24 * 3600;

} // namespace i2i
