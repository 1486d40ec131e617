#pragma once

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsqil/env.hpp"
#include "dsqil/errors.hpp"
#include "dsqil/rng.hpp"

namespace dsqil {

enum class Source { Demo, Sample };

/// (s, a, s', done) plus provenance. `trajectory` numbers the episode the
/// transition came from within its buffer.
struct Transition {
  Observation state;
  ActionValue action;
  Observation next_state;
  bool done = false;
  Source source = Source::Sample;
  int trajectory = 0;

  bool operator==(const Transition& o) const {
    return state == o.state && action == o.action && next_state == o.next_state && done == o.done &&
           source == o.source && trajectory == o.trajectory;
  }
};

inline void validate_transition(const Transition& t, const EnvSpec& spec) {
  if (t.state.size() != spec.obs_dim || t.next_state.size() != spec.obs_dim) {
    throw DimensionError("transition observation size mismatch (expected " + std::to_string(spec.obs_dim) + ")");
  }
  (void)encode_action(t.action, spec);
}

/// Bounded FIFO store; the oldest transition is evicted when full.
class ReplayBuffer {
 public:
  static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

  ReplayBuffer(EnvSpec spec, std::size_t capacity = kUnbounded) : spec_(std::move(spec)), capacity_(capacity) {
    if (capacity_ == 0) throw PreconditionError("replay buffer capacity must be positive");
  }

  void push(Transition t) {
    validate_transition(t, spec_);
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(t));
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const EnvSpec& spec() const { return spec_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  bool operator==(const ReplayBuffer& o) const { return spec_ == o.spec_ && items_ == o.items_; }

 private:
  EnvSpec spec_;
  std::size_t capacity_;
  std::deque<Transition> items_;
};

/// m transitions drawn uniformly with replacement.
inline std::vector<Transition> sample_minibatch(const ReplayBuffer& buffer, std::size_t m, Rng& rng) {
  if (buffer.empty()) throw PreconditionError("sample_minibatch: buffer is empty");
  if (m == 0) throw PreconditionError("sample_minibatch: m must be positive");
  std::vector<Transition> batch;
  batch.reserve(m);
  for (std::size_t i = 0; i < m; ++i) batch.push_back(buffer[rng.index(buffer.size())]);
  return batch;
}

inline std::size_t count_trajectories(const ReplayBuffer& buffer) {
  std::size_t count = 0;
  std::optional<int> last;
  for (const auto& t : buffer) {
    if (!last || *last != t.trajectory) ++count;
    last = t.trajectory;
  }
  return count;
}

/// The transitions of the first `k` trajectories, in order.
inline ReplayBuffer prefix_trajectories(const ReplayBuffer& buffer, std::size_t k) {
  ReplayBuffer out(buffer.spec(), buffer.capacity());
  std::size_t seen = 0;
  std::optional<int> last;
  for (const auto& t : buffer) {
    if (!last || *last != t.trajectory) ++seen;
    if (seen > k) break;
    last = t.trajectory;
    out.push(t);
  }
  if (seen < k) {
    throw PreconditionError("dataset holds " + std::to_string(seen) + " trajectories, " + std::to_string(k) +
                            " requested");
  }
  return out;
}

// ---- dataset file: JSON Lines, header line then one transition per line ----

namespace detail {

inline void append_number(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

inline void append_vector(std::string& out, const Eigen::VectorXd& v) {
  out += '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_number(out, v[i]);
  }
  out += ']';
}

inline Eigen::VectorXd parse_vector(const nlohmann::json& j, int expected, std::size_t record, const char* field) {
  if (!j.is_array()) throw ParseError(record, std::string(field) + " is not an array");
  if (static_cast<int>(j.size()) != expected) {
    throw ParseError(record, std::string(field) + " has " + std::to_string(j.size()) + " entries, expected " +
                                 std::to_string(expected));
  }
  Eigen::VectorXd v(expected);
  for (int i = 0; i < expected; ++i) {
    if (!j[static_cast<std::size_t>(i)].is_number()) throw ParseError(record, std::string(field) + " has a non-number");
    v[i] = j[static_cast<std::size_t>(i)].get<double>();
  }
  return v;
}

}  // namespace detail

inline constexpr const char* kDatasetFormat = "dsqil-demos";

inline std::string transition_to_line(const Transition& t) {
  std::string line = "{\"traj\":" + std::to_string(t.trajectory) + ",\"state\":";
  detail::append_vector(line, t.state);
  line += ",\"action\":";
  if (t.action.is_discrete()) {
    line += std::to_string(t.action.index());
  } else {
    detail::append_vector(line, t.action.vector());
  }
  line += ",\"next_state\":";
  detail::append_vector(line, t.next_state);
  line += ",\"done\":";
  line += t.done ? "true" : "false";
  line += ",\"source\":";
  line += t.source == Source::Demo ? "\"demo\"" : "\"sample\"";
  line += '}';
  return line;
}

inline void save_dataset(const ReplayBuffer& buffer, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PreconditionError("cannot open " + path.string() + " for writing");
  const nlohmann::json header = {{"format", kDatasetFormat},
                                 {"version", 1},
                                 {"env", buffer.spec().to_json()},
                                 {"transitions", buffer.size()},
                                 {"trajectories", count_trajectories(buffer)}};
  out << header.dump() << '\n';
  for (const auto& t : buffer) out << transition_to_line(t) << '\n';
}

/// Parses a dataset. ParseError::record() is the zero-based transition index
/// of the offending line (the header is reported as record 0 of the header).
inline ReplayBuffer load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreconditionError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(0, "missing header line");
  EnvSpec spec;
  std::optional<std::size_t> declared;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != kDatasetFormat) throw ParseError(0, "header: unknown format");
    spec = EnvSpec::from_json(header.at("env"));
    if (header.contains("transitions")) declared = header["transitions"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("header: ") + e.what());
  } catch (const PreconditionError& e) {
    throw ParseError(0, std::string("header: ") + e.what());
  }
  ReplayBuffer buffer(spec);
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(record, std::string("malformed transition: ") + e.what());
    }
    try {
      Transition t{detail::parse_vector(j.at("state"), spec.obs_dim, record, "state"),
                   ActionValue::discrete(0),
                   detail::parse_vector(j.at("next_state"), spec.obs_dim, record, "next_state"),
                   j.at("done").get<bool>(),
                   j.at("source").get<std::string>() == "demo" ? Source::Demo : Source::Sample,
                   j.at("traj").get<int>()};
      const auto& action = j.at("action");
      if (spec.action_kind == ActionKind::Discrete) {
        if (!action.is_number_integer()) throw ParseError(record, "discrete action must be an integer");
        t.action = ActionValue::discrete(action.get<int>());
      } else {
        t.action = ActionValue::continuous(detail::parse_vector(action, spec.action_dim, record, "action"));
      }
      validate_transition(t, spec);
      buffer.push(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(record, std::string("incomplete transition: ") + e.what());
    } catch (const DimensionError& e) {
      throw ParseError(record, e.what());
    }
    ++record;
  }
  if (declared && *declared != record) {
    throw ParseError(record, "truncated dataset: header declares " + std::to_string(*declared) + " transitions");
  }
  return buffer;
}

}  // namespace dsqil
