#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <boost/math/distributions/chi_squared.hpp>

#include "dsqil/env.hpp"
#include "dsqil/replay.hpp"
#include "test_support.hpp"

using namespace dsqil;

namespace {

EnvSpec grid_spec() { return GridWorld(3, 20, 0).spec(); }

Transition grid_transition(int cell, int action, int traj = 0, bool done = false) {
  GridWorld env(3, 20, 0);
  const Observation s = env.encode(env.cell_at(cell));
  const Observation s2 = done ? env.absorbing_observation() : env.encode(env.transition(env.cell_at(cell), action));
  return {s, ActionValue::discrete(action), s2, done, Source::Demo, traj};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dsqil_replay_" + name);
}

}  // namespace

TEST(ReplayBuffer, PushGrowsSize) {
  ReplayBuffer b(grid_spec());
  EXPECT_TRUE(b.empty());
  b.push(grid_transition(0, 1));
  EXPECT_EQ(b.size(), 1u);
}

TEST(ReplayBuffer, FifoEviction) {
  ReplayBuffer b(grid_spec(), 2);
  b.push(grid_transition(0, 1));
  b.push(grid_transition(1, 1));
  b.push(grid_transition(2, 1));
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0], grid_transition(1, 1));
  EXPECT_EQ(b[1], grid_transition(2, 1));
}

TEST(ReplayBuffer, LargeCapacityKeepsEverything) {
  ReplayBuffer b(grid_spec(), 1'000'000);
  for (int i = 0; i < 10'000; ++i) b.push(grid_transition(i % 8, i % 4));
  EXPECT_EQ(b.size(), 10'000u);
}

TEST(ReplayBuffer, RejectsDimensionMismatch) {
  ReplayBuffer b(grid_spec());
  Transition t = grid_transition(0, 1);
  t.state = Eigen::VectorXd::Zero(3);
  EXPECT_THROW(b.push(t), DimensionError);
  t = grid_transition(0, 1);
  t.action = ActionValue::discrete(7);
  EXPECT_THROW(b.push(t), DimensionError);
  EXPECT_THROW(ReplayBuffer(grid_spec(), 0), PreconditionError);
}

TEST(Minibatch, SingleElementRepeated) {
  ReplayBuffer b(grid_spec());
  b.push(grid_transition(3, 2));
  Rng rng(0);
  const auto batch = sample_minibatch(b, 5, rng);
  ASSERT_EQ(batch.size(), 5u);
  for (const auto& t : batch) EXPECT_EQ(t, b[0]);
}

TEST(Minibatch, EmptyBufferRejected) {
  ReplayBuffer b(grid_spec());
  Rng rng(0);
  EXPECT_THROW(sample_minibatch(b, 1, rng), PreconditionError);
}

TEST(Minibatch, UniformChiSquare) {
  ReplayBuffer b(grid_spec());
  const int n = 8;
  for (int i = 0; i < n; ++i) b.push(grid_transition(i, 0, i));
  Rng rng(2024);
  std::vector<double> counts(n, 0.0);
  const int draws = 100'000;
  for (int done = 0; done < draws; done += n) {
    for (const auto& t : sample_minibatch(b, n, rng)) counts[static_cast<std::size_t>(t.trajectory)] += 1.0;
  }
  const double expected = static_cast<double>(draws) / n;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(n - 1);
  const double p = boost::math::cdf(boost::math::complement(dist, chi2));
  EXPECT_GT(p, 0.001) << "chi2=" << chi2;
}

TEST(Minibatch, FixedSeedIsReproducible) {
  ReplayBuffer b(grid_spec());
  for (int i = 0; i < 8; ++i) b.push(grid_transition(i, i % 4, i));
  Rng a(5), c(5);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(sample_minibatch(b, 16, a), sample_minibatch(b, 16, c));
}

TEST(Trajectories, CountAndPrefix) {
  ReplayBuffer b(grid_spec());
  b.push(grid_transition(0, 1, 0));
  b.push(grid_transition(3, 1, 0, true));
  b.push(grid_transition(0, 3, 1));
  b.push(grid_transition(1, 3, 1, true));
  b.push(grid_transition(0, 1, 2, true));
  EXPECT_EQ(count_trajectories(b), 3u);
  const ReplayBuffer two = prefix_trajectories(b, 2);
  EXPECT_EQ(two.size(), 4u);
  EXPECT_EQ(count_trajectories(two), 2u);
  EXPECT_THROW(prefix_trajectories(b, 4), PreconditionError);
}

TEST(Dataset, EmptyRoundTrip) {
  const auto path = temp_path("empty.jsonl");
  save_dataset(ReplayBuffer(grid_spec()), path);
  const ReplayBuffer back = load_dataset(path);
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.spec(), grid_spec());
  std::filesystem::remove(path);
}

TEST(Dataset, GridworldDemoRoundTrip) {
  GridWorld env(5, 50, 0);
  const auto vi = value_iteration(env, 0.99);
  const Policy expert = gridworld_expert_policy(env, vi);
  ReplayBuffer b(env.spec());
  for (int traj = 0; traj < 2; ++traj) {
    Observation o = env.reset(StartMode::Fixed);
    while (true) {
      const ActionValue a = expert(o);
      const StepResult r = env.step(a);
      b.push({o, a, r.next_obs, r.done, Source::Demo, traj});
      o = r.next_obs;
      if (r.done) break;
    }
  }
  const auto path = temp_path("grid.jsonl");
  save_dataset(b, path);
  EXPECT_EQ(load_dataset(path), b);
  std::filesystem::remove(path);
}

TEST(Dataset, ContinuousRoundTripIsValueExact) {
  PointMass env(2, 10, 0);
  ReplayBuffer b(env.spec());
  Rng rng(7);
  Observation o = env.reset(StartMode::Fixed);
  for (int t = 0; t < 10; ++t) {
    const ActionValue a = ActionValue::continuous(fixtures::random_vector(rng, 2));
    const StepResult r = env.step(a);
    b.push({o, a, r.next_obs, false, t % 2 ? Source::Sample : Source::Demo, 0});
    o = r.next_obs;
  }
  const auto path = temp_path("pm.jsonl");
  save_dataset(b, path);
  EXPECT_EQ(load_dataset(path), b);
  std::filesystem::remove(path);
}

TEST(Dataset, TruncatedRecordNamesIndex) {
  ReplayBuffer b(grid_spec());
  for (int i = 0; i < 4; ++i) b.push(grid_transition(i, 1, 0));
  const auto path = temp_path("trunc.jsonl");
  save_dataset(b, path);
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  in.close();
  ASSERT_EQ(lines.size(), 5u);
  {
    std::ofstream out(path, std::ios::trunc);
    for (int i = 0; i < 3; ++i) out << lines[static_cast<std::size_t>(i)] << '\n';
    out << lines[3].substr(0, lines[3].size() / 2) << '\n';
  }
  try {
    load_dataset(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.record(), 2u);
    EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos);
  }
  {
    std::ofstream out(path, std::ios::trunc);
    for (int i = 0; i < 4; ++i) out << lines[static_cast<std::size_t>(i)] << '\n';
  }
  try {
    load_dataset(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.record(), 3u);
  }
  std::filesystem::remove(path);
}

TEST(Dataset, WrongLengthStateRejected) {
  ReplayBuffer b(grid_spec());
  b.push(grid_transition(0, 1));
  const auto path = temp_path("badlen.jsonl");
  save_dataset(b, path);
  std::ifstream in(path);
  std::string header, rec;
  std::getline(in, header);
  std::getline(in, rec);
  in.close();
  const auto pos = rec.find("\"state\":[");
  rec.insert(pos + 9, "0,");
  std::ofstream(path, std::ios::trunc) << header << '\n' << rec << '\n';
  EXPECT_THROW(load_dataset(path), ParseError);
  std::filesystem::remove(path);
}
