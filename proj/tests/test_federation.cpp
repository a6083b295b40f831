#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "test_support.hpp"

using namespace fedsparse;
using namespace fedsparse::testing;

namespace {

DetectorConfig small_detector() {
  DetectorConfig cfg;
  cfg.input_height = cfg.input_width = 16;
  cfg.channel_widths = {4, 6, 8};
  cfg.grid_size = 2;
  return cfg;
}

SceneSpec small_scene(std::uint64_t seed) {
  SceneSpec s;
  s.image_height = s.image_width = 16;
  s.grid_size = 2;
  s.max_objects = 2;
  s.seed = seed;
  return s;
}

std::shared_ptr<const std::vector<TrainingExample>> small_data(std::size_t count, std::uint64_t seed = 5) {
  return std::make_shared<const std::vector<TrainingExample>>(make_examples(generate(small_scene(seed), count), small_detector()));
}

ClientUpdate update_with_value(double v, const ModelParams& shape_of) {
  ClientUpdate u;
  u.params = shape_of;
  for (Tensor* t : u.params.all_tensors()) std::fill(t->data().begin(), t->data().end(), v);
  return u;
}

std::vector<ClientUpdate> random_updates(std::size_t k, std::uint64_t seed) {
  const ModelParams base = build_model(small_detector(), 0);
  std::mt19937_64 rng(seed);
  std::vector<ClientUpdate> out;
  for (std::size_t i = 0; i < k; ++i) {
    ClientUpdate u;
    u.client_id = i;
    u.params = base;
    for (Tensor* t : u.params.all_tensors()) *t = random_tensor(t->shape(), rng);
    out.push_back(std::move(u));
  }
  return out;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  const auto ta = a.all_tensors(), tb = b.all_tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!ta[i]->same_values(*tb[i])) return false;
  }
  return true;
}

std::vector<ClientState> make_clients(const std::shared_ptr<const std::vector<TrainingExample>>& data,
                                      const std::vector<double>& rates, std::size_t epochs = 1) {
  std::mt19937_64 rng(17);
  const auto parts = partition_dataset(data->size(), rates.size(), rng);
  std::vector<ClientState> out;
  for (std::size_t k = 0; k < rates.size(); ++k) {
    ClientState c;
    c.client_id = k;
    c.sparsity = SparsityRate(rates[k]);
    c.data = data;
    c.indices = parts[k];
    c.local_epochs = epochs;
    c.batch_size = 4;
    c.learning_rate = 0.05;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

TEST(FedWegWeights, InverseSparsityThirteenths) {
  const std::vector<double> rates{0.4, 0.3, 0.2};
  const auto w = fedweg_weights(rates);
  EXPECT_NEAR(w[0], 3.0 / 13.0, 1e-12);
  EXPECT_NEAR(w[1], 4.0 / 13.0, 1e-12);
  EXPECT_NEAR(w[2], 6.0 / 13.0, 1e-12);
  EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-12);
  EXPECT_THROW(fedweg_weights(std::vector<double>{0.4, 1.0}), std::invalid_argument);
  EXPECT_THROW(fedweg_weights(std::vector<double>{}), std::invalid_argument);
}

TEST(FedAvgWeights, ProportionalToSamples) {
  const std::vector<std::size_t> n{1, 2, 3};
  const auto w = fedavg_weights(n);
  EXPECT_NEAR(w[2], 0.5, 1e-15);
  EXPECT_THROW(fedavg_weights(std::vector<std::size_t>{1, 0}), std::invalid_argument);
}

TEST(FedAvgAggregate, SingleClientIsExact) {
  const auto ups = random_updates(1, 3);
  const std::vector<std::size_t> n{7};
  EXPECT_TRUE(bitwise_equal(fedavg_aggregate(ups, n), ups[0].params));
}

TEST(FedAvgAggregate, MidpointOfZeroAndTwo) {
  const ModelParams base = build_model(small_detector(), 0);
  const std::vector<ClientUpdate> ups{update_with_value(0.0, base), update_with_value(2.0, base)};
  const std::vector<std::size_t> n{5, 5};
  const ModelParams avg = fedavg_aggregate(ups, n);
  for (const Tensor* t : avg.all_tensors())
    for (double v : t->data()) ASSERT_EQ(v, 1.0);
}

TEST(FedAvgAggregate, MatchesScalarLoopOracle) {
  const auto ups = random_updates(3, 9);
  const std::vector<std::size_t> n{1, 2, 3};
  const ModelParams got = fedavg_aggregate(ups, n);
  const auto out = got.all_tensors();
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[i]->size(); ++j) {
      double want = 0.0;
      for (std::size_t k = 0; k < 3; ++k) want += static_cast<double>(n[k]) / 6.0 * (*ups[k].params.all_tensors()[i])[j];
      ASSERT_NEAR((*out[i])[j], want, 1e-12);
    }
}

TEST(FedWegAggregate, MatchesScalarLoopOracle) {
  const auto ups = random_updates(3, 10);
  const std::vector<double> s{0.4, 0.3, 0.2};
  const ModelParams got = fedweg_aggregate(ups, s);
  const auto out = got.all_tensors();
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[i]->size(); ++j) {
      const double want = 3.0 / 13.0 * (*ups[0].params.all_tensors()[i])[j] + 4.0 / 13.0 * (*ups[1].params.all_tensors()[i])[j] +
                          6.0 / 13.0 * (*ups[2].params.all_tensors()[i])[j];
      ASSERT_NEAR((*out[i])[j], want, 1e-12);
    }
}

TEST(FedWegAggregate, EqualRatesGiveBitwiseUnweightedMean) {
  const auto ups = random_updates(3, 11);
  const std::vector<double> s(3, 0.3);
  const std::vector<std::size_t> n(3, 200);
  const ModelParams weg = fedweg_aggregate(ups, s);
  EXPECT_TRUE(bitwise_equal(weg, fedavg_aggregate(ups, n)));
  ModelParams mean = ups[0].params;
  auto dst = mean.all_tensors();
  for (std::size_t i = 0; i < dst.size(); ++i)
    for (std::size_t j = 0; j < dst[i]->size(); ++j) {
      double acc = 0.0;
      for (const auto& u : ups) acc += (*u.params.all_tensors()[i])[j];
      (*dst[i])[j] = acc / 3.0;
    }
  EXPECT_TRUE(bitwise_equal(weg, mean));
}

TEST(FedWegAggregate, PrunedEverywhereStaysZero) {
  auto ups = random_updates(2, 12);
  for (auto& u : ups) (*u.params.trainable()[3])[0] = 0.0;
  const std::vector<double> s{0.2, 0.4};
  EXPECT_EQ((*fedweg_aggregate(ups, s).trainable()[3])[0], 0.0);
}

TEST(Aggregate, ArchitectureMismatchIsShapeError) {
  auto ups = random_updates(2, 1);
  DetectorConfig other = small_detector();
  other.channel_widths = {4, 6, 9};
  ups[1].params = build_model(other, 0);
  const std::vector<std::size_t> n{1, 1};
  EXPECT_THROW(fedavg_aggregate(ups, n), ShapeError);
}

TEST(SampleClients, FullFractionIsAllAscending) {
  const std::vector<std::size_t> reg{2, 0, 1};
  std::mt19937_64 rng(1);
  for (int r = 0; r < 5; ++r) EXPECT_EQ(sample_clients(std::span<const std::size_t>(reg), 1.0, rng), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(SampleClients, PartialFractionIsDistinctAndDeterministic) {
  std::vector<std::size_t> reg(10);
  std::iota(reg.begin(), reg.end(), 0);
  std::mt19937_64 a(5), b(5);
  const auto x = sample_clients(std::span<const std::size_t>(reg), 0.35, a);
  EXPECT_EQ(x.size(), 4u);
  EXPECT_TRUE(std::is_sorted(x.begin(), x.end()));
  EXPECT_EQ(std::set<std::size_t>(x.begin(), x.end()).size(), 4u);
  EXPECT_EQ(sample_clients(std::span<const std::size_t>(reg), 0.35, b), x);
  EXPECT_THROW(sample_clients(std::span<const std::size_t>(reg), 0.0, a), std::invalid_argument);
}

TEST(CommAccounting, FourBytesPerPrunedValueMinusBitmap) {
  EXPECT_EQ(comm_accounting(100, 160, false), 0);
  EXPECT_EQ(comm_accounting(100, 160, true), 400 - 20);
  EXPECT_EQ(comm_accounting(100, 161, true), 400 - 21);
}

TEST(EdgeModelUpdate, PrunesExactlyAndZeroesMaskedValues) {
  const auto data = small_data(24);
  auto clients = make_clients(data, {0.3});
  const ModelParams global = build_model(small_detector(), 1);
  const LocalTrainingOptions opts{1e-3, true, LossConfig{}};
  const ClientUpdate u = edge_model_update(clients[0], global, opts, 99);
  ASSERT_FALSE(u.failed) << u.failure;
  EXPECT_EQ(u.pruned_channels, channels_to_prune(SparsityRate(0.3), 14));
  EXPECT_EQ(u.epoch_losses.size(), 1u);
  const auto ts = u.params.trainable();
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < ts.size(); ++i)
    for (std::size_t j = 0; j < ts[i]->size(); ++j)
      if (u.mask.weight_bits[i][j] == 0) {
        ASSERT_EQ((*ts[i])[j], 0.0);
        ++zeros;
      }
  EXPECT_EQ(u.pruned_weights, zeros);
  EXPECT_EQ(u.total_weights, global.parameter_count());
  // Same seed, same update.
  const ClientUpdate again = edge_model_update(clients[0], global, opts, 99);
  EXPECT_TRUE(bitwise_equal(u.params, again.params));
}

TEST(EdgeModelUpdate, MinimalSparsityDiffersFromDenseByOneChannel) {
  const auto data = small_data(24);
  auto clients = make_clients(data, {0.01});
  const ModelParams global = build_model(small_detector(), 1);
  const ClientUpdate dense = edge_model_update(clients[0], global, LocalTrainingOptions{0.0, false, {}}, 5);
  const ClientUpdate sparse = edge_model_update(clients[0], global, LocalTrainingOptions{0.0, true, {}}, 5);
  ASSERT_EQ(sparse.pruned_channels, 1u);
  const auto d = dense.params.trainable(), s = sparse.params.trainable();
  std::size_t differing = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d[i]->size(); ++j) {
      if (sparse.mask.weight_bits[i][j] == 0) {
        EXPECT_EQ((*s[i])[j], 0.0);
        ++differing;
      } else {
        ASSERT_EQ((*s[i])[j], (*d[i])[j]);
      }
    }
  EXPECT_EQ(differing, sparse.pruned_weights);
}

TEST(EdgeModelUpdate, LocalLossMostlyDecreasesOverFiveEpochs) {
  ExperimentConfig cfg;
  cfg.train_images = 600;
  cfg.test_images = 1;
  const ExperimentData data = prepare_data(cfg);
  const ServerState server = make_server(cfg, data);
  const ClientUpdate u = edge_model_update(server.clients[0], server.global, LocalTrainingOptions{}, 21);
  ASSERT_FALSE(u.failed) << u.failure;
  ASSERT_EQ(u.epoch_losses.size(), 5u);
  std::size_t nonincreasing = 0;
  for (std::size_t e = 1; e < 5; ++e) nonincreasing += u.epoch_losses[e] <= u.epoch_losses[e - 1];
  EXPECT_GE(nonincreasing * 5, 4u * 4) << "epoch losses " << ::testing::PrintToString(u.epoch_losses);
}

TEST(EdgeModelUpdate, RetainedMaskIsAppliedToIncomingModel) {
  const auto data = small_data(24);
  auto clients = make_clients(data, {0.3});
  const ModelParams global = build_model(small_detector(), 1);
  const LocalTrainingOptions opts{1e-3, true, LossConfig{}};
  const ClientUpdate first = edge_model_update(clients[0], global, opts, 1);
  clients[0].retained_mask = first.mask;
  // A masked gamma, beta and filter receive zero gradient, so they stay zero.
  const ClientUpdate second = edge_model_update(clients[0], global, opts, 2);
  for (std::size_t b = 0; b < first.mask.channel_bits.size(); ++b)
    for (std::size_t c = 0; c < first.mask.channel_bits[b].size(); ++c)
      if (first.mask.channel_bits[b][c] == 0) {
        EXPECT_EQ(second.params.blocks[b].bn.gamma[c], 0.0);
        EXPECT_EQ(second.mask.channel_bits[b][c], 0);
      }
}

TEST(EdgeModelUpdate, DenseUpdateHasNoMask) {
  const auto data = small_data(12);
  auto clients = make_clients(data, {0.3});
  const ClientUpdate u = edge_model_update(clients[0], build_model(small_detector(), 1), LocalTrainingOptions{0.0, false, {}}, 3);
  EXPECT_EQ(u.pruned_weights, 0u);
  EXPECT_EQ(u.pruned_channels, 0u);
  EXPECT_EQ(comm_accounting(u, 14), 0);
}

TEST(RunRound, FedAvgIdenticalFullBatchEqualsCentralisedStep) {
  const auto data = small_data(8);
  std::vector<ClientState> clients;
  for (std::size_t k = 0; k < 3; ++k) {
    ClientState c;
    c.client_id = k;
    c.data = data;
    c.indices = {0, 1, 2, 3, 4, 5, 6, 7};
    c.local_epochs = 1;
    c.batch_size = 8;
    c.learning_rate = 0.05;
    clients.push_back(c);
  }
  const ModelParams init = build_model(small_detector(), 4);
  ServerState server(init, clients, 1.0, 7);
  RoundOptions opts;
  opts.method = Method::FedAvg;
  run_round(server, opts);

  ModelParams central = init;
  std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<GridTarget> targets;
  for (std::size_t i : all) targets.push_back((*data)[i].target);
  train_step(central, make_batch(*data, all), targets, LossConfig{}, 0.0, 0.05);
  const auto a = server.global.trainable(), b = central.trainable();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i]->size(); ++j) ASSERT_NEAR((*a[i])[j], (*b[i])[j], 1e-12);
}

TEST(RunRound, ParallelAndSerialAreBitwiseIdentical) {
  const auto data = small_data(30);
  const ModelParams init = build_model(small_detector(), 2);
  RoundOptions opts;
  opts.method = Method::SFedWeg;
  std::vector<TrainingExample> test(data->begin(), data->begin() + 6);
  opts.test_set = &test;
  ServerState par(init, make_clients(data, {0.2, 0.3, 0.4}), 1.0, 8), ser = par;
  std::vector<RoundReport> rp, rs;
  for (int r = 0; r < 2; ++r) {
    opts.parallel = true;
    rp.push_back(run_round(par, opts));
    opts.parallel = false;
    rs.push_back(run_round(ser, opts));
  }
  EXPECT_TRUE(bitwise_equal(par.global, ser.global));
  for (int r = 0; r < 2; ++r) {
    EXPECT_EQ(rp[r].map50, rs[r].map50);
    EXPECT_EQ(rp[r].eval_loss, rs[r].eval_loss);
    EXPECT_EQ(rp[r].bytes_saved_cumulative, rs[r].bytes_saved_cumulative);
  }
  EXPECT_GT(rp[1].bytes_saved_cumulative, rp[0].bytes_saved_cumulative);
}

TEST(RunRound, AccountingMatchesReplayOfUpdates) {
  const auto data = small_data(30);
  ServerState server(build_model(small_detector(), 2), make_clients(data, {0.2, 0.3, 0.4}), 1.0, 8);
  RoundOptions opts;
  opts.method = Method::SFedAvg;
  std::int64_t replay = 0;
  opts.on_update = [&](std::size_t, const ClientUpdate& u) {
    std::int64_t zeros = 0;
    for (const Tensor* t : u.params.trainable())
      for (double v : t->data()) zeros += v == 0.0;
    replay += zeros * 4 - 2;  // 14 prunable channels -> 2-byte bitmap
  };
  RoundReport last;
  for (int r = 0; r < 3; ++r) last = run_round(server, opts);
  EXPECT_EQ(last.bytes_saved_cumulative, replay);
  EXPECT_EQ(server.cumulative_bytes_saved, replay);
}

TEST(RunRound, FailedClientIsExcluded) {
  auto good = small_data(24);
  auto bad = std::make_shared<std::vector<TrainingExample>>(*good);
  for (auto& ex : *bad) ex.image[0] = std::numeric_limits<double>::quiet_NaN();
  auto clients = make_clients(good, {0.2, 0.3});
  clients[1].data = bad;
  ServerState server(build_model(small_detector(), 2), clients, 1.0, 8);
  RoundOptions opts;
  opts.method = Method::SFedWeg;
  opts.parallel = false;
  ClientUpdate seen;
  opts.on_update = [&](std::size_t, const ClientUpdate& u) {
    if (u.client_id == 0) seen = u;
  };
  const RoundReport rep = run_round(server, opts);
  ASSERT_EQ(rep.clients.size(), 2u);
  EXPECT_FALSE(rep.clients[0].failed);
  EXPECT_TRUE(rep.clients[1].failed);
  EXPECT_TRUE(bitwise_equal(server.global, seen.params));
}

TEST(RunRound, AllClientsFailingLeavesGlobalUnchanged) {
  auto bad = std::make_shared<std::vector<TrainingExample>>(*small_data(24));
  for (auto& ex : *bad) ex.image[0] = std::numeric_limits<double>::quiet_NaN();
  const ModelParams init = build_model(small_detector(), 2);
  ServerState server(init, make_clients(bad, {0.2, 0.3}), 1.0, 8);
  RoundOptions opts;
  EXPECT_THROW(run_round(server, opts), RoundError);
  EXPECT_TRUE(bitwise_equal(server.global, init));
  EXPECT_EQ(server.round, 0u);
}

TEST(Method, ParseAndName) {
  for (Method m : {Method::FedAvg, Method::SFedAvg, Method::SFedWeg}) EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("fedprox"), std::invalid_argument);
}
