#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedsparse/autodiff.hpp"
#include "fedsparse/dataset.hpp"
#include "fedsparse/detector.hpp"
#include "fedsparse/evaluation.hpp"
#include "fedsparse/sparsifier.hpp"

namespace fedsparse {

enum class Method { FedAvg, SFedAvg, SFedWeg };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::FedAvg: return "fedavg";
    case Method::SFedAvg: return "s-fedavg";
    case Method::SFedWeg: return "s-fedweg";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  if (s == "fedavg") return Method::FedAvg;
  if (s == "s-fedavg") return Method::SFedAvg;
  if (s == "s-fedweg") return Method::SFedWeg;
  throw std::invalid_argument("unknown method '" + s + "' (expected fedavg, s-fedavg or s-fedweg)");
}

inline bool is_sparse(Method m) { return m != Method::FedAvg; }

class RoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClientState {
  std::size_t client_id = 0;
  SparsityRate sparsity{0.2};
  std::shared_ptr<const std::vector<TrainingExample>> data;
  std::vector<std::size_t> indices;  // this client's partition of `data`
  double learning_rate = 0.05;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 16;
  std::optional<SparseMask> retained_mask;

  std::size_t sample_count() const { return indices.size(); }

  void validate() const {
    if (!data || indices.empty()) throw std::invalid_argument("client " + std::to_string(client_id) + " has no data");
    if (local_epochs < 1 || batch_size < 1 || !(learning_rate > 0.0)) {
      throw std::invalid_argument("client " + std::to_string(client_id) + " has invalid training settings");
    }
  }
};

struct ClientUpdate {
  std::size_t client_id = 0;
  ModelParams params;  // masked positions are exactly zero
  SparseMask mask;
  std::vector<double> epoch_losses;
  std::size_t pruned_weights = 0;
  std::size_t total_weights = 0;
  std::size_t pruned_channels = 0;
  bool sparse = false;
  bool failed = false;
  std::string failure;
  std::size_t sqrt_clamps = 0;
};

struct LocalTrainingOptions {
  double lambda = 1e-4;  // weight of the L1 penalty on prunable BN scales
  bool sparse = true;    // re-apply the retained mask, then prune after training
  LossConfig loss;
};

/// One SGD step on detection loss + lambda * sum|gamma|. Returns the total loss;
/// when it is not finite the parameters are left untouched.
inline double train_step(ModelParams& model, const Tensor& batch, std::span<const GridTarget> targets,
                         const LossConfig& loss_cfg, double lambda, double learning_rate,
                         LossDiagnostics* diag = nullptr) {
  Tape tape;
  Var pred = forward(tape, model, batch, true);
  Var loss = yolo_loss(pred, targets, loss_cfg, diag);
  if (lambda > 0.0) loss = add(loss, l1_penalty(tape, model, lambda));
  const double value = loss.value().item();
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  auto params = model.trainable();
  sgd_step(params, learning_rate);
  return value;
}

/// Local sparse training on one client: mask the incoming global model with the
/// client's retained mask, run E epochs of minibatch SGD, then prune ceil(s*n)
/// channels by global |gamma| threshold.
inline ClientUpdate edge_model_update(const ClientState& client, const ModelParams& global,
                                      const LocalTrainingOptions& opts, std::uint64_t seed) {
  client.validate();
  ClientUpdate update;
  update.client_id = client.client_id;
  update.sparse = opts.sparse;
  update.params = global;
  ModelParams& model = update.params;
  if (opts.sparse && client.retained_mask) apply_mask(model, *client.retained_mask);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order = client.indices;
  const auto& data = *client.data;
  for (std::size_t epoch = 0; epoch < client.local_epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(order[i], order[pick(rng)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += client.batch_size) {
      const std::size_t end = std::min(order.size(), start + client.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<GridTarget> targets;
      targets.reserve(idx.size());
      for (std::size_t k : idx) targets.push_back(data[k].target);
      LossDiagnostics diag;
      const double loss = train_step(model, make_batch(data, idx), targets, opts.loss,
                                     opts.sparse ? opts.lambda : 0.0, client.learning_rate, &diag);
      update.sqrt_clamps += diag.sqrt_clamps;
      if (!std::isfinite(loss)) {
        update.failed = true;
        update.failure = "non-finite loss in epoch " + std::to_string(epoch + 1);
        return update;
      }
      epoch_loss += loss * static_cast<double>(idx.size());
    }
    update.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }

  if (opts.sparse) {
    const double threshold = global_threshold(model, client.sparsity);
    update.mask = build_mask(model, threshold, client.sparsity);
    apply_mask(model, update.mask);
  } else {
    update.mask = ones_mask(model);
  }
  const PruneCounts counts = prune_report(update.mask, model);
  update.pruned_weights = counts.pruned;
  update.total_weights = counts.total;
  update.pruned_channels = update.mask.pruned_channels();
  return update;
}

// ---------------------------------------------------------------------------
// Aggregation

/// N_k / sum N_j.
inline std::vector<double> fedavg_weights(std::span<const std::size_t> sizes) {
  if (sizes.empty()) throw std::invalid_argument("fedavg: no clients");
  double total = 0.0;
  for (std::size_t n : sizes) {
    if (n == 0) throw std::invalid_argument("fedavg: client with no samples");
    total += static_cast<double>(n);
  }
  std::vector<double> w;
  for (std::size_t n : sizes) w.push_back(static_cast<double>(n) / total);
  return w;
}

/// (1/s_k) / sum_j (1/s_j) over the sampled clients; dataset sizes play no part.
inline std::vector<double> fedweg_weights(std::span<const double> rates) {
  if (rates.empty()) throw std::invalid_argument("fedweg: no clients");
  double total = 0.0;
  for (double s : rates) total += 1.0 / SparsityRate(s).value();
  std::vector<double> w;
  for (double s : rates) w.push_back((1.0 / s) / total);
  return w;
}

namespace detail {

/// Elementwise weighted sum of every stored tensor (running statistics included),
/// accumulated in the given order. Equal raw weights take the plain-mean path so
/// that every uniformly weighted rule produces the same bits.
inline ModelParams combine(std::span<const ModelParams* const> models, std::span<const double> raw_weights) {
  if (models.empty()) throw std::invalid_argument("aggregate: no updates");
  if (models.size() != raw_weights.size()) throw std::invalid_argument("aggregate: weight count mismatch");
  const bool uniform = std::all_of(raw_weights.begin(), raw_weights.end(),
                                   [&](double w) { return w == raw_weights.front(); });
  double total = 0.0;
  for (double w : raw_weights) total += w;

  ModelParams out = *models.front();
  auto dst = out.all_tensors();
  for (Tensor* t : dst) std::fill(t->data().begin(), t->data().end(), 0.0);
  for (std::size_t k = 0; k < models.size(); ++k) {
    auto src = models[k]->all_tensors();
    if (src.size() != dst.size()) throw ShapeError("aggregate: update has a different architecture");
    const double weight = raw_weights[k] / total;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i]->shape() != dst[i]->shape()) {
        throw ShapeError("aggregate: tensor " + std::to_string(i) + " shape " + to_string(src[i]->shape()) +
                         " vs " + to_string(dst[i]->shape()));
      }
      auto d = dst[i]->data();
      const auto s = src[i]->data();
      if (uniform) {
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
      } else {
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += weight * s[j];
      }
    }
  }
  if (uniform) {
    const double count = static_cast<double>(models.size());
    for (Tensor* t : dst) {
      for (double& v : t->data()) v /= count;
    }
  }
  out.clear_grads();
  return out;
}

inline std::vector<const ModelParams*> models_of(std::span<const ClientUpdate> updates) {
  std::vector<const ModelParams*> models;
  for (const auto& u : updates) models.push_back(&u.params);
  return models;
}

}  // namespace detail

/// w = sum_k N_k / N * w_k.
inline ModelParams fedavg_aggregate(std::span<const ClientUpdate> updates, std::span<const std::size_t> sizes) {
  fedavg_weights(sizes);
  std::vector<double> raw;
  for (std::size_t n : sizes) raw.push_back(static_cast<double>(n));
  return detail::combine(detail::models_of(updates), raw);
}

/// w = sum_k (1/s_k) / sum_j (1/s_j) * masked w_k, one scalar weight per client.
inline ModelParams fedweg_aggregate(std::span<const ClientUpdate> updates, std::span<const double> rates) {
  fedweg_weights(rates);
  std::vector<double> raw;
  for (double s : rates) raw.push_back(1.0 / s);
  return detail::combine(detail::models_of(updates), raw);
}

// ---------------------------------------------------------------------------
// Rounds

/// ceil(fraction * |registry|) distinct ids drawn without replacement, ascending.
template <class Rng>
std::vector<std::size_t> sample_clients(std::span<const std::size_t> registry, double fraction, Rng& rng) {
  if (registry.empty()) throw std::invalid_argument("sample_clients: empty registry");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("sample_clients: fraction must be in (0, 1]");
  std::vector<std::size_t> ids(registry.begin(), registry.end());
  const auto want = std::min(ids.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size()) - 1e-9)));
  if (want < ids.size()) {
    for (std::size_t i = 0; i < want; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(want);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Bytes not transmitted thanks to pruning: 4 per pruned float32 value, minus the
/// channel bitmap (ceil(prunable_channels / 8) bytes). Dense updates save nothing.
inline std::int64_t comm_accounting(std::size_t pruned_weights, std::size_t prunable_channel_count, bool sparse) {
  if (!sparse) return 0;
  return static_cast<std::int64_t>(pruned_weights) * 4 -
         static_cast<std::int64_t>((prunable_channel_count + 7) / 8);
}

inline std::int64_t comm_accounting(const ClientUpdate& update, std::size_t prunable_channel_count) {
  return comm_accounting(update.pruned_weights, prunable_channel_count, update.sparse);
}

struct ServerState {
  ModelParams global;
  std::size_t round = 0;
  std::vector<ClientState> clients;
  double sampling_fraction = 1.0;
  std::uint64_t seed = 0;
  std::mt19937_64 rng;
  std::int64_t cumulative_bytes_saved = 0;

  ServerState() = default;
  ServerState(ModelParams initial, std::vector<ClientState> registry, double fraction, std::uint64_t seed_)
      : global(std::move(initial)), clients(std::move(registry)), sampling_fraction(fraction), seed(seed_),
        rng(derive_seed(seed_, 0x5a4d)) {}
};

struct ClientRoundStat {
  std::size_t client_id = 0;
  std::size_t pruned_weights = 0;
  std::size_t pruned_channels = 0;
  std::int64_t bytes_saved = 0;
  bool failed = false;
  std::string failure;
};

struct RoundReport {
  std::size_t round = 0;
  Method method = Method::FedAvg;
  double eval_loss = 0.0;
  double map50 = 0.0;
  std::vector<ClientRoundStat> clients;
  std::int64_t bytes_saved_round = 0;
  std::int64_t bytes_saved_cumulative = 0;
  std::size_t sqrt_clamps = 0;
};

struct RoundOptions {
  Method method = Method::SFedWeg;
  double lambda = 1e-4;
  LossConfig loss;
  EvalOptions eval;
  bool parallel = true;
  const std::vector<TrainingExample>* test_set = nullptr;
  /// Called with each client update (ascending client id) before aggregation.
  std::function<void(std::size_t, const ClientUpdate&)> on_update;
};

/// Runs one federated round: sample, train clients, aggregate in ascending id
/// order, evaluate, and account for communication. If every client fails the
/// global model is left unchanged and RoundError is thrown.
inline RoundReport run_round(ServerState& server, const RoundOptions& opts) {
  const std::size_t round = server.round + 1;
  std::vector<std::size_t> registry;
  for (const auto& c : server.clients) registry.push_back(c.client_id);
  const auto selected = sample_clients(std::span<const std::size_t>(registry), server.sampling_fraction, server.rng);

  std::vector<ClientState*> chosen;
  for (std::size_t id : selected) {
    auto it = std::find_if(server.clients.begin(), server.clients.end(), [id](const auto& c) { return c.client_id == id; });
    chosen.push_back(&*it);
  }

  LocalTrainingOptions local{opts.lambda, is_sparse(opts.method), opts.loss};
  if (!local.sparse) local.lambda = 0.0;
  std::vector<ClientUpdate> updates(chosen.size());
  auto work = [&](std::size_t i) {
    try {
      updates[i] = edge_model_update(*chosen[i], server.global, local,
                                     derive_seed(server.seed, round, chosen[i]->client_id));
    } catch (const std::exception& e) {
      updates[i] = ClientUpdate{};
      updates[i].client_id = chosen[i]->client_id;
      updates[i].failed = true;
      updates[i].failure = e.what();
    }
  };
  if (opts.parallel && chosen.size() > 1) {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < chosen.size(); ++i) threads.emplace_back(work, i);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t i = 0; i < chosen.size(); ++i) work(i);
  }

  RoundReport report;
  report.round = round;
  report.method = opts.method;
  const std::size_t prunable = prunable_channels(server.global.config).size();
  std::vector<ClientUpdate> ok;
  std::vector<std::size_t> sizes;
  std::vector<double> rates;
  for (std::size_t i = 0; i < updates.size(); ++i) {
    auto& u = updates[i];
    if (opts.on_update) opts.on_update(round, u);
    ClientRoundStat stat{u.client_id, u.pruned_weights, u.pruned_channels, 0, u.failed, u.failure};
    if (!u.failed) {
      stat.bytes_saved = comm_accounting(u, prunable);
      report.bytes_saved_round += stat.bytes_saved;
      report.sqrt_clamps += u.sqrt_clamps;
      sizes.push_back(chosen[i]->sample_count());
      rates.push_back(chosen[i]->sparsity.value());
      if (local.sparse) chosen[i]->retained_mask = u.mask;
      ok.push_back(std::move(u));
    }
    report.clients.push_back(std::move(stat));
  }
  if (ok.empty()) throw RoundError("round " + std::to_string(round) + ": every client update failed");

  server.global = opts.method == Method::SFedWeg ? fedweg_aggregate(ok, rates) : fedavg_aggregate(ok, sizes);
  server.round = round;
  server.cumulative_bytes_saved += report.bytes_saved_round;
  report.bytes_saved_cumulative = server.cumulative_bytes_saved;

  if (opts.test_set != nullptr && !opts.test_set->empty()) {
    const auto eval = evaluate_model(server.global, *opts.test_set, opts.loss, opts.eval);
    report.map50 = eval.map50;
    report.eval_loss = eval.eval_loss;
    report.sqrt_clamps += eval.sqrt_clamps;
  }
  return report;
}

}  // namespace fedsparse
