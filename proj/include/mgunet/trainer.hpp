#pragma once

// Adam with coupled L2 weight decay, step-decay learning rate, and an
// epoch-level training loop with best/last checkpoints and a TSV log.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mgunet/checkpoint.hpp"
#include "mgunet/data.hpp"
#include "mgunet/errors.hpp"
#include "mgunet/metrics.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/pipeline.hpp"

namespace mgu {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimState {
  AdamConfig config;
  std::uint64_t step = 0;
  double lr = 0.0;  // rate used by the latest step
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// One Adam update of every trainable parameter from its accumulated
/// gradient g, using g + weight_decay * theta as the effective gradient.
inline void adam_step(OptimState& state, const ParameterList& params, double lr) {
  for (const auto& p : params) {
    if (p.trainable && !p.tensor.has_grad()) {
      throw ContractError("no gradient for trainable parameter '" + p.name + "'");
    }
  }
  ++state.step;
  state.lr = lr;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& p : params) {
    if (!p.trainable) continue;
    auto tensor = p.tensor;
    auto theta = tensor.mutable_values();
    const auto grad = tensor.grad();
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    if (m.empty()) m.assign(theta.size(), 0.0);
    if (v.empty()) v.assign(theta.size(), 0.0);
    if (m.size() != theta.size() || v.size() != theta.size()) {
      throw ContractError("optimizer moments for '" + p.name + "' do not match the parameter");
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i] + c.weight_decay * theta[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

inline void zero_grads(const ParameterList& params) {
  for (auto p : params) p.tensor.zero_grad();
}

struct TrainConfig {
  std::size_t epochs = 50;
  double lr0 = 1e-3;
  double decay_factor = 0.1;
  std::size_t decay_every = 20;
  std::size_t batch = 1;
  double lambda = 2.0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1;  // epochs between last.ckpt writes
  bool augment = true;
  AdamConfig adam;

  void validate() const {
    if (epochs < 1 || !(lr0 > 0.0) || !(decay_factor > 0.0) || decay_every < 1 || batch != 1 ||
        lambda < 0.0 || checkpoint_every < 1) {
      throw ConfigError("invalid training configuration (epochs >= 1, lr > 0, batch = 1, lambda >= 0)");
    }
  }
};

/// lr0 * decay_factor ^ floor(epoch / decay_every).
inline double lr_at(std::size_t epoch, const TrainConfig& config) {
  return config.lr0 * std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_every));
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double l_seg1 = 0.0;
  double l_seg2 = 0.0;
  double total = 0.0;
  double val_mean_dice = 0.0;
  std::vector<double> step_losses;  // total loss of every step, in order
};

inline constexpr const char* kTrainLogHeader = "epoch\tlr\tl_seg1\tl_seg2\ttotal\tval_mean_dice\n";

inline void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(17) << kTrainLogHeader;
  for (const auto& e : log) {
    os << e.epoch << '\t' << e.lr << '\t' << e.l_seg1 << '\t' << e.l_seg2 << '\t' << e.total << '\t'
       << e.val_mean_dice << '\n';
  }
}

/// Forward, loss, backward and one Adam update on a single sample.
inline LossReport train_step(const TwoStageModel& model, OptimState& state,
                             const LabeledSample& sample, double lambda, double lr) {
  const auto params = model.parameters();
  zero_grads(params);
  const auto image = image_tensor(sample);
  auto loss = total_loss(model.forward(image), {sample.label}, lambda);
  if (!std::isfinite(loss.total)) {
    std::string origin = "no op produced a non-finite value directly";
    try {
      NanTrapGuard trap;
      NoGradGuard no_grad;
      total_loss(model.forward(image), {sample.label}, lambda);
    } catch (const NumericalError& e) {
      origin = e.what();
    }
    throw NumericalError("non-finite training loss on sample '" + sample.id + "': " + origin);
  }
  backward(loss.total_tensor);
  adam_step(state, params, lr);
  return loss;
}

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val_dice = -1.0;
  std::size_t best_epoch = 0;
};

namespace detail {

inline std::vector<TensorRecord> optimizer_records(const OptimState& s) {
  std::vector<TensorRecord> out{
      {"optim.step", {1}, {static_cast<double>(s.step)}},
      {"optim.lr", {1}, {s.lr}},
  };
  for (const auto& [name, m] : s.first_moment) out.push_back({"optim.m." + name, {m.size()}, m});
  for (const auto& [name, v] : s.second_moment) out.push_back({"optim.v." + name, {v.size()}, v});
  return out;
}

inline void restore_optimizer(OptimState& s, const std::vector<TensorRecord>& records) {
  s.first_moment.clear();
  s.second_moment.clear();
  for (const auto& r : records) {
    if (r.name == "optim.step") s.step = static_cast<std::uint64_t>(r.values.at(0));
    else if (r.name == "optim.lr") s.lr = r.values.at(0);
    else if (r.name.rfind("optim.m.", 0) == 0) s.first_moment[r.name.substr(8)] = r.values;
    else if (r.name.rfind("optim.v.", 0) == 0) s.second_moment[r.name.substr(8)] = r.values;
  }
}

}  // namespace detail

struct TrainOptions {
  std::filesystem::path out_dir;          // empty: no files written
  std::optional<std::filesystem::path> resume;  // last.ckpt of an earlier run
  std::function<void(const EpochLog&)> on_epoch;
};

/// Trains for config.epochs epochs (continuing after the checkpointed epoch
/// when resuming). Sample order and augmentation are drawn from generators
/// seeded by (seed, epoch[, step]), so a resumed run replays exactly.
/// Writes best.ckpt (highest validation mean Dice), last.ckpt and
/// train_log.tsv under out_dir.
inline TrainResult train(TwoStageModel& model, const std::vector<LabeledSample>& train_set,
                         const std::vector<LabeledSample>& val_set, const TrainConfig& config,
                         const TrainOptions& options = {}) {
  config.validate();
  if (train_set.empty() || val_set.empty()) {
    throw ConfigError("training needs non-empty train and validation sets");
  }
  const auto multiple = model.config().required_multiple();
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& s : *set) {
      validate_sample(s, s.id);
      if (s.height % multiple != 0 || s.width % multiple != 0) {
        throw DimensionError("sample '" + s.id + "' is " + std::to_string(s.height) + "x" +
                             std::to_string(s.width) + "; the model needs multiples of " +
                             std::to_string(multiple));
      }
    }
  }
  namespace fs = std::filesystem;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
  }

  OptimState state;
  state.config = config.adam;
  TrainResult result;
  std::size_t start_epoch = 0;
  if (options.resume) {
    const auto records = read_checkpoint(*options.resume);
    restore(model.parameters(), records);
    detail::restore_optimizer(state, records);
    const auto* epoch = find_record(records, "train.epoch");
    const auto* best = find_record(records, "train.best_val_dice");
    const auto* best_epoch = find_record(records, "train.best_epoch");
    if (!epoch || !best || !best_epoch) {
      throw DataError(options.resume->string() + ": not a training checkpoint");
    }
    start_epoch = static_cast<std::size_t>(epoch->values[0]);
    result.best_val_dice = best->values[0];
    result.best_epoch = static_cast<std::size_t>(best_epoch->values[0]);
    for (const auto& r : records) {
      if (r.name.rfind("train.log.", 0) == 0 && r.values.size() == 6) {
        EpochLog e{static_cast<std::size_t>(r.values[0]), r.values[1], r.values[2],
                   r.values[3], r.values[4], r.values[5], {}};
        result.log.push_back(e);
      }
    }
  }

  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_at(epoch, config);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq order_seq{config.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{1}};
    Rng order_rng(order_seq);
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t step = 0; step < order.size(); ++step) {
      const auto& source = train_set[order[step]];
      LossReport loss;
      if (config.augment) {
        std::seed_seq aug_seq{config.seed, static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(step), std::uint64_t{2}};
        Rng aug_rng(aug_seq);
        loss = train_step(model, state, augment(source, aug_rng), config.lambda, entry.lr);
      } else {
        loss = train_step(model, state, source, config.lambda, entry.lr);
      }
      entry.l_seg1 += loss.l_seg1;
      entry.l_seg2 += loss.l_seg2;
      entry.total += loss.total;
      entry.step_losses.push_back(loss.total);
    }
    const double steps = static_cast<double>(order.size());
    entry.l_seg1 /= steps;
    entry.l_seg2 /= steps;
    entry.total /= steps;
    entry.val_mean_dice = evaluate(model, val_set).mean_dice();
    result.log.push_back(entry);

    const bool improved = entry.val_mean_dice > result.best_val_dice;
    if (improved) {
      result.best_val_dice = entry.val_mean_dice;
      result.best_epoch = epoch;
    }
    if (!options.out_dir.empty()) {
      if (improved) save_model(options.out_dir / "best.ckpt", model);
      const bool last_epoch = epoch + 1 == config.epochs;
      if ((epoch + 1) % config.checkpoint_every == 0 || last_epoch) {
        auto extra = detail::optimizer_records(state);
        extra.push_back({"train.epoch", {1}, {static_cast<double>(epoch + 1)}});
        extra.push_back({"train.best_val_dice", {1}, {result.best_val_dice}});
        extra.push_back({"train.best_epoch", {1}, {static_cast<double>(result.best_epoch)}});
        for (const auto& e : result.log) {
          extra.push_back({"train.log." + std::to_string(e.epoch), {6},
                           {static_cast<double>(e.epoch), e.lr, e.l_seg1, e.l_seg2, e.total,
                            e.val_mean_dice}});
        }
        save_model(options.out_dir / "last.ckpt", model, extra);
      }
      write_train_log(options.out_dir / "train_log.tsv", result.log);
    }
    if (options.on_epoch) options.on_epoch(entry);
  }
  return result;
}

}  // namespace mgu
