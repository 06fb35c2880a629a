#include "dlbl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dlbl/errors.hpp"

namespace dlbl {

TrainConfig TrainConfig::defaults(ArchTag tag) {
  TrainConfig c;
  c.arch.tag = tag;
  c.sampler.minibatch = tag == ArchTag::FPL ? 32 : 128;
  return c;
}

Schedule TrainConfig::resolved_schedule() const {
  if (schedule.empty()) return Schedule::for_arch(arch.tag, epochs);
  Schedule s(schedule);
  if (epochs != 0 && s.total_epochs() != epochs) {
    throw ConfigError("schedule covers " + std::to_string(s.total_epochs()) + " epochs but epochs = " +
                      std::to_string(epochs));
  }
  return s;
}

std::vector<LrPhase> parse_schedule(const std::string& text) {
  std::vector<LrPhase> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int a = 0, b = 0;
    double lr = 0;
    char dash = 0, colon = 0;
    std::istringstream is(item);
    if (!(is >> a >> dash >> b >> colon >> lr) || dash != '-' || colon != ':' || !(is >> std::ws).eof()) {
      throw ConfigError("bad schedule entry '" + item + "', expected first-last:lr");
    }
    out.push_back({a, b, lr});
  }
  if (out.empty()) throw ConfigError("empty schedule");
  return out;
}

TrainConfig parse_train_config(const KeyValues& kv) {
  const ArchTag tag = parse_arch_tag(kv.str("arch.tag", "FPL"));
  TrainConfig c = TrainConfig::defaults(tag);
  ArchSpec& a = c.arch;
  a.in_channels = static_cast<std::size_t>(kv.integer("arch.in_channels", static_cast<long long>(a.in_channels)));
  a.num_classes = static_cast<std::size_t>(kv.integer("arch.classes", static_cast<long long>(a.num_classes)));
  a.patch_size = static_cast<std::size_t>(kv.integer("arch.patch", static_cast<long long>(a.patch_size)));
  a.leak = kv.real("arch.leak", a.leak);
  a.dropout = kv.real("arch.dropout", a.dropout);
  const std::string at = kv.str("arch.dropout_at", "after_pool");
  if (at == "after_pool") {
    a.dropout_placement = DropoutPlacement::after_pool;
  } else if (at == "before_pool") {
    a.dropout_placement = DropoutPlacement::before_pool;
  } else {
    throw ConfigError("arch.dropout_at must be after_pool or before_pool");
  }
  const long long divisor = kv.integer("arch.width_divisor", 1);
  if (divisor < 1) throw ConfigError("arch.width_divisor must be >= 1");
  a = a.thinned(static_cast<std::size_t>(divisor));
  const long long deconv = kv.integer("arch.deconv_channels", static_cast<long long>(a.deconv_channels));
  if (deconv < 1) throw ConfigError("arch.deconv_channels must be >= 1");
  a.deconv_channels = static_cast<std::size_t>(deconv);

  c.epochs = static_cast<int>(kv.integer("train.epochs", 0));
  c.minibatches_per_epoch = static_cast<std::size_t>(kv.integer("train.minibatches_per_epoch", 500));
  SamplerConfig& s = c.sampler;
  s.patch_size = a.patch_size;
  s.minibatch = static_cast<std::size_t>(kv.integer("train.minibatch", static_cast<long long>(s.minibatch)));
  s.superbatch_factor = static_cast<std::size_t>(kv.integer("train.superbatch_factor", 500));
  s.resample_interval = static_cast<std::size_t>(kv.integer("train.resample_interval", 20));
  s.balanced = kv.boolean("train.balanced", true);
  s.rotate = kv.boolean("train.rotate", true);
  s.flips = kv.boolean("train.flips", true);
  s.jitter_sigma = kv.real("train.jitter_sigma", 0.01);
  s.jitter_height = kv.boolean("train.jitter_height", true);
  c.validation_factor = static_cast<std::size_t>(kv.integer("train.validation_factor", 100));
  c.optimizer.momentum = kv.real("train.momentum", 0.9);
  c.optimizer.weight_decay = kv.real("train.weight_decay", 0.01);
  if (auto sched = kv.get("train.schedule")) c.schedule = parse_schedule(*sched);
  c.warm_start = kv.str("train.warm_start", "");
  c.grid_epochs = static_cast<int>(kv.integer("train.grid_epochs", 0));
  c.grid_overlap = static_cast<std::size_t>(kv.integer("train.grid_overlap", 33));
  c.checkpoint_dir = kv.str("train.checkpoint_dir", "");
  c.checkpoint_every = static_cast<int>(kv.integer("train.checkpoint_every", 0));
  c.seed = static_cast<std::uint64_t>(kv.integer("train.seed", 1));
  c.deterministic = kv.boolean("train.deterministic", true);

  if (c.minibatches_per_epoch == 0 || s.minibatch == 0 || s.superbatch_factor == 0 || s.resample_interval == 0) {
    throw ConfigError("mini-batch counts, super-batch factor and resample interval must be positive");
  }
  if (c.grid_epochs < 0 || c.epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (c.grid_overlap >= s.patch_size) throw ConfigError("grid overlap must be smaller than the patch");
  if (!c.warm_start.empty() && !std::filesystem::exists(c.warm_start)) {
    throw ConfigError("warm-start checkpoint not found: " + c.warm_start.string());
  }
  c.resolved_schedule();
  return c;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Mean-centred patches and full labels of store entries [first, first+n).
Batch slice(const Batch& all, const std::vector<std::size_t>& order, std::size_t first, std::size_t n) {
  const Shape& s = all.patches.shape();
  Batch b{Tensor4(n, s.channels, s.height, s.width), LabelBatch(n, s.height, s.width)};
  const std::size_t sample = s.channels * s.plane();
  const std::size_t plane = s.plane();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[first + i];
    std::copy_n(all.patches.sample(src), sample, b.patches.sample(i));
    std::copy_n(all.labels.data.begin() + static_cast<std::ptrdiff_t>(src * plane), plane,
                b.labels.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
  }
  return b;
}

struct Score {
  double loss = 0;
  std::size_t correct = 0, pixels = 0;
};

void accumulate_accuracy(const Tensor4& probs, const LabelBatch& targets, Score& s) {
  const LabelBatch pred = argmax_channels(probs);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (targets.data[i] == kIgnoreLabel) continue;
    ++s.pixels;
    s.correct += pred.data[i] == targets.data[i];
  }
}

// Eval-mode loss and pixel accuracy over a fixed patch set.
Score evaluate_set(const Network<float>& net, ArchTag tag, const Batch& all, std::size_t chunk) {
  Network<float> eval = net;
  eval.set_mode(Mode::eval);
  std::vector<std::size_t> order(all.patches.batch());
  std::iota(order.begin(), order.end(), 0);
  Score s;
  std::size_t batches = 0;
  for (std::size_t first = 0; first < order.size(); first += chunk) {
    const Batch b = slice(all, order, first, std::min(chunk, order.size() - first));
    const LabelBatch t = targets_for(tag, b.labels);
    const auto x = softmax_xent(eval.infer(b.patches), t);
    s.loss += static_cast<double>(x.loss);
    ++batches;
    accumulate_accuracy(x.probs, t, s);
  }
  s.loss /= static_cast<double>(std::max<std::size_t>(1, batches));
  return s;
}

double grad_norm(Network<float>& net) {
  double sq = 0;
  for (auto* p : net.params())
    for (float g : p->grad.values()) sq += double(g) * g;
  return std::sqrt(sq);
}

struct DeterministicScope {
  bool previous;
  explicit DeterministicScope(bool on) : previous(deterministic()) { set_deterministic(on); }
  ~DeterministicScope() { set_deterministic(previous); }
};

void check_dataset(const ArchSpec& arch, const Dataset& ds) {
  if (ds.train.empty()) throw DataError("dataset has no training tiles");
  if (ds.channels() != arch.in_channels) {
    throw DataError("dataset has " + std::to_string(ds.channels()) + " channels, architecture expects " +
                    std::to_string(arch.in_channels));
  }
  if (ds.num_classes != arch.num_classes) {
    throw DataError("dataset has " + std::to_string(ds.num_classes) + " classes, architecture expects " +
                    std::to_string(arch.num_classes));
  }
  for (const auto& v : ds.validation)
    for (const auto& t : ds.train)
      if (v.id == t.id) throw DataError("tile '" + t.id + "' is in both training and validation splits");
}

}  // namespace

LabelBatch targets_for(ArchTag tag, const LabelBatch& full) {
  switch (tag) {
    case ArchTag::PC:
      return center_labels(full);
    case ArchTag::SPL:
      return lattice_labels(full, 8);
    case ArchTag::FPL:
      return full;
  }
  throw ConfigError("unknown architecture");
}

std::string EpochRecord::line() const {
  return "epoch=" + std::to_string(epoch) + " lr=" + fmt(lr) + " steps=" + std::to_string(steps) +
         " train_loss=" + fmt(train_loss) + " train_acc=" + fmt(train_accuracy) + " val_loss=" + fmt(val_loss) + " val_acc=" + fmt(val_accuracy) +
         " grad_norm=" + fmt(grad_norm) + " seconds=" + fmt(seconds) + " source=" + source +
         " seed=" + std::to_string(seed);
}

std::string TrainLog::text() const {
  std::string out;
  for (const auto& e : epochs) out += e.line() + "\n";
  return out;
}

void TrainLog::append_to(const std::filesystem::path& path) const {
  std::size_t present = 0;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++present;
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot append to " + path.string());
  for (std::size_t i = present; i < epochs.size(); ++i) out << epochs[i].line() << "\n";
}

Checkpoint make_training_checkpoint(Network<float>& net, const SgdMomentum* opt, const Normalization& norm,
                                    int epoch, std::uint64_t seed) {
  Checkpoint ck = make_checkpoint(net);
  if (opt) opt->save_state(ck);
  if (!norm.empty()) {
    ck.set_tensor("aux.norm.min", to_record(norm.min));
    ck.set_tensor("aux.norm.max", to_record(norm.max));
    ck.set_tensor("aux.norm.mean", to_record(norm.mean));
  }
  ck.set_meta("epoch", static_cast<std::uint64_t>(epoch));
  ck.set_meta("seed", seed);
  return ck;
}

Normalization normalization_from(const Checkpoint& ck) {
  Normalization n;
  const TensorRecord* mn = ck.find("aux.norm.min");
  const TensorRecord* mx = ck.find("aux.norm.max");
  const TensorRecord* me = ck.find("aux.norm.mean");
  if (!mn || !mx || !me) return n;
  n.min = mn->data;
  n.max = mx->data;
  n.mean = me->data;
  if (n.max.size() != n.min.size() || n.mean.size() != n.min.size()) {
    throw DataError("checkpoint normalisation constants disagree in length");
  }
  return n;
}

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const EpochCallback& on_epoch) {
  check_dataset(cfg.arch, ds);
  if (cfg.sampler.patch_size != cfg.arch.patch_size) throw ConfigError("sampler and architecture patch sizes differ");
  const Schedule schedule = cfg.resolved_schedule();
  const int epochs = schedule.total_epochs();
  const DeterministicScope det(cfg.deterministic);
  const ArchTag tag = cfg.arch.tag;

  TrainResult result{build(cfg.arch), {}, {}, {}};
  Network<float>& net = result.net;
  Rng init = named_stream(cfg.seed, "init");
  net.init_weights(init);
  net.seed(named_stream(cfg.seed, "dropout")());
  if (!cfg.warm_start.empty()) {
    const Checkpoint pc = read_checkpoint(cfg.warm_start);
    if (ArchSpec::parse(pc.arch_tag).tag != ArchTag::PC) {
      throw ConfigError("warm start expects a PC checkpoint, got '" + pc.arch_tag + "'");
    }
    result.warm = warm_start(net, pc, pc_warm_start_map());
    if (result.warm.loaded.empty()) throw ConfigError("warm-start checkpoint shares no tensors with the network");
  }

  SgdMomentum opt(cfg.optimizer);
  SamplerStreams streams(cfg.seed);
  auto train_tiles = std::make_shared<const std::vector<Tile>>(ds.train);

  Batch validation;
  bool have_validation = false;
  if (!ds.validation.empty() && cfg.validation_factor > 0) {
    auto val_tiles = std::make_shared<const std::vector<Tile>>(ds.validation);
    Rng vrng = named_stream(cfg.seed, "validation");
    const PatchStore vs = sample_patches(val_tiles, cfg.arch.patch_size,
                                         cfg.sampler.minibatch * cfg.validation_factor, ds.num_classes, true, vrng);
    std::vector<std::size_t> all(vs.size());
    std::iota(all.begin(), all.end(), 0);
    validation = extract_batch(vs, all, ds.norm.mean);
    have_validation = true;
  }

  const int every = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : static_cast<int>(cfg.sampler.resample_interval);
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);
  const std::string stem = to_string(tag);

  PatchStore store;
  std::string source;
  int sampled_at = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = schedule.lr(epoch);
    if (epoch <= cfg.grid_epochs) {
      if (source != "grid") {
        store = grid_superbatch(train_tiles, cfg.arch.patch_size, cfg.grid_overlap);
        source = "grid";
      }
    } else if (source != "superbatch" ||
               static_cast<std::size_t>(epoch - sampled_at) % cfg.sampler.resample_interval == 0) {
      store = sample_superbatch(ds.train, cfg.sampler, ds.num_classes, streams);
      source = "superbatch";
      sampled_at = epoch;
    }

    net.set_mode(Mode::train);
    EpochRecord rec;
    Score tr;
    double norm_sum = 0;
    for (std::size_t step = 0; step < cfg.minibatches_per_epoch; ++step) {
      const Batch b = draw_minibatch(store, cfg.sampler, ds.norm.mean, ds.height_channel, streams);
      const LabelBatch t = targets_for(tag, b.labels);
      net.zero_grad();
      const auto x = softmax_xent(net.forward(b.patches), t);
      if (!std::isfinite(x.loss)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step + 1) + ": loss is " + fmt(x.loss));
      }
      net.backward(x.dscores);
      norm_sum += grad_norm(net);
      opt.step(net, lr);
      tr.loss += static_cast<double>(x.loss);
      accumulate_accuracy(x.probs, t, tr);
      ++rec.steps;
    }
    net.release_caches();

    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = tr.loss / static_cast<double>(cfg.minibatches_per_epoch);
    rec.train_accuracy = tr.pixels ? static_cast<double>(tr.correct) / static_cast<double>(tr.pixels) : 0;
    rec.grad_norm = norm_sum / static_cast<double>(cfg.minibatches_per_epoch);
    rec.source = source;
    rec.seed = cfg.seed;
    if (have_validation) {
      const Score v = evaluate_set(net, tag, validation, cfg.sampler.minibatch);
      rec.val_loss = v.loss;
      rec.val_accuracy = v.pixels ? static_cast<double>(v.correct) / static_cast<double>(v.pixels) : 0;
    } else {
      rec.val_loss = rec.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!cfg.checkpoint_dir.empty() && epoch % every == 0 && epoch != epochs) {
      write_checkpoint(make_training_checkpoint(net, &opt, ds.norm, epoch, cfg.seed),
                       cfg.checkpoint_dir / (stem + "_epoch" + std::to_string(epoch) + ".ckpt"));
    }
  }

  net.set_mode(Mode::eval);
  result.checkpoint = make_training_checkpoint(net, &opt, ds.norm, epochs, cfg.seed);
  if (!cfg.checkpoint_dir.empty()) write_checkpoint(result.checkpoint, cfg.checkpoint_dir / (stem + "_final.ckpt"));
  return result;
}

std::vector<double> moving_average(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  double sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    sum += v[i];
    if (i >= window) sum -= v[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

OverfitResult overfit_smoke(const OverfitConfig& cfg, const Dataset& ds) {
  ArchSpec arch = cfg.arch;
  arch.dropout = 0;
  check_dataset(arch, ds);
  const DeterministicScope det(true);
  Network<float> net = build(arch);
  Rng init = named_stream(cfg.seed, "init");
  net.init_weights(init);

  auto tiles = std::make_shared<const std::vector<Tile>>(ds.train);
  Rng srng = named_stream(cfg.seed, "overfit.patches");
  const PatchStore store = sample_patches(tiles, arch.patch_size, cfg.patches, ds.num_classes, true, srng);
  std::vector<std::size_t> order(store.size());
  std::iota(order.begin(), order.end(), 0);
  const Batch all = extract_batch(store, order, ds.norm.mean);

  SgdMomentum opt(OptimizerConfig{0.9, 0.0});
  Rng shuffle = named_stream(cfg.seed, "overfit.shuffle");
  OverfitResult r;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    net.set_mode(Mode::train);
    double loss = 0;
    Score seen;
    for (std::size_t first = 0; first < order.size(); first += cfg.minibatch) {
      const std::size_t n = std::min(cfg.minibatch, order.size() - first);
      const Batch b = slice(all, order, first, n);
      net.zero_grad();
      const LabelBatch t = targets_for(arch.tag, b.labels);
      const auto x = softmax_xent(net.forward(b.patches), t);
      accumulate_accuracy(x.probs, t, seen);
      if (!std::isfinite(x.loss)) {
        throw NumericError("overfit run diverged at epoch " + std::to_string(epoch));
      }
      net.backward(x.dscores);
      opt.step(net, cfg.lr);
      loss += static_cast<double>(x.loss) * static_cast<double>(n);
    }
    net.release_caches();
    r.losses.push_back(loss / static_cast<double>(order.size()));
    r.train_accuracies.push_back(static_cast<double>(seen.correct) / static_cast<double>(seen.pixels));
    const Score s = evaluate_set(net, arch.tag, all, cfg.minibatch);
    r.accuracies.push_back(static_cast<double>(s.correct) / static_cast<double>(s.pixels));
    r.epochs = epoch;
    if (r.accuracies.back() > cfg.target) {
      r.reached = true;
      break;
    }
  }
  return r;
}

}  // namespace dlbl
