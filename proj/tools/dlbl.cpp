// dlbl: train, predict, evaluate, verify.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
// 3 data error, 4 numeric failure (divergence, failed gradient check).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "dlbl/gradcheck.hpp"
#include "dlbl/inference.hpp"
#include "dlbl/metrics.hpp"
#include "dlbl/parallel.hpp"
#include "dlbl/raster_io.hpp"
#include "dlbl/synth.hpp"
#include "dlbl/trainer.hpp"

namespace fs = std::filesystem;
using namespace dlbl;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const long v = std::stol(item);
      if (v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of positive integers, got '" + text + "'");
    }
  }
  return out;
}

// Config file with command-line "section.key=value" overrides applied on top.
KeyValues load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : KeyValues::read(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  return kv;
}

// [data] manifest = path (+ lenient_labels) | synth_seed, synth_tiles,
// synth_size, synth_validation
struct DataSpec {
  fs::path manifest;
  bool lenient = false;
  SynthConfig synth;
};

DataSpec parse_data(const KeyValues& kv) {
  DataSpec d;
  d.manifest = kv.str("data.manifest", "");
  d.lenient = kv.boolean("data.lenient_labels", false);
  d.synth.seed = static_cast<std::uint64_t>(kv.integer("data.synth_seed", 1));
  d.synth.tiles = static_cast<std::size_t>(kv.integer("data.synth_tiles", 16));
  d.synth.tile_size = static_cast<std::size_t>(kv.integer("data.synth_size", 512));
  d.synth.validation_tiles = static_cast<std::size_t>(kv.integer("data.synth_validation", 0));
  if (!d.manifest.empty()) require_file(d.manifest, "manifest");
  return d;
}

Dataset load_data(const DataSpec& d) {
  if (!d.manifest.empty()) return load_dataset(Manifest::read(d.manifest), d.lenient);
  return synth_dataset(d.synth);
}

int cmd_train(const fs::path& config, const std::vector<std::string>& overrides, const fs::path& out) {
  const KeyValues kv = load_config(config, overrides);
  TrainConfig cfg = parse_train_config(kv);
  const bool quiet = kv.boolean("output.quiet", false);
  const fs::path dir = out.empty() ? fs::path(kv.str("output.dir", "run")) : out;
  const DataSpec data = parse_data(kv);
  kv.reject_unconsumed();

  const Dataset ds = load_data(data);
  fs::create_directories(dir);
  if (cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = dir;
  const fs::path log_path = dir / "train.log";
  fs::remove(log_path);
  TrainLog running;
  const TrainResult r = train(cfg, ds, [&](const EpochRecord& e) {
    running.epochs.push_back(e);
    running.append_to(log_path);
    if (!quiet) std::cout << e.line() << std::endl;
  });
  const fs::path ck = dir / (to_string(cfg.arch.tag) + ".ckpt");
  write_checkpoint(r.checkpoint, ck);
  if (!r.warm.loaded.empty()) {
    std::cout << "warm start: " << r.warm.loaded.size() << " tensors loaded, " << r.warm.skipped.size()
              << " initialised fresh\n";
  }
  std::cout << "checkpoint: " << ck.string() << "\n";
  return kOk;
}

struct PredictOptions {
  fs::path checkpoint, manifest, image, height, out;
  std::size_t stride = 0;
  std::size_t tile = 257;
  std::size_t margin = 0;
  bool scores = false;
  std::string split = "all";
};

int cmd_predict(const PredictOptions& o) {
  require_file(o.checkpoint, "checkpoint");
  const Checkpoint ck = read_checkpoint(o.checkpoint);
  const Network<float> net = load_network(ck);
  const ArchSpec spec = ArchSpec::parse(ck.arch_tag);
  Normalization norm = normalization_from(ck);

  std::vector<ManifestEntry> entries;
  if (!o.manifest.empty()) {
    require_file(o.manifest, "manifest");
    const Manifest m = Manifest::read(o.manifest);
    if (norm.empty()) norm = m.norm;
    for (const auto& e : m.tiles)
      if (o.split == "all" || e.split == o.split) entries.push_back(e);
    if (entries.empty()) throw DataError("no manifest tiles in split '" + o.split + "'");
  } else if (!o.image.empty()) {
    require_file(o.image, "image");
    if (!o.height.empty()) require_file(o.height, "height raster");
    ManifestEntry e;
    e.id = o.image.stem().string();
    e.spectral = o.image;
    e.height = o.height;
    entries.push_back(e);
  } else {
    throw ConfigError("predict needs --manifest or --image");
  }
  if (norm.empty()) throw DataError("no normalisation constants in the checkpoint or manifest");

  TilingPlan plan{o.tile, o.margin ? o.margin : minimum_margin(spec)};
  plan.validate();
  const std::size_t stride = o.stride ? o.stride : (spec.tag == ArchTag::PC ? 2 : 1);
  fs::create_directories(o.out);
  for (const auto& e : entries) {
    Tile t = load_tile(e, true);
    if (t.channels() != norm.channels()) {
      throw DataError("tile '" + e.id + "' has " + std::to_string(t.channels()) + " channels, checkpoint expects " +
                      std::to_string(norm.channels()));
    }
    norm.rescale(t);
    const ScoreMap s = predict(net, center_image(t.spectral, norm.mean), stride, plan);
    const fs::path png = o.out / (e.id + "_pred.png");
    write_label_map(png, scores_to_map(s));
    if (o.scores) write_scores(o.out / (e.id + ".scores"), s);
    std::cout << e.id << " -> " << png.string() << "\n";
  }
  return kOk;
}

int cmd_evaluate(const std::vector<fs::path>& preds, const std::vector<fs::path>& refs, bool geometric,
                 bool lenient, std::size_t background, const fs::path& report) {
  if (preds.size() != refs.size() || preds.empty()) {
    throw ConfigError("evaluate needs matching, non-empty --pred and --ref lists");
  }
  for (const auto& p : preds) require_file(p, "prediction");
  for (const auto& r : refs) require_file(r, "reference");
  if (background >= kNumClasses) throw ConfigError("background class out of range");
  RegimeCounts counts(kNumClasses);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const LabelMap p = decode_labels(read_color_raster(preds[i]));
    const LabelMap r = decode_labels(read_color_raster(refs[i]), lenient);
    counts.add(p, r, background);
  }
  const MetricsReport rep = make_report(counts, background, geometric ? F1Form::geometric : F1Form::harmonic);
  std::cout << rep.table();
  if (!report.empty()) rep.key_values().write(report);
  return kOk;
}

int cmd_gradcheck(const GradCheckConfig& cfg) {
  const GradCheckReport r = run_gradcheck(cfg);
  for (const auto& s : r.summaries) {
    std::printf("%-13s trials=%zu failures=%zu worst_rel_error=%.3e %s\n", s.kind.c_str(), s.trials, s.failures,
                s.worst, s.failures ? "FAIL" : "ok");
  }
  if (r.pass()) return kOk;
  std::string failed;
  for (const auto& s : r.summaries)
    if (s.failures) failed += (failed.empty() ? "" : ", ") + s.kind;
  std::cerr << "dlbl: gradient check failed for: " << failed << "\n";
  return kNumeric;
}

int cmd_synth(const SynthConfig& cfg, const fs::path& out) {
  write_synth_dataset(cfg, out);
  std::cout << "manifest: " << (out / "manifest.txt").string() << "\n";
  return kOk;
}

struct BenchOptions {
  fs::path fpl, spl, pc, image;
  std::size_t size = 1024;
  std::string strides = "1,2";
};

int cmd_benchmark(const BenchOptions& o) {
  std::optional<Network<float>> fpl, spl, pc;
  std::size_t channels = 0;
  auto load = [&](const fs::path& p, std::optional<Network<float>>& slot) {
    if (p.empty()) return;
    require_file(p, "checkpoint");
    slot = load_network(p);
    channels = ArchSpec::parse(slot->arch_tag()).in_channels;
  };
  load(o.fpl, fpl);
  load(o.spl, spl);
  load(o.pc, pc);
  if (!fpl && !spl && !pc) throw ConfigError("benchmark needs at least one checkpoint");
  Tensor4 image;
  if (!o.image.empty()) {
    require_file(o.image, "image");
    image = read_spectral(o.image);
    for (auto& v : image.values()) v = v / 255.f - 0.5f;
  } else {
    Rng rng(7);
    std::uniform_real_distribution<float> d(-0.5f, 0.5f);
    image = Tensor4(1, channels, o.size, o.size);
    for (auto& v : image.values()) v = d(rng);
  }
  const auto entries = benchmark_inference(fpl ? &*fpl : nullptr, spl ? &*spl : nullptr, pc ? &*pc : nullptr, image,
                                           parse_sizes(o.strides));
  std::printf("image %zux%zu, %zu worker(s)\n", image.height(), image.width(), worker_count());
  for (const auto& e : entries) std::printf("%-14s %10.3f s/image\n", e.method.c_str(), e.seconds);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense semantic labelling of aerial imagery with convolutional networks"};
  app.require_subcommand(1);

  fs::path train_config, train_out;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Train a network from a key/value config");
  train->add_option("-c,--config", train_config, "Config file ([data], [arch], [train], [output])");
  train->add_option("-s,--set", overrides, "Override, e.g. train.epochs=10 (repeatable)");
  train->add_option("-o,--out", train_out, "Output directory (default: output.dir or ./run)");

  PredictOptions po;
  auto* predict = app.add_subcommand("predict", "Write colour-coded label maps");
  predict->add_option("-k,--checkpoint", po.checkpoint, "Trained checkpoint")->required();
  predict->add_option("-m,--manifest", po.manifest, "Dataset manifest");
  predict->add_option("--split", po.split, "Manifest split to predict: all, train, validation, test");
  predict->add_option("-i,--image", po.image, "Single spectral image");
  predict->add_option("--height", po.height, "Height raster for --image");
  predict->add_option("-o,--out", po.out, "Output directory")->required();
  predict->add_option("--stride", po.stride, "PC sliding-window stride (default 2)");
  predict->add_option("--tile", po.tile, "Tile size, 8k+1");
  predict->add_option("--margin", po.margin, "Tile margin, multiple of 8 (default: from receptive field)");
  predict->add_flag("--scores", po.scores, "Also dump raw class scores");

  std::vector<fs::path> preds, refs;
  bool geometric = false, lenient = false;
  std::size_t background = kBackgroundClass;
  fs::path report;
  auto* evaluate = app.add_subcommand("evaluate", "Score label maps against references (four regimes)");
  evaluate->add_option("-p,--pred", preds, "Predicted label maps")->required();
  evaluate->add_option("-r,--ref", refs, "Reference label maps, same order")->required();
  evaluate->add_flag("--geometric-f1", geometric, "Per-class F1 as sqrt(P*R) instead of 2PR/(P+R)");
  evaluate->add_flag("--lenient", lenient, "Unknown reference colours become ignore");
  evaluate->add_option("--background", background, "Class dropped by the 'no bk' regimes");
  evaluate->add_option("--report", report, "Machine-readable key/value report");

  GradCheckConfig gc;
  std::string kinds;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every layer");
  gradcheck->add_option("--seed", gc.seed);
  gradcheck->add_option("--trials", gc.trials, "Random shapes per layer kind");
  gradcheck->add_option("--kinds", kinds, "Comma-separated subset of layer kinds");
  gradcheck->add_option("--inject-fault", gc.inject_fault, "Corrupt this kind's backward (negative control)");

  SynthConfig sc;
  fs::path synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset with manifest");
  synth->add_option("--seed", sc.seed);
  synth->add_option("-n,--tiles", sc.tiles, "Number of tiles");
  synth->add_option("--size", sc.tile_size, "Tile side length");
  synth->add_option("--validation", sc.validation_tiles, "Validation tiles (default: a quarter)");
  synth->add_option("-o,--out", synth_out, "Output directory")->required();

  BenchOptions bo;
  auto* bench = app.add_subcommand("benchmark", "Seconds per image for each method");
  bench->add_option("--fpl", bo.fpl, "FPL checkpoint");
  bench->add_option("--spl", bo.spl, "SPL checkpoint");
  bench->add_option("--pc", bo.pc, "PC checkpoint");
  bench->add_option("-i,--image", bo.image, "Spectral image (default: random)");
  bench->add_option("--size", bo.size, "Side of the random image");
  bench->add_option("--strides", bo.strides, "PC strides, comma-separated");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(train_config, overrides, train_out);
    if (*predict) return cmd_predict(po);
    if (*evaluate) return cmd_evaluate(preds, refs, geometric, lenient, background, report);
    if (*gradcheck) {
      if (!kinds.empty()) {
        std::stringstream ss(kinds);
        std::string k;
        while (std::getline(ss, k, ',')) gc.kinds.push_back(k);
      }
      return cmd_gradcheck(gc);
    }
    if (*synth) return cmd_synth(sc, synth_out);
    if (*bench) return cmd_benchmark(bo);
  } catch (const ConfigError& e) {
    std::cerr << "dlbl: configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "dlbl: data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "dlbl: numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ShapeError& e) {
    std::cerr << "dlbl: shape error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "dlbl: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
