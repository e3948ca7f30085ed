// modeforge command line: data generation, decomposition, training,
// closed/open-set evaluation and the decomposition benchmark.
//
// Exit codes: 0 success, 1 invalid input (flags, config, files), 2 failure
// while running.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "modeforge/bench.hpp"
#include "modeforge/train.hpp"

using namespace modeforge;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MODEFORGE_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError("MODEFORGE_SEED must be a non-negative integer, got '" + std::string(env) + "'");
  }
  return 42;
}

/// Values from `--config` replace whatever the command line said.
void apply_config(CLI::App* sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("malformed config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + " must hold a JSON object of flag names");
  for (const auto& [key, value] : j.items()) {
    if (key == "config") throw UsageError("config files cannot nest --config");
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("config " + path + ": unknown key '" + key + "' for " + sub->get_name());
    std::vector<std::string> words;
    const auto word = [&](const nlohmann::json& v) {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
      if (v.is_number()) return v.dump();
      throw UsageError("config " + path + ": value for '" + key + "' must be a string, number or boolean");
    };
    if (value.is_array()) {
      for (const auto& v : value) words.push_back(word(v));
    } else {
      words.push_back(word(value));
    }
    opt->clear();
    for (const auto& w : words) opt->add_result(w);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config " + path + ": bad value for '" + key + "': " + e.what());
    }
  }
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Rounded to 12 significant digits so the JSON text matches the CSV files.
ordered_json num(double v) { return ordered_json::parse(format_double(v)); }

ordered_json num_array(const std::vector<double>& v) {
  ordered_json a = ordered_json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

ordered_json matrix_json(const Eigen::MatrixXi& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    ordered_json r = ordered_json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

Dataset load_input(const std::string& path) {
  try {
    return load_iq(path);
  } catch (const RfiqError& e) {
    throw UsageError(e.what());
  }
}

// ---- gen-data -----------------------------------------------------------------
struct GenArgs {
  std::string out;
  int devices = 10;
  int frames = 400;
  int frame_len = 256;
  double snr = 20.0;
  std::optional<std::uint64_t> seed;
};

int run_gen(const GenArgs& a) {
  FleetConfig c;
  c.n_devices = a.devices;
  c.frames_per_device = a.frames;
  c.frame_len = a.frame_len;
  c.snr_db = a.snr;
  c.seed = resolve_seed(a.seed);
  validate(c);
  const Fleet f = gen_fleet_with_profiles(c);
  save_iq(a.out, f.data);
  std::cout << "wrote " << f.data.size() << " frames of " << a.frame_len << " samples from " << a.devices
            << " devices to " << a.out << '\n';
  return 0;
}

// ---- decompose ----------------------------------------------------------------
struct DecomposeArgs {
  std::string in, out;
  int k = 3;
};

CenterSet centers_for(const Dataset& d, int k) {
  return select_centers(k, fundamental_index(d.sample_rate, d.symbol_rate), d.frame_len());
}

int run_decompose(const DecomposeArgs& a) {
  const Dataset raw = load_input(a.in);
  if (raw.layout != Layout::RawIq) throw UsageError(a.in + " already holds modes");
  if (raw.empty()) throw UsageError(a.in + " holds no frames");
  const CenterSet centers = centers_for(raw, a.k);
  const Dataset modes = vmd_preprocess(raw, centers);
  const Dataset back = vmd_collapse(modes);
  double worst = 0.0;
  for (std::size_t i = 0; i < raw.frames.size(); ++i) {
    worst = std::max(worst, (back.frames[i] - raw.frames[i]).norm() / std::max(raw.frames[i].norm(), 1e-300));
  }
  save_iq(a.out, modes);
  std::cout << "decomposed " << raw.size() << " frames into " << a.k << " modes; max reconstruction error "
            << format_double(worst) << '\n';
  return 0;
}

// ---- train --------------------------------------------------------------------
struct TrainArgs {
  std::string data, out, mode = "tdse", preset = "desk";
  int vmd_k = 0;
  int illegal = 0;
  int epochs = 50;
  int batch = 32;
  double lr = 1e-3;
  int patience = 10;
  std::optional<int> d_model;
  bool quiet = false;
  std::optional<std::uint64_t> seed;
};

struct Prepared {
  Dataset data;  // after optional decomposition
  LegalPartition part;
  Splits splits;
};

Prepared prepare(const Dataset& raw, int vmd_k, int illegal, std::uint64_t seed) {
  Prepared p;
  if (vmd_k > 0) {
    if (raw.layout != Layout::RawIq) throw UsageError("--vmd-k needs a raw IQ file; this one already holds modes");
    p.data = vmd_preprocess(raw, centers_for(raw, vmd_k));
  } else {
    p.data = raw;
  }
  p.part = legal_illegal_partition(p.data, illegal, seed);
  p.splits = stratified_split(p.part.legal, {.seed = seed});
  return p;
}

int run_train(const TrainArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed);
  const EncoderMode mode = parse_encoder_mode(a.mode);
  if (a.preset != "desk" && a.preset != "full") throw UsageError("--preset must be desk or full");
  const Dataset raw = load_input(a.data);
  const Prepared p = prepare(raw, a.vmd_k, a.illegal, seed);

  ModelConfig mc;
  if (a.preset == "desk") {
    mc = desk_model_config(p.part.legal.n_classes(), static_cast<int>(p.data.channels()), mode);
  } else {
    mc.mode = mode;
    mc.n_classes = p.part.legal.n_classes();
    mc.cfre.in_channels = static_cast<int>(p.data.channels());
  }
  if (a.d_model) mc.set_d_model(*a.d_model);
  mc.tdse.max_len = std::max(mc.tdse.max_len, static_cast<int>(p.data.frame_len()));
  validate(mc);

  TrainConfig tc;
  tc.adam.lr = a.lr;
  tc.plateau.patience = a.patience;
  tc.batch_size = a.batch;
  tc.max_epochs = a.epochs;
  tc.seed = seed;
  if (!a.quiet) {
    tc.on_epoch = [](const EpochRecord& r) {
      std::cout << "epoch " << r.epoch << "  train " << format_double(r.train_loss) << "  val "
                << format_double(r.val_loss) << "  val_acc " << format_double(r.val_accuracy) << "  lr "
                << format_double(r.lr) << (r.improved ? "  *" : "") << '\n';
    };
  }
  validate(tc);

  FingerprintNet net(mc, seed);
  const TrainResult res = train(net, p.splits.train, p.splits.val, tc);

  ordered_json history = ordered_json::array();
  for (const auto& r : res.history) {
    history.push_back({{"epoch", r.epoch},
                       {"train_loss", num(r.train_loss)},
                       {"val_loss", num(r.val_loss)},
                       {"val_accuracy", num(r.val_accuracy)},
                       {"lr", num(r.lr)}});
  }
  ordered_json extra;
  extra["data"] = {{"frames", raw.size()},
                   {"frame_len", raw.frame_len()},
                   {"class_names", raw.class_names},
                   {"vmd_k", a.vmd_k},
                   {"illegal", a.illegal},
                   {"seed", seed},
                   {"legal_classes", p.part.legal_classes},
                   {"illegal_classes", p.part.illegal_classes}};
  extra["training"] = {{"best_epoch", res.best_epoch},
                       {"best_val_loss", num(res.best_val_loss)},
                       {"stop_reason", res.stop_reason},
                       {"history", history}};
  save_model(a.out, net, extra);
  std::cout << "best epoch " << res.best_epoch << " (val loss " << format_double(res.best_val_loss) << ", "
            << res.stop_reason << "); saved " << a.out << '\n';
  return 0;
}

// ---- eval-closed / eval-open ----------------------------------------------------
struct EvalArgs {
  std::string model, data, metrics = "metrics.json", confusion = "confusion.csv", sweep = "sweep.csv";
  std::vector<double> temperatures, thresholds;
};

struct Loaded {
  FingerprintNet net;
  Prepared prepared;
};

Loaded load_for_eval(const EvalArgs& a) {
  nlohmann::json side;
  FingerprintNet net = [&] {
    try {
      return load_model(a.model, &side);
    } catch (const std::exception& e) {
      throw UsageError("cannot load model " + a.model + ": " + e.what());
    }
  }();
  if (!side.contains("extra") || !side["extra"].contains("data")) {
    throw UsageError(a.model + " sidecar lacks the data section written by train");
  }
  const auto& ds = side["extra"]["data"];
  const Dataset raw = load_input(a.data);
  if (ds.at("frames").get<Eigen::Index>() != raw.size() ||
      ds.at("class_names").get<std::vector<std::string>>() != raw.class_names ||
      ds.at("frame_len").get<Eigen::Index>() != raw.frame_len()) {
    throw UsageError(a.data + " is not the dataset " + a.model + " was trained on (class mapping mismatch)");
  }
  Prepared p = prepare(raw, ds.at("vmd_k").get<int>(), ds.at("illegal").get<int>(), ds.at("seed").get<std::uint64_t>());
  if (p.part.legal_classes != ds.at("legal_classes").get<std::vector<int>>()) {
    throw UsageError("legal class mapping differs from the one recorded in " + a.model);
  }
  return {std::move(net), std::move(p)};
}

int run_eval_closed(const EvalArgs& a) {
  Loaded l = load_for_eval(a);
  const Dataset& test = l.prepared.splits.test;
  const ClosedReport r = eval_closed(l.net, test);
  ordered_json m;
  m["command"] = "eval-closed";
  m["model"] = a.model;
  m["test_frames"] = test.size();
  m["accuracy"] = num(r.accuracy);
  m["macro_f1"] = num(r.macro_f1);
  ordered_json f1 = ordered_json::object();
  for (std::size_t c = 0; c < test.class_names.size(); ++c) f1[test.class_names[c]] = num(r.f1[static_cast<Eigen::Index>(c)]);
  m["f1"] = f1;
  m["confusion"] = matrix_json(r.confusion);
  write_json(a.metrics, m);
  std::ofstream out(a.confusion);
  if (!out) throw std::runtime_error("cannot write " + a.confusion);
  out << "truth\\predicted";
  for (const auto& n : test.class_names) out << ',' << n;
  out << '\n';
  for (Eigen::Index i = 0; i < r.confusion.rows(); ++i) {
    out << test.class_names[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < r.confusion.cols(); ++j) out << ',' << r.confusion(i, j);
    out << '\n';
  }
  std::cout << "closed-set accuracy " << format_double(r.accuracy) << ", macro-F1 " << format_double(r.macro_f1)
            << " on " << test.size() << " test frames\n";
  return 0;
}

int run_eval_open(const EvalArgs& a) {
  Loaded l = load_for_eval(a);
  const Prepared& p = l.prepared;
  if (p.part.illegal.empty()) throw UsageError(a.model + " was trained without held-out illegal devices (--illegal 0)");
  SweepGrid grid = default_sweep_grid();
  if (!a.temperatures.empty()) grid.temperatures = a.temperatures;
  if (!a.thresholds.empty()) grid.thresholds = a.thresholds;
  const SweepResult r = eval_open(l.net, p.splits.test, p.part.illegal, grid);
  write_sweep_csv(a.sweep, r);
  write_confusion_csv(a.confusion, r.best.confusion, p.splits.test.class_names);

  const double t = r.grid.temperatures[static_cast<std::size_t>(r.best_temperature)];
  const double tau = r.grid.thresholds[static_cast<std::size_t>(r.best_threshold)];
  ordered_json m;
  m["command"] = "eval-open";
  m["model"] = a.model;
  m["legal_frames"] = r.best.n_legal;
  m["illegal_frames"] = r.best.n_illegal;
  m["best_temperature"] = num(t);
  m["best_threshold"] = num(tau);
  m["best_accuracy"] = num(r.best.open_accuracy);
  m["best_correct_legal"] = r.best.n_correct_legal;
  m["best_correct_illegal"] = r.best.n_correct_illegal;
  m["temperatures"] = num_array(r.grid.temperatures);
  m["thresholds"] = num_array(r.grid.thresholds);
  m["confusion"] = matrix_json(r.best.confusion);
  write_json(a.metrics, m);
  std::cout << "open-set accuracy " << format_double(r.best.open_accuracy) << " at T = " << format_double(t)
            << ", tau = " << format_double(tau) << " (" << r.best.n_legal << " legal, " << r.best.n_illegal
            << " illegal frames)\n";
  return 0;
}

// ---- bench --------------------------------------------------------------------
struct BenchArgs {
  std::string out = "bench.csv", in;
  int frames = 1000;
  int frame_len = 256;
  int k_min = 2, k_max = 7;
  int warmup = 10;
  int repetitions = 1;
  double snr = 20.0;
  std::optional<std::uint64_t> seed;
};

int run_bench(const BenchArgs& a) {
  Dataset d;
  if (!a.in.empty()) {
    d = load_input(a.in);
    if (d.layout != Layout::RawIq) throw UsageError("bench needs raw IQ frames");
  } else {
    if (a.frames < 100) throw UsageError("--frames must be at least 100");
    const int devices = 10;
    d = gen_fleet(devices, (a.frames + devices - 1) / devices, a.frame_len, a.snr, resolve_seed(a.seed));
  }
  const auto n = std::min<Eigen::Index>(d.size(), a.in.empty() ? a.frames : d.size());
  std::vector<IQFrame> frames;
  for (Eigen::Index i = 0; i < n; ++i) {
    IQFrame f;
    f.samples = iq_samples(d.frames[static_cast<std::size_t>(i)]);
    f.sample_rate = d.sample_rate;
    f.symbol_rate = d.symbol_rate;
    frames.push_back(std::move(f));
  }
  BenchConfig c;
  c.k_min = a.k_min;
  c.k_max = a.k_max;
  c.warmup = a.warmup;
  c.repetitions = a.repetitions;
  c.k0 = fundamental_index(d.sample_rate, d.symbol_rate);
  const BenchReport r = bench_vmd(frames, c);
  write_bench_csv(a.out, r);
  std::cout << "host: " << r.host << "\n" << r.frames << " frames of " << r.frame_len << " samples, " << r.warmup
            << " warm-up, " << r.repetitions << " repetition(s)\n";
  std::cout << " k  lossless ms (mean/median)  ADMM ms (mean/median)  speedup (mean/median)\n";
  for (const auto& row : r.rows) {
    std::printf("%2d  %10.4f / %-10.4f  %9.4f / %-9.4f  %6.1f%% / %.1f%%\n", row.k, row.lossless_mean_ms,
                row.lossless_median_ms, row.admm_mean_ms, row.admm_median_ms, 100.0 * row.speedup_mean,
                100.0 * row.speedup_median);
  }
  return 0;
}

void add_seed(CLI::App* sub, std::optional<std::uint64_t>& seed) {
  sub->add_option("--seed", seed, "RNG seed (falls back to MODEFORGE_SEED, then 42)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RF fingerprinting toolkit: lossless VMD, FingerprintNet training and open-set evaluation"};
  app.require_subcommand(1);
  std::string config;

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic transmitter fleet");
  g->add_option("--out", gen.out, "output .rfiq file")->required();
  g->add_option("--devices", gen.devices, "number of transmitters")->check(CLI::Range(2, 65535));
  g->add_option("--frames-per-device", gen.frames, "frames per transmitter")->check(CLI::PositiveNumber);
  g->add_option("--frame-len", gen.frame_len, "samples per frame")->check(CLI::PositiveNumber);
  g->add_option("--snr", gen.snr, "AWGN SNR in dB");
  add_seed(g, gen.seed);

  DecomposeArgs dec;
  auto* d = app.add_subcommand("decompose", "split every frame into k lossless VMD modes");
  d->add_option("--in", dec.in, "raw IQ .rfiq file")->required()->check(CLI::ExistingFile);
  d->add_option("--out", dec.out, "output .rfiq file with mode channels")->required();
  d->add_option("--k", dec.k, "number of modes (2..7)")->check(CLI::Range(1, 7));

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a FingerprintNet");
  t->add_option("--data", tr.data, ".rfiq training data")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "checkpoint path (a .json sidecar is written next to it)")->required();
  t->add_option("--mode", tr.mode, "encoder: tdse or mlfe")->check(CLI::IsMember({"tdse", "mlfe"}));
  t->add_option("--vmd-k", tr.vmd_k, "decompose into k modes first (0 = raw IQ)")->check(CLI::Range(0, 7));
  t->add_option("--illegal", tr.illegal, "devices held out as unknown transmitters")->check(CLI::NonNegativeNumber);
  t->add_option("--epochs", tr.epochs, "maximum epochs")->check(CLI::PositiveNumber);
  t->add_option("--batch-size", tr.batch, "mini-batch size")->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.lr, "initial learning rate")->check(CLI::PositiveNumber);
  t->add_option("--patience", tr.patience, "epochs without improvement before the rate drops")->check(CLI::PositiveNumber);
  t->add_option("--preset", tr.preset, "model size: desk or full")->check(CLI::IsMember({"desk", "full"}));
  t->add_option("--d-model", tr.d_model, "override the feature width")->check(CLI::PositiveNumber);
  t->add_flag("--quiet", tr.quiet, "no per-epoch lines");
  add_seed(t, tr.seed);

  EvalArgs ec, eo;
  auto* c = app.add_subcommand("eval-closed", "closed-set accuracy and macro-F1 on the test split");
  auto* o = app.add_subcommand("eval-open", "temperature/threshold sweep with held-out devices");
  for (auto [sub, args] : {std::pair{c, &ec}, std::pair{o, &eo}}) {
    sub->add_option("--model", args->model, "checkpoint written by train")->required()->check(CLI::ExistingFile);
    sub->add_option("--data", args->data, "the .rfiq file used for training")->required()->check(CLI::ExistingFile);
    sub->add_option("--metrics", args->metrics, "metrics JSON output");
    sub->add_option("--confusion", args->confusion, "confusion matrix CSV output");
  }
  o->add_option("--sweep", eo.sweep, "grid CSV output");
  o->add_option("--temperatures", eo.temperatures, "temperature grid (default 0.3..5.0 step 0.1)")->delimiter(',');
  o->add_option("--thresholds", eo.thresholds, "threshold grid (default 0.800..1.000 step 0.001)")->delimiter(',');

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "time lossless VMD against ADMM-VMD");
  b->add_option("--out", be.out, "CSV output");
  b->add_option("--in", be.in, "raw IQ .rfiq file to time instead of generated frames")->check(CLI::ExistingFile);
  b->add_option("--frames", be.frames, "frames to time");
  b->add_option("--frame-len", be.frame_len, "samples per generated frame")->check(CLI::PositiveNumber);
  b->add_option("--k-min", be.k_min, "smallest mode count")->check(CLI::Range(2, 7));
  b->add_option("--k-max", be.k_max, "largest mode count")->check(CLI::Range(2, 7));
  b->add_option("--warmup", be.warmup, "untimed runs per k")->check(CLI::NonNegativeNumber);
  b->add_option("--repetitions", be.repetitions, "passes over the frames")->check(CLI::PositiveNumber);
  b->add_option("--snr", be.snr, "SNR of generated frames in dB");
  add_seed(b, be.seed);

  for (auto* sub : {g, d, t, c, o, b}) sub->add_option("--config", config, "JSON file of flag values; overrides the command line");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!config.empty()) apply_config(sub, config);
    if (sub == g) return run_gen(gen);
    if (sub == d) return run_decompose(dec);
    if (sub == t) return run_train(tr);
    if (sub == c) return run_eval_closed(ec);
    if (sub == o) return run_eval_open(eo);
    return run_bench(be);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
}
