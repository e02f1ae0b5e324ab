#include "eegdg/cli.hpp"

#include <fnmatch.h>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "binary_io.hpp"
#include "eegdg/config.hpp"
#include "eegdg/errors.hpp"
#include "eegdg/eval.hpp"
#include "eegdg/signal.hpp"
#include "eegdg/synthetic.hpp"
#include "eegdg/trainer.hpp"
#include "json.hpp"

namespace eegdg {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kVersion = "0.1.0";

struct CommonOptions {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  bool strict = false;
};

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

json file_entry(const fs::path& p) {
  const auto bytes = io::read_file(p);
  return json{{"path", p.string()}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}};
}

bool has_wildcard(const std::string& s) { return s.find_first_of("*?[") != std::string::npos; }

// Files named on the command line; directories contribute their *.edg1
// files and wildcard patterns are matched against the parent directory.
std::vector<fs::path> expand_inputs(const std::vector<std::string>& args, const char* what) {
  std::vector<fs::path> out;
  for (const std::string& a : args) {
    const fs::path p(a);
    std::vector<fs::path> found;
    if (has_wildcard(p.filename().string())) {
      const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
      if (fs::is_directory(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
          if (e.is_regular_file() && fnmatch(p.filename().c_str(), e.path().filename().c_str(), 0) == 0) {
            found.push_back(e.path());
          }
        }
      }
      if (found.empty()) throw IoError(std::string(what) + ": no file matches " + a);
    } else if (fs::is_directory(p)) {
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".edg1") found.push_back(e.path());
      }
      if (found.empty()) throw IoError(std::string(what) + ": no .edg1 files in " + a);
    } else {
      if (!fs::is_regular_file(p)) throw IoError(std::string(what) + ": missing file " + a);
      found.push_back(p);
    }
    std::sort(found.begin(), found.end());
    out.insert(out.end(), found.begin(), found.end());
  }
  if (out.empty()) throw IoError(std::string(what) + ": no input files given");
  return out;
}

std::vector<DomainDataset> load_domains(const std::vector<fs::path>& files) {
  std::vector<DomainDataset> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_domain_file(f));
  return out;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
};

Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

json report_json(const MetricsReport& r) {
  return json{{"accuracy", r.accuracy}, {"kappa", r.kappa}, {"n_samples", r.n_samples}, {"confusion", r.confusion}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

class Run {
 public:
  Run(std::string command, const CommonOptions& opts, std::vector<std::string> argv)
      : command_(std::move(command)), opts_(opts), argv_(std::move(argv)), started_(utc_timestamp()) {
    if (!opts.config.empty()) {
      if (!fs::is_regular_file(opts.config)) throw IoError("missing config file " + opts.config);
      config = load_config(opts.config);
      input(opts.config);
    }
    if (opts.seed) {
      config.sim.seed = *opts.seed;
      config.train.seed = *opts.seed;
      config.baselines.seed = *opts.seed;
      config.split_seed = *opts.seed;
    }
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("EEGDG_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end == env || *end != '\0' || v < 1) {
        throw ConfigError("EEGDG_THREADS must be a positive integer, got '" + std::string(env) + "'",
                          "EEGDG_THREADS");
      }
      threads = std::min(threads, static_cast<std::size_t>(v));
    }
    if (opts.strict) threads = 1;
    threads_ = threads;
    set_num_threads(threads);
  }

  void input(const fs::path& p) { inputs_.push_back(file_entry(p)); }
  void inputs(const std::vector<fs::path>& ps) {
    for (const auto& p : ps) input(p);
  }
  void output(const fs::path& p) { outputs_.push_back(p); }
  // Seed that drives the command's randomness, recorded in the manifest.
  void seed(std::uint64_t s) { seed_ = s; }
  bool strict() const { return opts_.strict; }

  void write_manifest(const fs::path& path) {
    json m;
    m["tool"] = "eegdg";
    m["version"] = kVersion;
    m["command"] = command_;
    m["argv"] = argv_;
    m["seed"] = seed_ ? json(*seed_) : json(nullptr);
    m["strict_determinism"] = opts_.strict;
    m["threads"] = threads_;
    m["config"] = json::parse(config_to_json(config));
    m["inputs"] = inputs_;
    json outs = json::array();
    for (const auto& p : outputs_) outs.push_back(file_entry(p));
    m["outputs"] = outs;
    m["started_at"] = started_;
    m["finished_at"] = utc_timestamp();
    write_text(path, m.dump(2) + "\n");
  }

  RunConfig config;

 private:
  std::string command_;
  CommonOptions opts_;
  std::vector<std::string> argv_;
  std::string started_;
  std::size_t threads_ = 1;
  std::optional<std::uint64_t> seed_;
  json inputs_ = json::array();
  std::vector<fs::path> outputs_;
};

fs::path manifest_for_file(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

void cmd_simulate(Run& run, const fs::path& out_dir, std::ostream& out) {
  run.seed(run.config.sim.seed);
  ensure_dir(out_dir);
  const auto sim = generate(run.config.sim);
  for (std::size_t i = 0; i < sim.sources.size(); ++i) {
    const fs::path p = out_dir / ("source_" + std::to_string(i) + ".edg1");
    save_domain_file(sim.sources[i], p);
    run.output(p);
  }
  for (std::size_t i = 0; i < sim.targets.size(); ++i) {
    const fs::path p = out_dir / ("target_" + std::to_string(i) + ".edg1");
    save_domain_file(sim.targets[i], p);
    run.output(p);
  }
  run.write_manifest(out_dir / "manifest.json");
  out << "wrote " << sim.sources.size() << " source and " << sim.targets.size() << " target domains to "
      << out_dir.string() << "\n";
}

void cmd_preprocess(Run& run, const fs::path& raw, const fs::path& out_dir, std::ostream& out) {
  if (!fs::is_regular_file(raw)) throw IoError("missing file " + raw.string());
  run.input(raw);
  run.seed(run.config.split_seed);
  ensure_dir(out_dir);
  const RawRecording rec = load_raw_file(raw);
  const auto& c = run.config;
  DomainDataset ds = preprocess(rec, c.preprocess, c.domain_id);
  std::vector<DomainDataset> parts;
  if (c.split_domains > 1) {
    parts = split_into_domains(ds, c.split_domains, c.split_seed);
  } else {
    parts.push_back(std::move(ds));
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    parts[i].domain_id = c.domain_id + static_cast<int>(i);
    const fs::path p = out_dir / ("domain_" + std::to_string(parts[i].domain_id) + ".edg1");
    save_domain_file(parts[i], p);
    run.output(p);
  }
  run.write_manifest(out_dir / "manifest.json");
  out << "wrote " << parts.size() << " domain file(s) to " << out_dir.string() << "\n";
}

double mean_accuracy(EegDgModel& model, const std::vector<DomainDataset>& targets) {
  double acc = 0.0;
  for (const auto& t : targets) acc += evaluate_on_target(model, t).accuracy;
  return acc / static_cast<double>(targets.size());
}

void cmd_train(Run& run, const std::vector<fs::path>& source_files, const std::vector<fs::path>& monitor_files,
               const fs::path& out_dir, std::ostream& out) {
  run.inputs(source_files);
  run.inputs(monitor_files);
  const auto sources = load_domains(source_files);
  const auto monitor = load_domains(monitor_files);
  const TrainConfig& cfg = run.config.train;
  run.seed(cfg.seed);
  if (cfg.early_metrics && monitor.empty()) {
    throw ConfigError("early metrics need target files passed with --monitor", "train.early_metrics");
  }
  ensure_dir(out_dir);
  const fs::path metrics = out_dir / "metrics.jsonl";
  fs::remove(metrics);

  TrainOptions opts;
  opts.metrics_path = metrics;
  opts.record_wall_ms = !run.strict();
  opts.checkpoint_dir = out_dir;
  if (!monitor.empty()) {
    opts.epoch_hook = [&](EegDgModel& m, std::size_t) { return mean_accuracy(m, monitor); };
  }
  TrainResult res = train(sources, cfg, opts);
  const fs::path model = out_dir / "model.edgm";
  save_checkpoint(res.model, model);
  run.output(model);
  run.output(metrics);
  run.write_manifest(out_dir / "manifest.json");
  const auto& last = res.log.back();
  out << "trained " << res.log.size() << " epochs, final loss " << last.total << ", avg_mmd " << last.avg_mmd
      << "\n";
}

void cmd_evaluate(Run& run, const fs::path& checkpoint, const std::vector<fs::path>& target_files,
                  const fs::path& out_path, std::ostream& out) {
  if (!fs::is_regular_file(checkpoint)) throw IoError("missing file " + checkpoint.string());
  run.input(checkpoint);
  run.inputs(target_files);
  EegDgModel model = load_checkpoint(checkpoint);
  json targets = json::array();
  std::vector<double> accs, kappas;
  for (const auto& f : target_files) {
    const DomainDataset t = load_domain_file(f);
    const MetricsReport r = evaluate_on_target(model, t);
    json j = {{"path", f.string()}, {"domain_id", t.domain_id}};
    j.update(report_json(r));
    targets.push_back(j);
    accs.push_back(r.accuracy);
    kappas.push_back(r.kappa);
    out << f.filename().string() << "  acc " << r.accuracy << "  kappa " << r.kappa << "\n";
  }
  const Summary a = summarize(accs), k = summarize(kappas);
  json doc;
  doc["targets"] = targets;
  doc["summary"] = {{"accuracy_mean", a.mean}, {"accuracy_std", a.std}, {"kappa_mean", k.mean}, {"kappa_std", k.std}};
  ensure_parent(out_path);
  write_text(out_path, doc.dump(2) + "\n");
  run.output(out_path);
  run.write_manifest(manifest_for_file(out_path));
  out << "mean accuracy " << a.mean << " ± " << a.std << ", kappa " << k.mean << " ± " << k.std << "\n";
}

void cmd_baselines(Run& run, const std::vector<fs::path>& source_files, const std::vector<fs::path>& target_files,
                   const std::optional<fs::path>& checkpoint, const fs::path& out_path, std::ostream& out) {
  run.inputs(source_files);
  run.inputs(target_files);
  run.seed(run.config.baselines.seed);
  const DomainDataset pooled = pool_domains(load_domains(source_files));
  const auto targets = load_domains(target_files);

  json methods = json::object();
  auto add_row = [&](const std::string& name, const std::vector<double>& accs) {
    const Summary s = summarize(accs);
    methods[name] = {{"per_target", accs}, {"mean", s.mean}, {"std", s.std}};
    out << name;
    for (double a : accs) out << "  " << a;
    out << "  | " << s.mean << " ± " << s.std << "\n";
  };
  if (checkpoint) {
    if (!fs::is_regular_file(*checkpoint)) throw IoError("missing file " + checkpoint->string());
    run.input(*checkpoint);
    EegDgModel model = load_checkpoint(*checkpoint);
    std::vector<double> accs;
    for (const auto& t : targets) accs.push_back(evaluate_on_target(model, t).accuracy);
    add_row("eeg-dg", accs);
  }
  for (const BaselineSpec& spec : run.config.baselines.specs()) {
    std::vector<double> accs;
    for (const auto& t : targets) accs.push_back(accuracy(baseline_fit_predict(spec, pooled, t), t.y));
    add_row(baseline_name(spec), accs);
  }
  json doc;
  json names = json::array();
  for (const auto& f : target_files) names.push_back(f.string());
  doc["targets"] = names;
  doc["methods"] = methods;
  ensure_parent(out_path);
  write_text(out_path, doc.dump(2) + "\n");
  run.output(out_path);
  run.write_manifest(manifest_for_file(out_path));
}

void cmd_ablate(Run& run, const std::vector<fs::path>& source_files, const std::vector<fs::path>& target_files,
                const fs::path& out_dir, std::ostream& out) {
  run.inputs(source_files);
  run.inputs(target_files);
  const auto sources = load_domains(source_files);
  const auto targets = load_domains(target_files);
  run.seed(run.config.train.seed);
  ensure_dir(out_dir);

  struct Variant {
    const char* name;
    bool mir;
    bool cir;
  };
  const Variant variants[] = {{"none", false, false}, {"mir", true, false}, {"cir", false, true}, {"full", true, true}};
  json doc = json::object();
  for (const Variant& v : variants) {
    json runs = json::array();
    std::vector<double> means;
    for (std::size_t s = 0; s < run.config.ablate_seeds; ++s) {
      TrainConfig cfg = run.config.train;
      cfg.seed = run.config.train.seed + s;
      if (!v.mir) cfg.beta1 = 0.0;
      if (!v.cir) cfg.beta2 = 0.0;
      TrainOptions opts;
      const fs::path metrics = out_dir / (std::string(v.name) + "_seed_" + std::to_string(cfg.seed) + ".jsonl");
      fs::remove(metrics);
      opts.metrics_path = metrics;
      opts.record_wall_ms = !run.strict();
      TrainResult res = train(sources, cfg, opts);
      std::vector<double> accs;
      for (const auto& t : targets) accs.push_back(evaluate_on_target(res.model, t).accuracy);
      const Summary sm = summarize(accs);
      means.push_back(sm.mean);
      runs.push_back({{"seed", cfg.seed},
                      {"per_target", accs},
                      {"mean", sm.mean},
                      {"final_avg_mmd", res.log.back().avg_mmd},
                      {"metrics", metrics.filename().string()}});
      run.output(metrics);
    }
    const Summary over = summarize(means);
    doc[v.name] = {{"beta1", v.mir ? run.config.train.beta1 : 0.0},
                   {"beta2", v.cir ? run.config.train.beta2 : 0.0},
                   {"runs", runs},
                   {"mean", over.mean},
                   {"std", over.std}};
    out << v.name << "  mean accuracy " << over.mean << " ± " << over.std << "\n";
  }
  const fs::path table = out_dir / "ablation.json";
  write_text(table, doc.dump(2) + "\n");
  run.output(table);
  run.write_manifest(out_dir / "manifest.json");
}

void cmd_export(Run& run, const fs::path& checkpoint, const std::vector<fs::path>& source_files,
                const std::vector<fs::path>& target_files, const std::string& stage, const fs::path& out_path,
                std::ostream& out) {
  const FeatureStage st = feature_stage_from_string(stage);
  if (!fs::is_regular_file(checkpoint)) throw IoError("missing file " + checkpoint.string());
  run.input(checkpoint);
  run.inputs(source_files);
  run.inputs(target_files);
  EegDgModel model = load_checkpoint(checkpoint);
  ensure_parent(out_path);
  const std::size_t rows =
      export_features(model, load_domains(source_files), load_domains(target_files), st, out_path);
  run.output(out_path);
  run.write_manifest(manifest_for_file(out_path));
  out << "wrote " << rows << " rows to " << out_path.string() << "\n";
}

int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e)) return 5;
  return 1;
}

void print_error(std::ostream& err, const std::string& kind, const std::string& message,
                 const std::string& key = {}) {
  json j = {{"error", kind}, {"message", message}};
  if (!key.empty()) j["key"] = key;
  err << j.dump(-1, ' ', false, json::error_handler_t::replace) << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-source domain generalization for EEG decoding", "eegdg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, bool out_is_dir) {
    sub->add_option("--seed", common.seed, "Seed for data generation, splitting and training");
    sub->add_option("--out", common.out, out_is_dir ? "Output directory" : "Output file")->required();
    sub->add_option("--config", common.config, "Flat JSON config with dotted keys");
    sub->add_flag("--strict-determinism", common.strict, "Serial execution, no wall-clock fields in logs");
  };

  auto* simulate = app.add_subcommand("simulate", "Generate synthetic source and target domains");
  add_common(simulate, true);

  std::string raw;
  auto* prep = app.add_subcommand("preprocess", "Band-pass, crop, scale and split a raw recording");
  prep->add_option("raw", raw, "EDR1 raw recording")->required();
  add_common(prep, true);

  std::vector<std::string> sources, targets, monitor;
  auto* trn = app.add_subcommand("train", "Train a model on labeled source domains");
  trn->add_option("sources", sources, "Source domain files, directories or patterns")->required();
  trn->add_option("--monitor", monitor, "Target domains scored after each epoch when early metrics are on");
  add_common(trn, true);

  std::string checkpoint;
  auto* evl = app.add_subcommand("evaluate", "Score a checkpoint on target domains");
  evl->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  evl->add_option("targets", targets, "Target domain files, directories or patterns")->required();
  add_common(evl, false);

  std::string base_checkpoint;
  auto* base = app.add_subcommand("baselines", "Compare classical baselines on target domains");
  base->add_option("--sources", sources, "Source domains")->required();
  base->add_option("--targets", targets, "Target domains")->required();
  base->add_option("--checkpoint", base_checkpoint, "Also score this checkpoint");
  add_common(base, false);

  auto* abl = app.add_subcommand("ablate", "Train the none/mir/cir/full variants and score them");
  abl->add_option("--sources", sources, "Source domains")->required();
  abl->add_option("--targets", targets, "Target domains")->required();
  add_common(abl, true);

  std::string stage = "fused";
  auto* exp = app.add_subcommand("export", "Write learned features and their 2-D PCA projection as CSV");
  exp->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  exp->add_option("--sources", sources, "Source domains")->required();
  exp->add_option("--targets", targets, "Target domains");
  exp->add_option("--stage", stage, "extractor, branch or fused");
  add_common(exp, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return 2;
  }

  std::vector<std::string> args(argv, argv + argc);
  try {
    CLI::App* sub = app.get_subcommands().front();
    Run run(sub->get_name(), common, args);
    const fs::path out_path(common.out);
    if (sub == simulate) {
      cmd_simulate(run, out_path, out);
    } else if (sub == prep) {
      cmd_preprocess(run, raw, out_path, out);
    } else if (sub == trn) {
      const auto mon = monitor.empty() ? std::vector<fs::path>{} : expand_inputs(monitor, "monitor");
      cmd_train(run, expand_inputs(sources, "sources"), mon, out_path, out);
    } else if (sub == evl) {
      cmd_evaluate(run, checkpoint, expand_inputs(targets, "targets"), out_path, out);
    } else if (sub == base) {
      std::optional<fs::path> ck;
      if (!base_checkpoint.empty()) ck = base_checkpoint;
      cmd_baselines(run, expand_inputs(sources, "sources"), expand_inputs(targets, "targets"), ck, out_path, out);
    } else if (sub == abl) {
      cmd_ablate(run, expand_inputs(sources, "sources"), expand_inputs(targets, "targets"), out_path, out);
    } else if (sub == exp) {
      const auto tg = targets.empty() ? std::vector<fs::path>{} : expand_inputs(targets, "targets");
      cmd_export(run, checkpoint, expand_inputs(sources, "sources"), tg, stage, out_path, out);
    }
  } catch (const ConfigError& e) {
    print_error(err, e.kind(), e.what(), e.key());
    return 2;
  } catch (const Error& e) {
    print_error(err, e.kind(), e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    print_error(err, "internal", e.what());
    return 1;
  }
  return 0;
}

}  // namespace eegdg
