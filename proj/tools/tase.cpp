// Command-line front end: dataset generation, training, evaluation, and the
// ablation / sensitivity-sweep harnesses.

#include "tase/config.hpp"
#include "tase/datagen.hpp"
#include "tase/eval.hpp"
#include "tase/report.hpp"
#include "tase/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace tase;

namespace {

struct CommonOpts {
  std::string preset = "desk";
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<int64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> features;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--preset", o.preset, "configuration preset: cifar10lt, cifar100lt, desk")
      ->check(CLI::IsMember({"cifar10lt", "cifar100lt", "desk"}));
  cmd->add_option("--config", o.config_file, "key = value configuration file");
  cmd->add_option("--set", o.sets, "override a single key (key=value), repeatable");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--mode", o.mode, "baseline | tau_only | weight_only | full");
  cmd->add_option("--features", o.features, "evaluation features: encoder | projection")
      ->check(CLI::IsMember({"encoder", "projection"}));
}

config::ExperimentConfig resolve(const CommonOpts& o) {
  auto cfg = config::ExperimentConfig::preset(o.preset);
  if (!o.config_file.empty()) cfg.load_file(o.config_file);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (o.mode) cfg.set("mode", *o.mode);
  if (o.features) cfg.set("features", *o.features);
  return cfg;
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

int max_threads(int requested) {
  if (const char* env = std::getenv("TASE_THREADS")) {
    const int cap = std::max(1, std::atoi(env));
    return std::min(requested, cap);
  }
  return requested;
}

datagen::DatasetBundle load_bundle(const fs::path& train_path, const datagen::GroupScheme& scheme) {
  datagen::DatasetBundle b;
  b.train = datagen::Dataset::load(train_path, &scheme);
  b.test = datagen::Dataset::load(io::sibling_path(train_path, "test"), &scheme);
  b.pool = datagen::Dataset::load(io::sibling_path(train_path, "pool"), &scheme);
  return b;
}

// ----------------------------- generate -----------------------------------

int cmd_generate(const config::ExperimentConfig& cfg, const fs::path& out) {
  write_text_file(fs::path(out.string() + ".config"), cfg.snapshot());
  const auto bundle = cfg.make_bundle();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  bundle.train.save(out);
  bundle.test.save(io::sibling_path(out, "test"));
  bundle.pool.save(io::sibling_path(out, "pool"));
  std::cout << "wrote " << out.string() << " (N=" << bundle.train.size() << ", C=" << bundle.train.num_classes()
            << "), test/pool siblings" << std::endl;
  return 0;
}

// ------------------------------- train ------------------------------------

std::optional<trainer::TrainState> find_resume_state(const fs::path& run_dir, const trainer::TrainConfig& tc) {
  int best_epoch = -1;
  fs::path best;
  const std::regex pat("trainstate_([0-9]+)\\.bin");
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pat)) {
      const int e = std::stoi(m[1]);
      if (e > best_epoch) {
        best_epoch = e;
        best = entry.path();
      }
    }
  }
  if (best_epoch < 0) return std::nullopt;
  return trainer::load_train_state(best, tc);
}

int cmd_train(const config::ExperimentConfig& cfg, const fs::path& data_path, const fs::path& out_dir,
              const std::string& resume_dir) {
  const auto tc = cfg.train_config();
  const auto dataset = datagen::Dataset::load(data_path, nullptr);
  trainer::RunDir dir(out_dir);
  dir.write_text("config.snapshot", cfg.snapshot());

  std::optional<trainer::TrainState> resume;
  if (!resume_dir.empty()) {
    resume = find_resume_state(resume_dir, tc);
    if (!resume) throw DataError("no trainstate_*.bin found under " + resume_dir);
    std::cout << "resuming at epoch " << resume->next_epoch << std::endl;
  }

  const auto result = trainer::run(tc, dataset, &dir, resume ? &*resume : nullptr);
  std::cout << "trained " << tc.epochs << " epochs (" << trainer::mode_name(tc.mode) << ") in "
            << result.history.wall_seconds << "s; final mean loss " << result.history.epochs.back().mean_loss
            << "\nrun dir: " << dir.path().string() << std::endl;
  return 0;
}

// -------------------------------- eval ------------------------------------

eval::FullReport run_battery(const config::ExperimentConfig& cfg, const model::ModelParams<float>& params,
                             const datagen::DatasetBundle& bundle, eval::BatteryInputs* inputs_out = nullptr) {
  const auto kind = cfg.features();
  eval::BatteryInputs in;
  in.train_emb = eval::embed(params, bundle.train, kind);
  in.test_emb = eval::embed(params, bundle.test, kind);
  in.pool_emb = eval::embed(params, bundle.pool, kind);
  auto copy_labels = [](const datagen::Dataset& d) {
    return std::vector<uint32_t>(d.eval_labels().begin(), d.eval_labels().end());
  };
  in.train_labels = copy_labels(bundle.train);
  in.test_labels = copy_labels(bundle.test);
  in.pool_labels = copy_labels(bundle.pool);
  in.num_classes = bundle.train.num_classes();
  in.groups = bundle.train.group_of_class();
  auto rep = eval::evaluate_battery(in, cfg.battery_settings());
  if (inputs_out) *inputs_out = std::move(in);
  return rep;
}

void write_eval_outputs(const config::ExperimentConfig& cfg, const eval::FullReport& rep,
                        const eval::BatteryInputs& in, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  // named so it cannot clobber a run directory's training snapshot
  write_text_file(out_dir / "eval_config.snapshot", cfg.snapshot());
  write_text_file(out_dir / "report.json", report::report_json(rep, cfg.raw("features")).dump(2) + "\n");

  // Plot data: top-2 principal components of the train embeddings, colored by
  // true label and by a fresh pseudo-label clustering.
  pseudo::KmeansConfig kc;
  kc.k = static_cast<int>(cfg.get_int("kmeans_k"));
  if (kc.k == 0) kc.k = in.num_classes;
  kc.max_iter = static_cast<int>(cfg.get_int("kmeans_max_iter"));
  kc.tol = cfg.get_double("kmeans_tol");
  kc.restarts = static_cast<int>(cfg.get_int("kmeans_restarts"));
  kc.seed = derive_seed(static_cast<uint64_t>(cfg.get_int("seed")), "pca-kmeans");
  const auto ps = pseudo::kmeans(in.train_emb, kc);
  write_text_file(out_dir / "pca2d.csv", eval::pca2d_csv(in.train_emb, in.train_labels, ps.assignment));
  eval::save_embeddings(in.train_emb, in.train_labels, out_dir / "emb_train.bin");
}

void print_report(const eval::FullReport& rep) {
  for (const auto& b : rep.benchmarks) {
    std::printf("%-8s overall %6.2f%%  head %6.2f%%  mid %6.2f%%  tail %6.2f%%  range %5.2f\n", b.name.c_str(),
                100 * b.overall, 100 * b.head, 100 * b.mid, 100 * b.tail, 100 * b.range);
  }
}

int cmd_eval(const config::ExperimentConfig& cfg, const std::string& run_dir, const std::string& data_path,
             const std::string& emb_train, const std::string& emb_test, const std::string& emb_pool,
             std::string out_dir) {
  if (!run_dir.empty()) {
    if (data_path.empty()) throw ConfigError("eval: --run requires --data");
    const auto params = model::load_checkpoint(fs::path(run_dir) / "checkpoint.bin");
    const auto bundle = load_bundle(data_path, cfg.group_scheme());
    if (out_dir.empty()) out_dir = run_dir;
    eval::BatteryInputs in;
    const auto rep = run_battery(cfg, params, bundle, &in);
    write_eval_outputs(cfg, rep, in, out_dir);
    print_report(rep);
    return 0;
  }

  if (emb_train.empty() || emb_test.empty())
    throw ConfigError("eval: pass either --run + --data, or --emb-train + --emb-test [+ --emb-pool]");
  if (out_dir.empty()) throw ConfigError("eval: --out is required with embedding dumps");
  const auto train = eval::load_embeddings(emb_train);
  const auto test = eval::load_embeddings(emb_test);
  eval::EmbeddingDump pool;
  if (!emb_pool.empty()) {
    pool = eval::load_embeddings(emb_pool);
  } else {
    std::cerr << "note: no --emb-pool given; using the test embeddings as the probe pool" << std::endl;
    pool = test;
  }

  eval::BatteryInputs in;
  in.train_emb = train.vectors;
  in.train_labels = train.labels;
  in.test_emb = test.vectors;
  in.test_labels = test.labels;
  in.pool_emb = pool.vectors;
  in.pool_labels = pool.labels;
  uint32_t c_max = 0;
  for (uint32_t l : in.train_labels) c_max = std::max(c_max, l);
  for (uint32_t l : in.test_labels) c_max = std::max(c_max, l);
  in.num_classes = static_cast<int>(c_max) + 1;
  std::vector<int> counts(static_cast<size_t>(in.num_classes), 0);
  for (uint32_t l : in.train_labels) ++counts[l];
  const auto scheme = cfg.raw("group_scheme") == "auto"
                          ? datagen::GroupScheme(datagen::default_ratio(in.num_classes))
                          : cfg.group_scheme();
  in.groups = datagen::group_split(counts, scheme);

  const auto rep = eval::evaluate_battery(in, cfg.battery_settings());
  write_eval_outputs(cfg, rep, in, out_dir);
  print_report(rep);
  return 0;
}

// ------------------------- sweeps & ablation -------------------------------

struct RunRow {
  std::string label;  // axis value or mode name
  uint64_t seed;
  eval::FullReport report;
};

std::string csv_row(const std::string& a, const std::string& b, const eval::BenchmarkReport& r) {
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", a.c_str(), b.c_str(), r.name.c_str(),
                r.overall, r.head, r.mid, r.tail, r.range);
  return buf;
}

RunRow execute_run(config::ExperimentConfig cfg, const datagen::DatasetBundle& bundle, const fs::path& run_dir,
                   const std::string& label) {
  trainer::RunDir dir(run_dir);
  dir.write_text("config.snapshot", cfg.snapshot());
  const auto tc = cfg.train_config();
  const auto result = trainer::run(tc, bundle.train, &dir);
  RunRow row;
  row.label = label;
  row.seed = tc.seed;
  row.report = run_battery(cfg, result.params, bundle);
  return row;
}

int cmd_sweep(const config::ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
              const std::vector<int64_t>& seeds, const fs::path& data_path, const fs::path& out_dir, int parallel) {
  static const std::map<std::string, std::string> axis_key = {
      {"K", "kmeans_k"}, {"B", "warmup_epochs"}, {"F", "cluster_period"}, {"S", "horizon"}};
  const auto it = axis_key.find(axis);
  if (it == axis_key.end()) throw ConfigError("sweep: axis must be one of K, B, F, S");
  if (values.empty() || seeds.empty()) throw ConfigError("sweep: need at least one value and one seed");

  fs::create_directories(out_dir);
  write_text_file(out_dir / "config.snapshot", base.snapshot());
  const auto bundle = load_bundle(data_path, base.group_scheme());

  struct Job {
    std::string value;
    int64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& v : values)
    for (int64_t s : seeds) jobs.push_back({v, s});

  std::vector<RunRow> rows(jobs.size());
  const int workers = std::max(1, max_threads(parallel));
  std::atomic<size_t> next{0};
  auto work = [&]() {
    for (size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      auto cfg = base;
      cfg.set(it->second, jobs[j].value);
      cfg.set("seed", std::to_string(jobs[j].seed));
      const fs::path run_dir = out_dir / ("run_" + axis + jobs[j].value + "_s" + std::to_string(jobs[j].seed));
      rows[j] = execute_run(std::move(cfg), bundle, run_dir, jobs[j].value);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::string csv = "axis,value,seed,benchmark,overall,head,mid,tail,range\n";
  for (const auto& row : rows)
    for (const auto& b : row.report.benchmarks) csv += csv_row(axis + "," + row.label, std::to_string(row.seed), b);

  // R summary: max - min over axis values of the seed-averaged overall accuracy.
  const size_t n_bench = rows.front().report.benchmarks.size();
  for (size_t bi = 0; bi < n_bench; ++bi) {
    double lo = 1.0, hi = 0.0;
    for (const auto& v : values) {
      double sum = 0.0;
      int n = 0;
      for (const auto& row : rows)
        if (row.label == v) {
          sum += row.report.benchmarks[bi].overall;
          ++n;
        }
      const double avg = sum / n;
      lo = std::min(lo, avg);
      hi = std::max(hi, avg);
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,R,,%s,%.6f,,,,\n", axis.c_str(),
                  rows.front().report.benchmarks[bi].name.c_str(), hi - lo);
    csv += buf;
  }
  write_text_file(out_dir / "sweep.csv", csv);
  std::cout << "wrote " << (out_dir / "sweep.csv").string() << std::endl;
  return 0;
}

int cmd_ablate(const config::ExperimentConfig& base, const std::vector<int64_t>& seeds, const fs::path& data_path,
               const fs::path& out_dir, int parallel) {
  if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
  static const char* kModes[] = {"baseline", "tau_only", "weight_only", "full"};

  fs::create_directories(out_dir);
  write_text_file(out_dir / "config.snapshot", base.snapshot());
  const auto bundle = load_bundle(data_path, base.group_scheme());

  struct Job {
    std::string mode;
    int64_t seed;
  };
  std::vector<Job> jobs;
  for (int64_t s : seeds)
    for (const char* m : kModes) jobs.push_back({m, s});

  std::vector<RunRow> rows(jobs.size());
  const int workers = std::max(1, max_threads(parallel));
  std::atomic<size_t> next{0};
  auto work = [&]() {
    for (size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      auto cfg = base;
      cfg.set("mode", jobs[j].mode);
      cfg.set("seed", std::to_string(jobs[j].seed));
      const fs::path run_dir = out_dir / ("run_" + jobs[j].mode + "_s" + std::to_string(jobs[j].seed));
      rows[j] = execute_run(std::move(cfg), bundle, run_dir, jobs[j].mode);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::string csv = "mode,seed,benchmark,overall,head,mid,tail,range\n";
  for (const auto& row : rows)
    for (const auto& b : row.report.benchmarks) csv += csv_row(row.label, std::to_string(row.seed), b);
  write_text_file(out_dir / "ablation.csv", csv);
  std::cout << "wrote " << (out_dir / "ablation.csv").string() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TASE: pseudo-label-driven per-sample temperatures and negative re-weighting for long-tailed "
               "self-supervised contrastive learning"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, eval_opts, sweep_opts, ablate_opts;

  auto* gen = app.add_subcommand("generate", "synthesize a long-tailed dataset (train + test/pool siblings)");
  std::string gen_out;
  add_common(gen, gen_opts);
  gen->add_option("--out", gen_out, "output dataset file")->required();

  auto* train = app.add_subcommand("train", "run the training loop, writing a run directory");
  std::string train_data, train_out, train_resume;
  add_common(train, train_opts);
  train->add_option("--data", train_data, "training dataset file")->required();
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--resume", train_resume, "run directory holding trainstate_*.bin to continue from");

  auto* evalc = app.add_subcommand("eval", "evaluate a run or an embedding dump (report.json + pca2d.csv)");
  std::string eval_run, eval_data, eval_out, eval_et, eval_ets, eval_ep;
  add_common(evalc, eval_opts);
  evalc->add_option("--run", eval_run, "run directory (expects checkpoint.bin)");
  evalc->add_option("--data", eval_data, "dataset file used for the run");
  evalc->add_option("--emb-train", eval_et, "training embedding dump");
  evalc->add_option("--emb-test", eval_ets, "test embedding dump");
  evalc->add_option("--emb-pool", eval_ep, "probe-pool embedding dump");
  evalc->add_option("--out", eval_out, "output directory (defaults to the run directory)");

  auto* sweep = app.add_subcommand("sweep", "train/eval over one hyperparameter axis, emitting sweep.csv");
  std::string sweep_axis, sweep_data, sweep_out;
  std::vector<std::string> sweep_values;
  std::vector<int64_t> sweep_seeds{1};
  int sweep_parallel = 1;
  add_common(sweep, sweep_opts);
  sweep->add_option("--axis", sweep_axis, "axis: K, B, F, or S")->required();
  sweep->add_option("--values", sweep_values, "axis values")->required()->delimiter(',');
  sweep->add_option("--seeds", sweep_seeds, "training seeds")->delimiter(',');
  sweep->add_option("--data", sweep_data, "dataset file")->required();
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--parallel", sweep_parallel, "worker threads (capped by TASE_THREADS)");

  auto* ablate = app.add_subcommand("ablate", "run all four modes per seed, emitting ablation.csv");
  std::string ablate_data, ablate_out;
  std::vector<int64_t> ablate_seeds{1};
  int ablate_parallel = 1;
  add_common(ablate, ablate_opts);
  ablate->add_option("--seeds", ablate_seeds, "training seeds")->delimiter(',');
  ablate->add_option("--data", ablate_data, "dataset file")->required();
  ablate->add_option("--out", ablate_out, "output directory")->required();
  ablate->add_option("--parallel", ablate_parallel, "worker threads (capped by TASE_THREADS)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(resolve(gen_opts), gen_out);
    if (train->parsed()) return cmd_train(resolve(train_opts), train_data, train_out, train_resume);
    if (evalc->parsed()) return cmd_eval(resolve(eval_opts), eval_run, eval_data, eval_et, eval_ets, eval_ep, eval_out);
    if (sweep->parsed())
      return cmd_sweep(resolve(sweep_opts), sweep_axis, sweep_values, sweep_seeds, sweep_data, sweep_out,
                       sweep_parallel);
    if (ablate->parsed())
      return cmd_ablate(resolve(ablate_opts), ablate_seeds, ablate_data, ablate_out, ablate_parallel);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << std::endl;
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << e.what() << std::endl;
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
