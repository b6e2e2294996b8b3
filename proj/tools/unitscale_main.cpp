// Command-line front end: format catalog, SNR curves, scaling-factor queries,
// scaled-op verification, init histograms and training runs, all emitting
// CSV/JSON artifacts for offline plotting.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>
#include <vector>

#include "unitscale/float_format.hpp"
#include "unitscale/graph.hpp"
#include "unitscale/graph_json.hpp"
#include "unitscale/ops.hpp"
#include "unitscale/run_config.hpp"
#include "unitscale/snr.hpp"
#include "unitscale/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unitscale;

namespace {

constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 1 usage error, 2 verification failure, 3 divergence.
enum ExitCode { kOk = 0, kUsage = 1, kVerifyFail = 2, kDiverged = 3 };

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& content,
                std::vector<std::string>* outputs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (outputs) outputs->push_back(path.string());
}

struct ManifestClock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void write_manifest(const fs::path& dir, const std::string& command, const json& config,
                    std::uint64_t seed, const std::vector<std::string>& outputs,
                    double duration) {
  for (const std::string& f : outputs)
    if (!fs::exists(f) || fs::file_size(f) == 0)
      throw std::runtime_error("declared output missing or empty: " + f);
  json m;
  m["command"] = command;
  m["config"] = config;
  m["seed"] = seed;
  m["version"] = kVersion;
  m["outputs"] = outputs;
  m["duration_seconds"] = duration;
  std::ofstream out(dir / "manifest.json");
  out << m.dump(2) << "\n";
}

json format_to_json(const FloatFormat& f) {
  json j;
  j["name"] = f.name;
  j["id"] = f.id;
  j["exponent_bits"] = f.exponent_bits;
  j["mantissa_bits"] = f.mantissa_bits;
  j["bias_offset"] = f.bias_offset;
  j["max_exponent"] = f.max_exponent;
  j["min_exponent"] = f.min_exponent;
  j["supports_subnormals"] = f.supports_subnormals;
  j["max_value"] = f.max_value;
  j["min_normal"] = min_normal(f);
  return j;
}

int cmd_formats() {
  json j = json::array();
  for (const FloatFormat& f : format_catalog()) j.push_back(format_to_json(f));
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_snr(const std::vector<std::string>& names, double sigma_min, double sigma_max,
            int points, std::int64_t samples, std::uint64_t seed, const std::string& out) {
  ManifestClock clock;
  std::vector<const FloatFormat*> formats;
  for (const std::string& n : names) formats.push_back(&format_by_name(n));
  fs::create_directories(out);
  const std::vector<double> grid = points == 1 ? std::vector<double>{sigma_min}
                                               : log_grid(sigma_min, sigma_max, points);

  std::vector<std::string> outputs;
  std::string merged = "format,sigma,snr\n";
  for (const FloatFormat* f : formats) {
    const auto curve = snr_curve(*f, grid, samples, seed);
    std::string csv = "sigma,snr\n";
    for (const SnrPoint& p : curve) {
      csv += fmt_double(p.sigma) + "," + fmt_double(p.snr) + "\n";
      merged += f->id + "," + fmt_double(p.sigma) + "," + fmt_double(p.snr) + "\n";
    }
    write_file(fs::path(out) / ("snr_" + f->id + ".csv"), csv, &outputs);
  }
  write_file(fs::path(out) / "snr_merged.csv", merged, &outputs);

  json cfg;
  cfg["formats"] = names;
  cfg["sigma_min"] = sigma_min;
  cfg["sigma_max"] = sigma_max;
  cfg["points"] = points;
  cfg["samples"] = samples;
  write_manifest(out, "snr", cfg, seed, outputs, clock.seconds());
  return kOk;
}

int cmd_factors(const std::string& op, const std::string& dims_arg) {
  OpDims dims;
  // dims: comma-separated key=value pairs, e.g. b=32,m=1024,n=1024 or s=128
  // or gammas=0.5/0.5.
  std::stringstream ss(dims_arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--dims", "expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    if (key == "b") dims.b = std::stoll(val);
    else if (key == "m") dims.m = std::stoll(val);
    else if (key == "n") dims.n = std::stoll(val);
    else if (key == "s") dims.s = std::stoll(val);
    else if (key == "gammas") {
      std::stringstream gs(val);
      std::string g;
      while (std::getline(gs, g, '/')) dims.gammas.push_back(std::stod(g));
    } else {
      throw CLI::ValidationError("--dims", "unknown dimension '" + key + "'");
    }
  }
  const CompendiumEntry& entry = compendium_entry(op);
  const ScaleFactors f = entry.eval(dims);
  json j;
  j["op"] = entry.op;
  j["factors"] = entry.factors;
  j["alpha"] = f.alpha;
  j["betas"] = f.betas;
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_factors_table() {
  json j = json::array();
  for (const CompendiumEntry& e : compendium()) {
    json je;
    je["op"] = e.op;
    je["factors"] = e.factors;
    j.push_back(je);
  }
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_verify(const std::string& graph_file, int trials, std::uint64_t seed) {
  std::ifstream in(graph_file);
  if (!in) throw std::runtime_error("cannot read " + graph_file);
  json j;
  in >> j;
  const graph::Graph g = graph::graph_from_json(j);

  const auto report = graph::verify_scaled_op(g, trials, seed);
  json out;
  out["is_scaled_op"] = report.is_scaled_op;
  out["max_rel_dev"] = report.max_rel_dev;
  out["worst_input"] = report.worst_input;
  out["empirical_ratios"] = json::array();
  for (double r : report.input_ratio)
    out["empirical_ratios"].push_back(std::isnan(r) ? json(nullptr) : json(r));
  if (report.is_scaled_op) {
    out["gradient_scale_ratios"] = graph::gradient_scale_ratios(g);
  } else {
    try {
      graph::gradient_scale_ratios(g);
      out["rescaling_consistent"] = true;
    } catch (const std::runtime_error& e) {
      out["rescaling_consistent"] = false;
      out["violation"] = e.what();
    }
  }
  std::cout << out.dump(2) << "\n";
  return report.is_scaled_op ? kOk : kVerifyFail;
}

void dump_histograms(const fs::path& dir, const std::vector<HistRecord>& hists,
                     std::vector<std::string>* outputs) {
  for (const HistRecord& h : hists) {
    const std::string file = "hist_" + h.name + "_step" + std::to_string(h.step) + ".csv";
    write_file(dir / file, histogram_csv(h.hist), outputs);
  }
}

int cmd_train(const std::string& config_file, const std::string& out) {
  ManifestClock clock;
  std::ifstream in(config_file);
  if (!in) throw std::runtime_error("cannot read " + config_file);
  json j;
  in >> j;
  const RunConfig cfg = parse_run_config(j);
  fs::create_directories(out);

  const ToyModel model = build_unit_ffn(cfg.model);
  const auto data = make_dataset(cfg);
  const TrainResult r = train_loop(model, *data, cfg.optim, cfg.precision, cfg.train);

  std::vector<std::string> outputs;
  std::string losses = "step,loss,skipped\n";
  for (const StepRecord& s : r.losses)
    losses += std::to_string(s.step) + "," + fmt_double(s.loss) + "," +
              (s.skipped ? "1" : "0") + "\n";
  write_file(fs::path(out) / "losses.csv", losses, &outputs);

  if (!r.stats.empty()) {
    std::string stats = "step,tensor,mean,std\n";
    for (const TensorStat& s : r.stats)
      stats += std::to_string(s.step) + "," + s.name + "," + fmt_double(s.mean) + "," +
               fmt_double(s.std) + "\n";
    write_file(fs::path(out) / "stats.csv", stats, &outputs);
  }
  dump_histograms(out, r.hists, &outputs);

  json summary;
  summary["final_loss"] = r.final_loss();
  summary["skipped_steps"] = r.skipped_steps;
  summary["diverged"] = r.diverged;
  write_file(fs::path(out) / "summary.json", summary.dump(2) + "\n", &outputs);

  write_manifest(out, "train", j, cfg.train.seed, outputs, clock.seconds());
  if (r.diverged) {
    std::cerr << "training diverged at step " << r.diverged_at_step << "\n";
    return kDiverged;
  }
  return kOk;
}

int cmd_hist(const std::string& config_file, const std::string& out) {
  ManifestClock clock;
  std::ifstream in(config_file);
  if (!in) throw std::runtime_error("cannot read " + config_file);
  json j;
  in >> j;
  const RunConfig cfg = parse_run_config(j);
  fs::create_directories(out);

  const ToyModel model = build_unit_ffn(cfg.model);
  if (model.traced_edges.empty()) throw std::runtime_error("model has no tensors to trace");
  const auto data = make_dataset(cfg);
  const Batch batch = data->batch(0);
  const std::vector<Tensor> params = model.make_params(cfg.train.seed);

  graph::BackwardTape tape;
  graph::forward(model.g, model.assemble_inputs(batch.x, &batch.targets, params), &tape);
  const auto grads =
      graph::backward(model.g, tape, {Tensor::scalar(cfg.precision.loss_scale)});

  std::vector<HistRecord> hists;
  for (const auto& [name, eid] : model.traced_edges) {
    hists.push_back({0, name, exponent_histogram(tape.z[eid])});
    hists.push_back({0, "grad_" + name, exponent_histogram(tape.h[eid])});
  }
  for (size_t i = 0; i < model.param_inputs.size(); ++i)
    hists.push_back({0, "gradw_" + model.param_names[i],
                     exponent_histogram(grads[model.param_inputs[i]])});

  std::vector<std::string> outputs;
  dump_histograms(out, hists, &outputs);
  write_manifest(out, "hist", j, cfg.train.seed, outputs, clock.seconds());
  return kOk;
}

int cmd_sweep(const std::vector<std::string>& configs, const std::string& out, int jobs) {
  fs::create_directories(out);
  std::vector<int> results(configs.size(), kOk);
  std::mutex mu;
  size_t next = 0;
  auto worker = [&] {
    for (;;) {
      size_t idx;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= configs.size()) return;
        idx = next++;
      }
      char sub[32];
      std::snprintf(sub, sizeof(sub), "run_%03zu", idx);
      try {
        results[idx] = cmd_train(configs[idx], (fs::path(out) / sub).string());
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        std::cerr << configs[idx] << ": " << e.what() << "\n";
        results[idx] = kUsage;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::max(1, jobs); ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  int rc = kOk;
  for (int r : results) rc = std::max(rc, r);
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unitscale: variance-preserving scaling and low-precision simulation"};
  app.require_subcommand(1);

  auto* formats = app.add_subcommand("formats", "print the floating-point format catalog as JSON");

  auto* snr_cmd = app.add_subcommand("snr", "SNR of quantized normal samples vs sigma");
  std::vector<std::string> snr_formats{"fp16"};
  double sigma_min = 0x1p-20, sigma_max = 0x1p20;
  int points = 41;
  std::int64_t samples = 100000;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  snr_cmd->add_option("--format", snr_formats, "format ids (repeatable)");
  snr_cmd->add_option("--sigma-min", sigma_min, "lowest sigma");
  snr_cmd->add_option("--sigma-max", sigma_max, "highest sigma");
  snr_cmd->add_option("--points", points, "grid points");
  snr_cmd->add_option("--samples", samples, "Monte-Carlo samples per point");
  snr_cmd->add_option("--seed", seed, "RNG seed");
  snr_cmd->add_option("--out", out_dir, "output directory");

  auto* factors = app.add_subcommand("factors", "unit scaling factors for an op");
  std::string op_name_arg, dims_arg;
  factors->add_option("--op", op_name_arg, "op name (see --list)");
  factors->add_option("--dims", dims_arg, "dimensions, e.g. b=32,m=1024,n=1024");
  bool list_ops = false;
  factors->add_flag("--list", list_ops, "print the whole factor table");

  auto* verify = app.add_subcommand("verify", "check that a graph JSON is a scaled op");
  std::string graph_file;
  int trials = 5;
  verify->add_option("graph", graph_file, "graph JSON file")->required();
  verify->add_option("--trials", trials, "random trials");
  verify->add_option("--seed", seed, "RNG seed");

  auto* hist = app.add_subcommand("hist", "per-tensor exponent histograms at init");
  std::string config_file;
  hist->add_option("--config", config_file, "run config JSON")->required();
  hist->add_option("--out", out_dir, "output directory");

  auto* train = app.add_subcommand("train", "train a toy model per config");
  train->add_option("--config", config_file, "run config JSON")->required();
  train->add_option("--out", out_dir, "output directory");

  auto* sweep = app.add_subcommand("sweep", "run several train configs");
  std::vector<std::string> sweep_configs;
  int jobs = 1;
  sweep->add_option("--configs", sweep_configs, "config files")->required();
  sweep->add_option("--jobs", jobs, "parallel runs");
  sweep->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*formats) return cmd_formats();
    if (*snr_cmd) return cmd_snr(snr_formats, sigma_min, sigma_max, points, samples, seed, out_dir);
    if (*factors) {
      if (list_ops) return cmd_factors_table();
      if (op_name_arg.empty())
        throw CLI::ValidationError("--op", "required unless --list is given");
      return cmd_factors(op_name_arg, dims_arg);
    }
    if (*verify) return cmd_verify(graph_file, trials, seed);
    if (*hist) return cmd_hist(config_file, out_dir);
    if (*train) return cmd_train(config_file, out_dir);
    if (*sweep) return cmd_sweep(sweep_configs, out_dir, jobs);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
