#pragma once
// JSON run configuration for the train/hist commands. Strict: unknown keys
// are an error that names the key.

#include <json.hpp>

#include <memory>
#include <set>
#include <stdexcept>
#include <string>

#include "unitscale/train.hpp"

namespace unitscale {

struct RunConfig {
  FfnConfig model;
  std::string dataset = "mixture";  // "mixture" | "bytes"
  std::int64_t data_dim = 32;       // mixture feature dim
  std::int64_t classes = 16;        // mixture classes / bytes vocab
  std::int64_t context = 1;         // bytes context length
  OptimConfig optim;
  PrecisionConfig precision;
  TrainOptions train;
};

namespace detail {
inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}
}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(
      j, {"model", "data", "optimizer", "precision", "steps", "seed", "stats_every",
          "hist_every"},
      "top level");
  RunConfig c;

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m,
                       {"batch", "in_dim", "hidden", "ffn", "depth", "residual", "tau",
                        "norm", "unit_scaled", "init_std"},
                       "model");
    if (m.contains("batch")) c.model.batch = m.at("batch").get<std::int64_t>();
    if (m.contains("in_dim")) c.model.in_dim = m.at("in_dim").get<std::int64_t>();
    if (m.contains("hidden")) c.model.hidden = m.at("hidden").get<std::int64_t>();
    if (m.contains("ffn")) c.model.ffn = m.at("ffn").get<std::int64_t>();
    if (m.contains("depth")) c.model.depth = m.at("depth").get<int>();
    if (m.contains("residual")) {
      const std::string r = m.at("residual").get<std::string>();
      const double tau = m.contains("tau") ? m.at("tau").get<double>() : 0.5;
      if (r == "none")
        c.model.scheme = ResidualScheme::none();
      else if (r == "default")
        c.model.scheme = ResidualScheme::default_add();
      else if (r == "fixed")
        c.model.scheme = ResidualScheme::fixed(tau);
      else if (r == "running_mean")
        c.model.scheme = ResidualScheme::running_mean();
      else
        throw std::invalid_argument("config: unknown residual scheme '" + r + "'");
    }
    if (m.contains("norm")) c.model.norm = norm_from_name(m.at("norm").get<std::string>());
    if (m.contains("unit_scaled")) c.model.unit_scaled = m.at("unit_scaled").get<bool>();
    if (m.contains("init_std")) c.model.baseline_init_std = m.at("init_std").get<double>();
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, {"kind", "dim", "classes", "context"}, "data");
    if (d.contains("kind")) c.dataset = d.at("kind").get<std::string>();
    if (c.dataset != "mixture" && c.dataset != "bytes")
      throw std::invalid_argument("config: unknown data kind '" + c.dataset + "'");
    if (d.contains("dim")) c.data_dim = d.at("dim").get<std::int64_t>();
    if (d.contains("classes")) c.classes = d.at("classes").get<std::int64_t>();
    if (d.contains("context")) c.context = d.at("context").get<std::int64_t>();
  }

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::check_keys(o, {"kind", "lr", "momentum", "beta1", "beta2", "eps",
                           "compensate_lr"},
                       "optimizer");
    const std::string kind = o.contains("kind") ? o.at("kind").get<std::string>() : "adam";
    if (kind == "sgd")
      c.optim.kind = OptimConfig::Kind::sgd;
    else if (kind == "adam")
      c.optim.kind = OptimConfig::Kind::adam;
    else
      throw std::invalid_argument("config: unknown optimizer '" + kind + "'");
    if (o.contains("lr")) {
      c.optim.sgd.lr = o.at("lr").get<double>();
      c.optim.adam.lr = o.at("lr").get<double>();
    }
    if (o.contains("momentum")) c.optim.sgd.momentum = o.at("momentum").get<double>();
    if (o.contains("beta1")) c.optim.adam.beta1 = o.at("beta1").get<double>();
    if (o.contains("beta2")) c.optim.adam.beta2 = o.at("beta2").get<double>();
    if (o.contains("eps")) c.optim.adam.eps = o.at("eps").get<double>();
    if (o.contains("compensate_lr")) c.optim.compensate_lr = o.at("compensate_lr").get<bool>();
  }

  if (j.contains("precision")) {
    const auto& p = j.at("precision");
    detail::check_keys(p, {"act_weight_format", "grad_format", "loss_scale"}, "precision");
    if (p.contains("act_weight_format"))
      c.precision.act_weight_format = p.at("act_weight_format").get<std::string>();
    if (p.contains("grad_format"))
      c.precision.grad_format = p.at("grad_format").get<std::string>();
    if (p.contains("loss_scale")) c.precision.loss_scale = p.at("loss_scale").get<double>();
  }

  if (j.contains("steps")) c.train.steps = j.at("steps").get<int>();
  if (j.contains("seed")) c.train.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("stats_every")) c.train.stats_every = j.at("stats_every").get<int>();
  if (j.contains("hist_every")) c.train.hist_every = j.at("hist_every").get<int>();

  // The model trains on this dataset; wire the head dimensions up.
  c.model.classes = c.classes;
  c.model.in_dim = c.dataset == "bytes" ? c.context * c.classes : c.data_dim;
  return c;
}

inline std::unique_ptr<Dataset> make_dataset(const RunConfig& c) {
  if (c.dataset == "bytes")
    return std::make_unique<ByteLmDataset>(c.classes, c.context, c.model.batch,
                                           c.train.seed);
  return std::make_unique<GaussianMixtureDataset>(c.classes, c.data_dim, c.model.batch,
                                                  c.train.seed);
}

}  // namespace unitscale
