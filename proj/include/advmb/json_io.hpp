#pragma once

// JSON conversions for configuration and model records.

#include "advmb/attack_config.hpp"
#include "advmb/ensemble.hpp"

#include <json.hpp>

namespace advmb {

using json = nlohmann::json;

inline json to_json(const AttackConfig& c) {
  return {{"family", to_string(c.family)},
          {"epsilon_max", c.epsilon_max},
          {"alpha", c.step_size()},
          {"steps", c.steps},
          {"delta_lb", c.delta_lb},
          {"delta_ub", c.delta_ub},
          {"domain_lo", c.domain_lo},
          {"domain_hi", c.domain_hi},
          {"target_malware_only", c.target_malware_only}};
}

inline AttackConfig attack_config_from_json(const json& j) {
  AttackConfig c;
  c.family = attack_family_from_string(j.at("family").get<std::string>());
  c.epsilon_max = j.at("epsilon_max").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.steps = j.at("steps").get<int>();
  c.delta_lb = j.at("delta_lb").get<std::vector<double>>();
  c.delta_ub = j.at("delta_ub").get<std::vector<double>>();
  c.domain_lo = j.at("domain_lo").get<double>();
  c.domain_hi = j.at("domain_hi").get<double>();
  c.target_malware_only = j.at("target_malware_only").get<bool>();
  return c;
}

inline json to_json(const Architecture& a) {
  return {{"widths", a.widths}, {"activation", to_string(a.activation)}, {"layer_norm", a.layer_norm}};
}

inline Architecture architecture_from_json(const json& j) {
  Architecture a;
  a.widths = j.at("widths").get<std::vector<std::size_t>>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.layer_norm = j.at("layer_norm").get<std::vector<bool>>();
  a.validate();
  return a;
}

inline json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) throw FormatError("matrix: wrong row count");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = j[static_cast<std::size_t>(r)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw FormatError("matrix: wrong column count");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

inline json to_json(const TrainMeta& m) {
  return {{"seed", m.seed},
          {"epochs", m.epochs},
          {"learning_rate", m.learning_rate},
          {"optimizer", to_string(m.optimizer)},
          {"batch_size", m.batch_size},
          {"weight_decay", m.weight_decay},
          {"adv", m.adv ? to_json(*m.adv) : json(nullptr)},
          {"epoch_losses", m.epoch_losses}};
}

inline TrainMeta train_meta_from_json(const json& j) {
  TrainMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.epochs = j.at("epochs").get<int>();
  m.learning_rate = j.at("learning_rate").get<double>();
  m.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  m.batch_size = j.at("batch_size").get<std::size_t>();
  m.weight_decay = j.at("weight_decay").get<double>();
  if (!j.at("adv").is_null()) m.adv = attack_config_from_json(j.at("adv"));
  m.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
  return m;
}

}  // namespace advmb
