#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "valstitch/mlp.hpp"

namespace valstitch::nn {

// Portable checkpoint container: a one-line JSON header (shapes, activations,
// dtype, endianness tag) followed by the raw little-endian 64-bit float
// arrays in declaration order. Round-trips are bit-exact.
struct Checkpoint {
  nlohmann::json meta;  // free-form model metadata
  std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays;

  void add_array(const std::string& name, const Eigen::MatrixXd& m);
  void add_vector(const std::string& name, const Eigen::VectorXd& v);
  const Eigen::MatrixXd& array(const std::string& name) const;
  bool has_array(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);  // throws std::runtime_error
};

// Mlp <-> checkpoint, arrays and activation metadata under a name prefix.
void add_mlp(Checkpoint& ckpt, const std::string& prefix, const Mlp& mlp);
Mlp mlp_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);

// Optimizer state round-trip (moments plus step counter).
void add_adamw(Checkpoint& ckpt, const std::string& prefix, const AdamW& opt);
AdamW adamw_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace valstitch::nn
