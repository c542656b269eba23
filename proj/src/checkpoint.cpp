#include "valstitch/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace valstitch::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace {

nlohmann::json header_json(const Checkpoint& ckpt) {
  nlohmann::json h;
  h["format"] = "valstitch-checkpoint";
  h["version"] = 1;
  h["dtype"] = "f64";
  h["endian"] = "little";
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.arrays) {
    arrays.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  h["arrays"] = arrays;
  h["meta"] = ckpt.meta;
  return h;
}

[[noreturn]] void format_error(const std::string& what) {
  throw std::runtime_error("checkpoint format error: " + what);
}

}  // namespace

void Checkpoint::add_array(const std::string& name, const Eigen::MatrixXd& m) {
  arrays.emplace_back(name, m);
}

void Checkpoint::add_vector(const std::string& name, const Eigen::VectorXd& v) {
  arrays.emplace_back(name, Eigen::MatrixXd(v));
}

bool Checkpoint::has_array(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return true;
  return false;
}

const Eigen::MatrixXd& Checkpoint::array(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return m;
  throw std::runtime_error("checkpoint: missing array '" + name + "'");
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  out << header_json(*this).dump() << '\n';
  for (const auto& [name, m] : arrays) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) format_error("missing header line");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::parse_error&) {
    format_error("header is not valid JSON");
  }
  if (h.value("format", "") != "valstitch-checkpoint")
    format_error("unrecognized format tag");
  if (h.value("dtype", "") != "f64") format_error("unsupported dtype");
  if (h.value("endian", "") != "little") format_error("unsupported endianness");

  Checkpoint ckpt;
  ckpt.meta = h.value("meta", nlohmann::json::object());
  for (const auto& a : h.at("arrays")) {
    const std::string name = a.at("name").get<std::string>();
    const Eigen::Index rows = a.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = a.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) format_error("negative array shape");
    Eigen::MatrixXd m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(double) * m.size()))
      format_error("truncated array payload for '" + name + "'");
    ckpt.arrays.emplace_back(name, std::move(m));
  }
  // There must be no trailing bytes.
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0)
    format_error("trailing bytes after declared arrays");
  return ckpt;
}

void add_mlp(Checkpoint& ckpt, const std::string& prefix, const Mlp& mlp) {
  nlohmann::json acts = nlohmann::json::array();
  for (const Layer& l : mlp.layers) acts.push_back(activation_name(l.act));
  ckpt.meta[prefix]["depth"] = mlp.depth();
  ckpt.meta[prefix]["activations"] = acts;
  for (int l = 0; l < mlp.depth(); ++l) {
    ckpt.add_array(prefix + ".layer" + std::to_string(l) + ".w", mlp.layers[l].w);
    ckpt.add_vector(prefix + ".layer" + std::to_string(l) + ".b", mlp.layers[l].b);
  }
}

Mlp mlp_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  if (!ckpt.meta.contains(prefix))
    throw std::runtime_error("checkpoint: no model under prefix '" + prefix + "'");
  const auto& meta = ckpt.meta.at(prefix);
  const int depth = meta.at("depth").get<int>();
  Mlp mlp;
  for (int l = 0; l < depth; ++l) {
    Layer layer;
    layer.w = ckpt.array(prefix + ".layer" + std::to_string(l) + ".w");
    layer.b = ckpt.array(prefix + ".layer" + std::to_string(l) + ".b");
    layer.act = activation_from_name(meta.at("activations").at(l).get<std::string>());
    if (l > 0 && layer.w.cols() != mlp.layers.back().w.rows())
      throw std::invalid_argument("checkpoint: layer shapes do not chain");
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

void add_adamw(Checkpoint& ckpt, const std::string& prefix, const AdamW& opt) {
  ckpt.meta[prefix]["lr"] = opt.lr;
  ckpt.meta[prefix]["beta1"] = opt.beta1;
  ckpt.meta[prefix]["beta2"] = opt.beta2;
  ckpt.meta[prefix]["eps"] = opt.eps;
  ckpt.meta[prefix]["weight_decay"] = opt.weight_decay;
  ckpt.meta[prefix]["step_count"] = opt.step_count;
  ckpt.add_vector(prefix + ".m", opt.m);
  ckpt.add_vector(prefix + ".v", opt.v);
  if (opt.lr_scale.size() > 0) ckpt.add_vector(prefix + ".lr_scale", opt.lr_scale);
}

AdamW adamw_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const auto& meta = ckpt.meta.at(prefix);
  AdamW opt;
  opt.lr = meta.at("lr").get<double>();
  opt.beta1 = meta.at("beta1").get<double>();
  opt.beta2 = meta.at("beta2").get<double>();
  opt.eps = meta.at("eps").get<double>();
  opt.weight_decay = meta.at("weight_decay").get<double>();
  opt.step_count = meta.at("step_count").get<long>();
  opt.m = ckpt.array(prefix + ".m");
  opt.v = ckpt.array(prefix + ".v");
  if (ckpt.has_array(prefix + ".lr_scale")) opt.lr_scale = ckpt.array(prefix + ".lr_scale");
  return opt;
}

}  // namespace valstitch::nn
