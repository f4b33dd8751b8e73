#include "docparser/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace docparser {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_i64(std::ostream& out, std::int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_f64_array(std::ostream& out, const double* data, std::int64_t n) {
  write_i64(out, n);
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * 8));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::int64_t read_i64(std::istream& in) {
  std::int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::string read_string(std::istream& in) {
  const auto n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}
std::vector<double> read_f64_array(std::istream& in) {
  const auto n = read_i64(in);
  if (n < 0) throw std::runtime_error("corrupt checkpoint: negative array length");
  std::vector<double> v(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write("DPCK", 4);
  write_u32(out, Checkpoint::kVersion);
  write_string(out, ckpt.config_json);
  write_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    write_string(out, name);
    write_string(out, "f64");
    write_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (auto d : tensor.shape()) write_i64(out, d);
    write_f64_array(out, tensor.data(), tensor.numel());
  }
  out.put(ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    if (ckpt.moments.size() != ckpt.params.size()) {
      throw std::invalid_argument("checkpoint: moments must align with params");
    }
    write_i64(out, ckpt.opt_step);
    for (const auto& m : ckpt.moments) {
      write_f64_array(out, m.m.data(), static_cast<std::int64_t>(m.m.size()));
      write_f64_array(out, m.v.data(), static_cast<std::int64_t>(m.v.size()));
    }
  }
  write_i64(out, ckpt.global_step);
  for (auto s : ckpt.rng_state) write_u64(out, s);
  write_string(out, ckpt.phase);
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (std::memcmp(magic, "DPCK", 4) != 0) {
    throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = read_u32(in);
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_json = read_string(in);
  const auto count = read_u32(in);
  ckpt.params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in);
    const std::string dtype = read_string(in);
    if (dtype != "f64") {
      throw std::runtime_error("unsupported dtype '" + dtype + "' in checkpoint");
    }
    const auto ndim = read_u32(in);
    Shape shape(ndim);
    for (auto& d : shape) d = read_i64(in);
    auto data = read_f64_array(in);
    ckpt.params.emplace_back(std::move(name),
                             Tensor::from_data(std::move(shape), std::move(data)));
  }
  ckpt.has_optimizer = in.get() == 1;
  if (ckpt.has_optimizer) {
    ckpt.opt_step = read_i64(in);
    ckpt.moments.resize(count);
    for (auto& m : ckpt.moments) {
      m.m = read_f64_array(in);
      m.v = read_f64_array(in);
    }
  }
  ckpt.global_step = read_i64(in);
  for (auto& s : ckpt.rng_state) s = read_u64(in);
  ckpt.phase = read_string(in);
  if (!in) throw std::runtime_error("truncated checkpoint '" + path + "'");
  return ckpt;
}

Checkpoint capture_checkpoint(DocParserModel& model, const AdamW* optimizer,
                              std::int64_t global_step, const Rng& rng,
                              const std::string& phase) {
  Checkpoint ckpt;
  ckpt.config_json = model.config().to_json();
  for (auto& p : model.parameters()) {
    ckpt.params.emplace_back(p.name, p.tensor.clone());
  }
  if (optimizer) {
    ckpt.has_optimizer = true;
    ckpt.opt_step = optimizer->step_count();
    ckpt.moments = optimizer->moments();
  }
  ckpt.global_step = global_step;
  ckpt.rng_state = rng.state();
  ckpt.phase = phase;
  return ckpt;
}

void restore_parameters(DocParserModel& model, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : ckpt.params) by_name[name] = &tensor;
  auto params = model.parameters();
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint is missing parameter '" + p.name + "'");
    }
    if (it->second->shape() != p.tensor.shape()) {
      throw std::runtime_error("checkpoint parameter '" + p.name + "' has shape " +
                               shape_str(it->second->shape()) + ", model expects " +
                               shape_str(p.tensor.shape()));
    }
    std::memcpy(p.tensor.data(), it->second->data(),
                static_cast<size_t>(p.tensor.numel()) * 8);
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw std::runtime_error("checkpoint holds unexpected parameter '" +
                             by_name.begin()->first + "'");
  }
}

}  // namespace docparser
