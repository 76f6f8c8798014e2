#pragma once

// Checkpoint file format `ctrlkit-ckpt-1`:
//
//   ctrlkit-ckpt-1
//   config layers=L heads=H model_dim=d inner_dim=f context=n vocab_size=V
//   meta step=S seed=X
//   tensors <count>
//   <name> <offset-in-floats> <dim0>x<dim1>...
//   ...
//   alias lm_head.weight tok_embeddings.weight
//   data
//   <little-endian float32 payload, tensors concatenated in manifest order>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrlkit/model.hpp"

namespace ctrlkit {

inline constexpr const char* kCheckpointMagic = "ctrlkit-ckpt-1";

namespace detail {

inline void write_f32_le(std::ostream& out, float value) {
  auto bits = std::bit_cast<std::uint32_t>(value);
  char b[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
               static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
  out.write(b, 4);
}

inline float read_f32_le(const unsigned char* b) {
  std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                       (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  const auto& c = ck.config;
  out << kCheckpointMagic << '\n';
  out << "config layers=" << c.layers << " heads=" << c.heads << " model_dim=" << c.model_dim
      << " inner_dim=" << c.inner_dim << " context=" << c.context << " vocab_size=" << c.vocab_size << '\n';
  out << "meta step=" << ck.step << " seed=" << ck.seed << '\n';
  std::vector<std::string> manifest;
  std::size_t offset = 0;
  for_each_tensor(c, ck.weights, [&](const TensorInfo& info, const std::vector<float>& t) {
    manifest.push_back(info.name + ' ' + std::to_string(offset) + ' ' + detail::shape_string(info.shape));
    offset += t.size();
  });
  out << "tensors " << manifest.size() << '\n';
  for (const auto& m : manifest) out << m << '\n';
  out << "alias " << kTiedOutputName << ' ' << kEmbeddingName << '\n';
  out << "data\n";
  for_each_tensor(c, ck.weights, [&](const TensorInfo&, const std::vector<float>& t) {
    for (float v : t) detail::write_f32_le(out, v);
  });
}

inline Checkpoint read_checkpoint(std::istream& in) {
  auto next_line = [&](const char* what) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(std::string("checkpoint: missing ") + what);
    return line;
  };
  if (next_line("magic") != kCheckpointMagic) throw std::runtime_error("checkpoint: bad magic, expected ctrlkit-ckpt-1");

  auto parse_kv = [](const std::string& line, const std::string& tag) {
    std::istringstream ss(line);
    std::string head;
    ss >> head;
    if (head != tag) throw std::runtime_error("checkpoint: expected '" + tag + "' line");
    std::vector<std::pair<std::string, std::string>> kv;
    std::string tok;
    while (ss >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) throw std::runtime_error("checkpoint: bad field " + tok);
      kv.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
    }
    return kv;
  };

  Checkpoint ck;
  for (const auto& [k, v] : parse_kv(next_line("config"), "config")) {
    std::size_t value = std::stoull(v);
    if (k == "layers") ck.config.layers = value;
    else if (k == "heads") ck.config.heads = value;
    else if (k == "model_dim") ck.config.model_dim = value;
    else if (k == "inner_dim") ck.config.inner_dim = value;
    else if (k == "context") ck.config.context = value;
    else if (k == "vocab_size") ck.config.vocab_size = value;
    else throw std::runtime_error("checkpoint: unknown config key " + k);
  }
  ck.config.validate();
  for (const auto& [k, v] : parse_kv(next_line("meta"), "meta")) {
    if (k == "step") ck.step = std::stoll(v);
    else if (k == "seed") ck.seed = std::stoull(v);
  }
  std::istringstream count_line(next_line("tensor count"));
  std::string tag;
  std::size_t count = 0;
  count_line >> tag >> count;
  if (tag != "tensors") throw std::runtime_error("checkpoint: expected tensor manifest");

  ck.weights = Weights<float>::zeros(ck.config);
  std::vector<std::string> expected;
  for_each_tensor(ck.config, ck.weights, [&](const TensorInfo& info, std::vector<float>&) {
    expected.push_back(info.name + ' ' + detail::shape_string(info.shape));
  });
  if (count != expected.size()) throw std::runtime_error("checkpoint: tensor count does not match config");
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ss(next_line("manifest entry"));
    std::string name, offset, shape;
    ss >> name >> offset >> shape;
    if (name + ' ' + shape != expected[i]) throw std::runtime_error("checkpoint: unexpected tensor " + name + " " + shape);
  }
  next_line("alias");
  if (next_line("data marker") != "data") throw std::runtime_error("checkpoint: missing data section");

  for_each_tensor(ck.config, ck.weights, [&](const TensorInfo& info, std::vector<float>& t) {
    std::vector<unsigned char> buf(t.size() * 4);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size())
      throw std::runtime_error("checkpoint: truncated payload in " + info.name);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = detail::read_f32_le(buf.data() + 4 * j);
  });
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace ctrlkit
