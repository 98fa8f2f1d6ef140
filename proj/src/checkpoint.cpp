#include "jemha/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace jemha {

namespace {

void push(std::vector<NamedTensor>& out, const std::string& name, const Tensor& t) { out.push_back({name, t}); }

void push_cell(std::vector<NamedTensor>& out, const std::string& prefix, const RecurrentCellParams& p,
               const std::vector<std::string>& gate_names) {
  for (std::size_t i = 0; i < p.gates.size(); ++i) {
    const std::string g = prefix + "." + gate_names[i];
    push(out, g + ".w_x", p.gates[i].w_x);
    push(out, g + ".w_h", p.gates[i].w_h);
    push(out, g + ".b", p.gates[i].b);
  }
}

const std::vector<std::string> kLstmGates = {"i", "f", "o", "g"};
const std::vector<std::string> kGruGates = {"z", "r", "h"};

void push_ffn(std::vector<NamedTensor>& out, const std::string& prefix, const FfnParams& p) {
  push(out, prefix + ".w1", p.w1);
  push(out, prefix + ".b1", p.b1);
  push(out, prefix + ".w2", p.w2);
  push(out, prefix + ".b2", p.b2);
}

void push_mha(std::vector<NamedTensor>& out, const std::string& prefix, const MhaParams& p) {
  for (int h = 0; h < p.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    push(out, hp + ".w_q", p.w_q[static_cast<std::size_t>(h)]);
    push(out, hp + ".w_k", p.w_k[static_cast<std::size_t>(h)]);
    push(out, hp + ".w_v", p.w_v[static_cast<std::size_t>(h)]);
  }
  push(out, prefix + ".w_o", p.w_o);
}

void push_ln(std::vector<NamedTensor>& out, const std::string& prefix, const LayerNormParams& p) {
  push(out, prefix + ".gain", p.gain);
  push(out, prefix + ".bias", p.bias);
}

}  // namespace

std::vector<NamedTensor> named_parameters(const SpeakerParams& p) {
  std::vector<NamedTensor> out;
  push(out, "w_m", p.w_m);
  push(out, "embed.table", p.embed.table);
  push_cell(out, "lstm", p.lstm, kLstmGates);
  push(out, "proj_w", p.proj_w);
  push(out, "proj_b", p.proj_b);
  return out;
}

std::vector<NamedTensor> named_parameters(const ReinforcerParams& p) {
  std::vector<NamedTensor> out;
  push(out, "embed.table", p.embed.table);
  push_cell(out, "lstm", p.lstm, kLstmGates);
  push(out, "w1", p.w1);
  push(out, "b1", p.b1);
  push(out, "w2", p.w2);
  push(out, "b2", p.b2);
  return out;
}

std::vector<NamedTensor> named_parameters(const ListenerParams& p) {
  std::vector<NamedTensor> out;
  push(out, "embed.table", p.embed.table);
  push_cell(out, "gru", p.gru, kGruGates);
  push(out, "expr_w", p.expr_w);
  push(out, "expr_b", p.expr_b);
  push(out, "vis_w", p.vis_w);
  push(out, "vis_b", p.vis_b);
  return out;
}

std::vector<NamedTensor> named_parameters(const VqaModelParams& p) {
  std::vector<NamedTensor> out;
  if (p.config.use_textual) {
    push(out, "expression.embed.table", p.expression.embed.table);
    push(out, "expression.w", p.expression.w);
    push(out, "expression.b", p.expression.b);
    push_cell(out, "expression.gru", p.expression.gru, kGruGates);
  }
  if (p.config.use_visual) {
    push(out, "obj_w", p.obj_w);
    push(out, "obj_b", p.obj_b);
  }
  push(out, "question.embed.table", p.question.embed.table);
  push(out, "question.w", p.question.w);
  push(out, "question.b", p.question.b);
  if (p.question.use_gru) push_cell(out, "question.gru", p.question.gru, kGruGates);
  for (std::size_t i = 0; i < p.stack.blocks.size(); ++i) {
    const auto& b = p.stack.blocks[i];
    const std::string bp = "stack.block" + std::to_string(i);
    push_mha(out, bp + ".q_mha", b.q_mha);
    push_mha(out, bp + ".o_mha", b.o_mha);
    push_mha(out, bp + ".c_mha", b.c_mha);
    push_ffn(out, bp + ".o_ffn", b.o_ffn);
    push_ffn(out, bp + ".c_ffn", b.c_ffn);
    push_ln(out, bp + ".o_ln1", b.o_ln1);
    push_ln(out, bp + ".o_ln2", b.o_ln2);
    push_ln(out, bp + ".c_ln1", b.c_ln1);
    push_ln(out, bp + ".c_ln2", b.c_ln2);
    if (b.q_residual) push_ln(out, bp + ".q_ln", b.q_ln);
  }
  push_ffn(out, "head.q_scorer", p.head.q_scorer);
  push_ffn(out, "head.c_scorer", p.head.c_scorer);
  push_ffn(out, "head.o_scorer", p.head.o_scorer);
  push_ffn(out, "head.project", p.head.project);
  return out;
}

std::vector<NamedTensor> prefixed(const std::string& prefix, std::vector<NamedTensor> params) {
  for (NamedTensor& nt : params) nt.name = prefix + "." + nt.name;
  return params;
}

namespace {

constexpr char kMagic[4] = {'J', 'M', 'H', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw std::runtime_error("checkpoint: truncated file");
  const auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])); };
  const std::uint32_t v = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
  pos += 4;
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& config, const std::vector<NamedTensor>& params) {
  std::vector<const NamedTensor*> sorted;
  sorted.reserve(params.size());
  for (const NamedTensor& nt : params) {
    if (!nt.tensor.defined()) throw std::invalid_argument("checkpoint: undefined tensor '" + nt.name + "'");
    sorted.push_back(&nt);
  }
  std::sort(sorted.begin(), sorted.end(), [](const NamedTensor* a, const NamedTensor* b) { return a->name < b->name; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i - 1]->name == sorted[i]->name) {
      throw std::invalid_argument("checkpoint: duplicate parameter name '" + sorted[i]->name + "'");
    }
  }

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string cfg = config.dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put_u32(out, static_cast<std::uint32_t>(sorted.size()));
  for (const NamedTensor* nt : sorted) {
    put_u32(out, static_cast<std::uint32_t>(nt->name.size()));
    out += nt->name;
    put_u32(out, static_cast<std::uint32_t>(nt->tensor.ndim()));
    for (int d : nt->tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : nt->tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  if (in.size() < 4 || in.compare(0, 4, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  pos = 4;
  const std::uint32_t version = get_u32(in, pos);
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ck;
  const std::uint32_t cfg_len = get_u32(in, pos);
  if (pos + cfg_len > in.size()) throw std::runtime_error("checkpoint: truncated config");
  ck.config = nlohmann::json::parse(in.substr(pos, cfg_len));
  pos += cfg_len;

  const std::uint32_t n = get_u32(in, pos);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = get_u32(in, pos);
    if (pos + name_len > in.size()) throw std::runtime_error("checkpoint: truncated name");
    std::string name = in.substr(pos, name_len);
    pos += name_len;
    CheckpointEntry e;
    const std::uint32_t ndim = get_u32(in, pos);
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      e.shape.push_back(static_cast<int>(get_u32(in, pos)));
      count *= static_cast<std::size_t>(e.shape.back());
    }
    e.values.reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
      e.values.push_back(static_cast<double>(std::bit_cast<float>(get_u32(in, pos))));
    }
    if (!ck.params.emplace(std::move(name), std::move(e)).second) {
      throw std::runtime_error("checkpoint: duplicate entry in file");
    }
  }
  if (pos != in.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

void restore_parameters(const Checkpoint& ck, const std::vector<NamedTensor>& into) {
  if (ck.params.size() != into.size()) {
    throw std::runtime_error("checkpoint: file has " + std::to_string(ck.params.size()) + " entries, model expects " +
                             std::to_string(into.size()));
  }
  for (const NamedTensor& nt : into) {
    const auto it = ck.params.find(nt.name);
    if (it == ck.params.end()) throw std::runtime_error("checkpoint: missing entry '" + nt.name + "'");
    if (it->second.shape != nt.tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + nt.name + "': file " +
                               shape_str(it->second.shape) + ", model " + shape_str(nt.tensor.shape()));
    }
    Tensor dst = nt.tensor;  // handles share storage
    std::copy(it->second.values.begin(), it->second.values.end(), dst.values().begin());
  }
}

}  // namespace jemha
