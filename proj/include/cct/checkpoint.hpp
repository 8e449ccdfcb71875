#pragma once

// CCTK checkpoint layout (integers little-endian u32, payload f64 LE):
//   "CCTK" | version
//   parameters: count | { name_len | name | rank | dims... | values }
//   optimizer:  count | same encoding, names "m.<param>" then "v.<param>"
//   config:     byte length | UTF-8 "key=value\n" lines

#include <bit>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cct/data.hpp"
#include "cct/metrics.hpp"
#include "cct/trainer.hpp"

namespace cct {

inline constexpr char kCheckpointMagic[4] = {'C', 'C', 'T', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline void put_named_tensors(std::vector<std::uint8_t>& out,
                              const std::vector<std::pair<std::string, const Tensor*>>& items) {
  put_u32(out, checked_u32(items.size(), "tensor count"));
  for (const auto& [name, t] : items) {
    put_u32(out, checked_u32(name.size(), "name length"));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t dim : t->shape()) put_u32(out, checked_u32(dim, "dimension"));
    for (double v : t->data()) put_f64(out, v);
  }
}

inline std::vector<std::pair<std::string, Tensor>> get_named_tensors(ByteReader& in) {
  const std::uint32_t count = in.u32("tensor count");
  std::vector<std::pair<std::string, Tensor>> items;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = in.u32("name length");
    std::string name = in.bytes(len, "tensor name");
    const std::uint64_t rank_at = in.offset();
    const std::uint32_t rank = in.u32("rank");
    if (rank > 2) throw FormatError("tensor rank " + std::to_string(rank) + " unsupported", rank_at);
    Shape shape;
    unsigned __int128 numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(in.u32("dimension"));
      numel *= shape.back();
    }
    if (numel * 8 > in.remaining()) throw FormatError("truncated tensor '" + name + "'", in.offset());
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = in.f64("tensor payload");
    items.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return items;
}

inline std::string encode_config(const TrainState& s) {
  const TrainConfig& c = s.cfg;
  const HeadConfig& h = c.head;
  std::ostringstream rng;
  rng << s.rng;
  std::ostringstream os;
  auto kv = [&](const char* key, const std::string& value) { os << key << '=' << value << '\n'; };
  kv("epoch", std::to_string(s.epoch));
  kv("opt_step", std::to_string(s.opt.step));
  kv("epochs", std::to_string(c.epochs));
  kv("batch_size", std::to_string(c.batch_size));
  kv("lr", format_double(c.lr));
  kv("warmup_iters", std::to_string(c.warmup_iters));
  kv("weight_decay", format_double(c.weight_decay));
  kv("beta1", format_double(c.beta1));
  kv("beta2", format_double(c.beta2));
  kv("eps", format_double(c.eps));
  kv("seed", std::to_string(c.seed));
  kv("lambda_expl", format_double(c.weights.expl));
  kv("lambda_sparse", format_double(c.weights.sparse));
  kv("record_wall_time", c.record_wall_time ? "1" : "0");
  kv("concepts", std::to_string(h.concepts));
  kv("slot_dim", std::to_string(h.slot_dim));
  kv("input_dim", std::to_string(h.input_dim));
  kv("num_features", std::to_string(h.num_features));
  kv("num_classes", std::to_string(h.num_classes));
  kv("iterations", std::to_string(h.iterations));
  kv("variant", to_string(h.variant));
  kv("heads", std::to_string(h.heads));
  kv("pathway", to_string(h.pathway));
  kv("bypass_norms_and_projections", h.bypass_norms_and_projections ? "1" : "0");
  kv("layer_norm_eps", format_double(h.layer_norm_eps));
  kv("rng", rng.str());
  return os.str();
}

inline TrainState decode_config(const std::string& text, std::uint64_t at) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line without '='", at);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("config key '") + key + "' missing", at);
    return it->second;
  };
  auto u64 = [&](const char* key) { return static_cast<std::uint64_t>(std::stoull(get(key))); };
  auto dbl = [&](const char* key) { return parse_double(get(key)); };
  TrainState s;
  try {
    TrainConfig& c = s.cfg;
    HeadConfig& h = c.head;
    s.epoch = u64("epoch");
    s.opt.step = u64("opt_step");
    c.epochs = u64("epochs");
    c.batch_size = u64("batch_size");
    c.lr = dbl("lr");
    c.warmup_iters = u64("warmup_iters");
    c.weight_decay = dbl("weight_decay");
    c.beta1 = dbl("beta1");
    c.beta2 = dbl("beta2");
    c.eps = dbl("eps");
    c.seed = u64("seed");
    c.weights.expl = dbl("lambda_expl");
    c.weights.sparse = dbl("lambda_sparse");
    c.record_wall_time = get("record_wall_time") == "1";
    h.concepts = u64("concepts");
    h.slot_dim = u64("slot_dim");
    h.input_dim = u64("input_dim");
    h.num_features = u64("num_features");
    h.num_classes = u64("num_classes");
    h.iterations = u64("iterations");
    h.variant = parse_variant(get("variant"));
    h.heads = u64("heads");
    h.pathway = parse_pathway(get("pathway"));
    h.bypass_norms_and_projections = get("bypass_norms_and_projections") == "1";
    h.layer_norm_eps = dbl("layer_norm_eps");
    std::istringstream rng(get("rng"));
    rng >> s.rng;
    if (!rng) throw FormatError("unreadable rng state", at);
    c.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid config block: ") + e.what(), at);
  }
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const TrainState& state) {
  ModelParams<double> params = state.params;
  std::vector<std::pair<std::string, const Tensor*>> tensors, buffers;
  params.visit([&](const std::string& n, Tensor& t) { tensors.emplace_back(n, &t); });
  if (!state.opt.m.empty()) {
    if (state.opt.m.size() != tensors.size() || state.opt.v.size() != tensors.size()) {
      throw std::invalid_argument("optimizer state does not match the parameters");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) buffers.emplace_back("m." + tensors[i].first, &state.opt.m[i]);
    for (std::size_t i = 0; i < tensors.size(); ++i) buffers.emplace_back("v." + tensors[i].first, &state.opt.v[i]);
  }
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_named_tensors(out, tensors);
  detail::put_named_tensors(out, buffers);
  const std::string config = detail::encode_config(state);
  detail::put_u32(out, detail::checked_u32(config.size(), "config length"));
  out.insert(out.end(), config.begin(), config.end());
  return out;
}

inline TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  if (in.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::uint64_t params_at = in.offset();
  auto tensors = detail::get_named_tensors(in);
  const std::uint64_t buffers_at = in.offset();
  auto buffers = detail::get_named_tensors(in);
  const std::uint64_t config_at = in.offset();
  const std::uint32_t config_len = in.u32("config length");
  TrainState state = detail::decode_config(in.bytes(config_len, "config"), config_at);
  if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint", in.offset());

  if (!buffers.empty()) {
    if (buffers.size() != 2 * tensors.size()) {
      throw FormatError("optimizer buffer count mismatch", buffers_at);
    }
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      const auto& m = buffers[k];
      const auto& v = buffers[k + tensors.size()];
      if (m.first != "m." + tensors[k].first || v.first != "v." + tensors[k].first ||
          m.second.shape() != tensors[k].second.shape() ||
          v.second.shape() != tensors[k].second.shape()) {
        throw FormatError("optimizer buffer '" + m.first + "' does not match its parameter",
                          buffers_at);
      }
      state.opt.m.push_back(m.second);
      state.opt.v.push_back(v.second);
    }
  }
  state.params = init_model(state.cfg.head, 0);
  std::size_t i = 0;
  bool ok = true;
  state.params.visit([&](const std::string& n, Tensor& t) {
    if (i >= tensors.size() || tensors[i].first != n || tensors[i].second.shape() != t.shape()) {
      ok = false;
    } else {
      t = std::move(tensors[i].second);
    }
    ++i;
  });
  if (!ok || i != tensors.size()) {
    throw FormatError("checkpoint parameters do not match the stored head config", params_at);
  }
  return state;
}

inline void save_checkpoint(const TrainState& state, const std::string& path) {
  detail::write_file(path, encode_checkpoint(state));
}

inline TrainState load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace cct
