#include "slpmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace slpmt {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'S', 'L', 'P', 'M', 'T', 'C', 'K', 'P'};

class Writer {
 public:
  template <class T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string model_config_to_json(const ModelConfig& c) {
  detail::json j;
  j["embed_dim"] = c.embed_dim;
  j["slp_hidden_dim"] = c.slp_hidden_dim;
  j["pool_size"] = c.pool_size;
  j["encoder_layers"] = c.encoder_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["heads"] = c.heads;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_sequence_length"] = c.max_sequence_length;
  j["dropout"] = c.dropout;
  j["language_specific"] = c.language_specific;
  j["languages"] = detail::json::array();
  for (const auto& l : c.languages) j["languages"].push_back({{"id", l.id}, {"tier", std::string(tier_name(l.tier))}});
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  const auto j = detail::parse_json(text, "model config");
  detail::StrictObject o(j, "model config");
  ModelConfig c;
  c.embed_dim = o.get<std::size_t>("embed_dim");
  c.slp_hidden_dim = o.get<std::size_t>("slp_hidden_dim");
  c.pool_size = o.get<std::size_t>("pool_size");
  c.encoder_layers = o.get<std::size_t>("encoder_layers");
  c.decoder_layers = o.get<std::size_t>("decoder_layers");
  c.heads = o.get<std::size_t>("heads");
  c.ffn_dim = o.get<std::size_t>("ffn_dim");
  c.vocab_size = o.get<std::size_t>("vocab_size");
  c.max_sequence_length = o.get<std::size_t>("max_sequence_length");
  c.dropout = o.get<double>("dropout");
  c.language_specific = o.get<bool>("language_specific");
  for (const auto& lj : o.at("languages")) {
    detail::StrictObject lo(lj, "model config language");
    c.languages.push_back({lo.get<std::string>("id"), parse_tier(lo.get<std::string>("tier"))});
    lo.finish();
  }
  o.finish();
  c.validate();
  return c;
}

Checkpoint Checkpoint::capture(const ModelParams& params, const Optimizer* opt, std::uint64_t step, std::string stage) {
  Checkpoint ck;
  ck.config = params.config;
  for (const auto& p : params.named())
    ck.params.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  std::sort(ck.params.begin(), ck.params.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  if (opt) ck.moments = opt->moments();
  ck.step = step;
  ck.stage = std::move(stage);
  return ck;
}

ModelParams Checkpoint::to_params() const {
  // Initialize for the structure, then overwrite every array by name.
  Rng rng(0);
  ModelParams p = ModelParams::initialize(config, rng);
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : params) by_name[a.name] = &a;
  std::size_t matched = 0;
  p.visit([&](const std::string& name, Partition, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
    if (it->second->shape != t.shape())
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " + shape_string(it->second->shape) +
                               ", model expects " + shape_string(t.shape()));
    std::copy(it->second->values.begin(), it->second->values.end(), t.mutable_values().begin());
    ++matched;
  });
  if (matched != params.size()) throw std::runtime_error("checkpoint: contains parameters the model does not have");
  return p;
}

void Checkpoint::restore_optimizer(Optimizer& opt) const { opt.restore(moments, step); }

std::string Checkpoint::serialize() const {
  std::vector<NamedArray> arrays;
  for (const auto& p : params) arrays.push_back({"param/" + p.name, p.shape, p.values});
  for (const auto& [name, m] : moments) {
    arrays.push_back({"adam.m/" + name, {m.first.size()}, m.first});
    arrays.push_back({"adam.v/" + name, {m.second.size()}, m.second});
    arrays.push_back({"adam.t/" + name, {1}, {static_cast<double>(m.updates)}});
  }
  std::sort(arrays.begin(), arrays.end(), [](const auto& a, const auto& b) { return a.name < b.name; });

  Writer w;
  w.bytes(std::string_view(kMagic, sizeof kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = model_config_to_json(config);
  w.pod<std::uint64_t>(cfg.size());
  w.bytes(cfg);
  w.pod<std::uint64_t>(step);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(stage.size()));
  w.bytes(stage);
  w.pod<std::uint64_t>(arrays.size());
  for (const auto& a : arrays) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) w.pod<std::uint64_t>(d);
    w.pod<std::uint64_t>(a.values.size());
    for (double v : a.values) w.pod<double>(v);
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic))
    throw std::runtime_error("checkpoint: bad magic bytes");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.config = model_config_from_json(r.bytes(r.pod<std::uint64_t>()));
  ck.step = r.pod<std::uint64_t>();
  ck.stage = std::string(r.bytes(r.pod<std::uint32_t>()));
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = std::string(r.bytes(r.pod<std::uint32_t>()));
    const auto rank = r.pod<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(r.pod<std::uint64_t>());
    const auto n = r.pod<std::uint64_t>();
    if (n != numel(a.shape)) throw std::runtime_error("checkpoint: array '" + a.name + "' size disagrees with shape");
    a.values.resize(n);
    for (auto& v : a.values) v = r.pod<double>();
    auto slash = a.name.find('/');
    if (slash == std::string::npos) throw std::runtime_error("checkpoint: unprefixed array '" + a.name + "'");
    const std::string kind = a.name.substr(0, slash), name = a.name.substr(slash + 1);
    if (kind == "param") {
      a.name = name;
      ck.params.push_back(std::move(a));
    } else if (kind == "adam.m") {
      ck.moments[name].first = std::move(a.values);
    } else if (kind == "adam.v") {
      ck.moments[name].second = std::move(a.values);
    } else if (kind == "adam.t") {
      ck.moments[name].updates = static_cast<std::uint64_t>(a.values.at(0));
    } else {
      throw std::runtime_error("checkpoint: unknown array kind '" + kind + "'");
    }
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + file.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& cks) {
  if (cks.empty()) throw std::invalid_argument("average_checkpoints: no checkpoints");
  Checkpoint avg = cks.back();
  for (const auto& ck : cks) {
    if (!(ck.config == avg.config)) throw std::invalid_argument("average_checkpoints: model configs differ");
    if (ck.params.size() != avg.params.size())
      throw std::invalid_argument("average_checkpoints: parameter sets differ");
  }
  for (std::size_t i = 0; i < avg.params.size(); ++i) {
    auto& out = avg.params[i].values;
    for (std::size_t c = 0; c < cks.size(); ++c) {
      const auto& a = cks[c].params[i];
      if (a.name != avg.params[i].name || a.shape != avg.params[i].shape)
        throw std::invalid_argument("average_checkpoints: parameter '" + a.name + "' does not line up");
      // Running mean: exact when all inputs agree.
      const double weight = 1.0 / static_cast<double>(c + 1);
      for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = c == 0 ? a.values[k] : out[k] + (a.values[k] - out[k]) * weight;
    }
  }
  return avg;
}

}  // namespace slpmt
