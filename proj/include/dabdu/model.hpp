#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabdu/bdlstm.hpp"
#include "dabdu/blocks.hpp"
#include "dabdu/dtf.hpp"
#include "dabdu/rng.hpp"

namespace dabdu {

// ---------------------------------------------------------------------------
// Parameters

enum class InitKind { HeUniform, FanInUniform, Zeros, Constant };

struct InitRecipe {
  InitKind kind = InitKind::Zeros;
  std::size_t fan_in = 1;
  double value = 0.0;  // Constant only

  static InitRecipe he(std::size_t fan_in) { return {InitKind::HeUniform, fan_in, 0.0}; }
  static InitRecipe fan_in_uniform(std::size_t fan_in) { return {InitKind::FanInUniform, fan_in, 0.0}; }
  static InitRecipe zeros() { return {}; }
  static InitRecipe constant(double v) { return {InitKind::Constant, 1, v}; }

  std::string describe() const {
    switch (kind) {
      case InitKind::HeUniform: return "he_uniform(fan_in=" + std::to_string(fan_in) + ")";
      case InitKind::FanInUniform: return "uniform_inv_sqrt_fan_in(fan_in=" + std::to_string(fan_in) + ")";
      case InitKind::Zeros: return "zeros";
      case InitKind::Constant: return "constant(" + nlohmann::json(value).dump() + ")";
    }
    return "?";
  }
};

struct ParameterSpec {
  std::string name;
  Shape shape;
  InitRecipe init;
};

inline Tensor initialize(const ParameterSpec& spec, std::uint64_t seed) {
  std::vector<double> values(numel(spec.shape), 0.0);
  const auto& r = spec.init;
  if (r.kind == InitKind::Constant) {
    std::fill(values.begin(), values.end(), r.value);
  } else if (r.kind != InitKind::Zeros) {
    const double fan = static_cast<double>(r.fan_in);
    const double limit = r.kind == InitKind::HeUniform ? std::sqrt(6.0 / fan) : 1.0 / std::sqrt(fan);
    Rng rng(derive_seed(seed, hash_name(spec.name)));
    for (auto& v : values) v = rng.uniform(-limit, limit);
  }
  return Tensor::parameter(spec.shape, std::move(values));
}

/// Ordered name -> trainable tensor map. Copies are deep.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    InitRecipe init;
  };

  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    entries_.clear();
    index_.clear();
    for (const auto& e : other.entries_) add(e.name, e.tensor.clone(), e.init);
    return *this;
  }
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  void add(std::string name, Tensor tensor, InitRecipe init = {}) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor), init});
  }

  bool contains(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }

  const Tensor& operator[](std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter " + std::string(name));
    return entries_[it->second].tensor;
  }

  std::span<const Entry> entries() const { return entries_; }
  std::span<Entry> entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.tensor.numel();
    return total;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// ---------------------------------------------------------------------------
// Configuration and variants

struct ModelConfig {
  std::size_t levels = 4;
  std::size_t stem_channels = 16;
  std::size_t growth_rate = 8;
  std::size_t block_layers = 2;
  double compression = 0.5;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t attention_dim = 8;  // D_a of the channel attention
  bool use_attention_gate = true;
  bool use_lstm_attention = true;
  bool use_bdlstm = true;
  nn::CellOutput cell_output = nn::CellOutput::Identity;
  std::uint64_t seed = 0;

  void validate() const {
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (stem_channels < 1 || growth_rate < 1 || block_layers < 1) {
      throw ConfigError("stem_channels, growth_rate and block_layers must be >= 1");
    }
    if (use_lstm_attention && attention_dim < 1) throw ConfigError("attention_dim must be >= 1");
    if (!(compression > 0.0 && compression <= 1.0)) throw ConfigError("compression must lie in (0, 1]");
    const std::size_t step = std::size_t{1} << levels;
    if (height == 0 || width == 0 || height % step != 0 || width % step != 0) {
      throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by 2^" +
                        std::to_string(levels));
    }
    if (use_lstm_attention && !use_bdlstm) throw ConfigError("LSTM attention requires BD-LSTM skip fusion");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(nn::CellOutput, {{nn::CellOutput::Identity, "identity"}, {nn::CellOutput::Tanh, "tanh"}})

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"stem_channels", c.stem_channels},
                     {"growth_rate", c.growth_rate},
                     {"block_layers", c.block_layers},
                     {"compression", c.compression},
                     {"height", c.height},
                     {"width", c.width},
                     {"attention_dim", c.attention_dim},
                     {"use_attention_gate", c.use_attention_gate},
                     {"use_lstm_attention", c.use_lstm_attention},
                     {"use_bdlstm", c.use_bdlstm},
                     {"cell_output", c.cell_output},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    c.levels = j.at("levels").get<std::size_t>();
    c.stem_channels = j.at("stem_channels").get<std::size_t>();
    c.growth_rate = j.at("growth_rate").get<std::size_t>();
    c.block_layers = j.at("block_layers").get<std::size_t>();
    c.compression = j.at("compression").get<double>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.attention_dim = j.at("attention_dim").get<std::size_t>();
    c.use_attention_gate = j.at("use_attention_gate").get<bool>();
    c.use_lstm_attention = j.at("use_lstm_attention").get<bool>();
    c.use_bdlstm = j.at("use_bdlstm").get<bool>();
    c.cell_output = j.at("cell_output").get<nn::CellOutput>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

enum class Variant { UNetSkipConcat, BDLSTMDenseUNet, BDenseUNet1, BDenseUNet2, DABDenseUNet };

inline constexpr std::array<Variant, 5> kAllVariants{Variant::UNetSkipConcat, Variant::BDLSTMDenseUNet,
                                                    Variant::BDenseUNet1, Variant::BDenseUNet2,
                                                    Variant::DABDenseUNet};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::UNetSkipConcat: return "UNet-skip-concat";
    case Variant::BDLSTMDenseUNet: return "BDLSTM-DenseUNet";
    case Variant::BDenseUNet1: return "BDense-UNet-1";
    case Variant::BDenseUNet2: return "BDense-UNet-2";
    case Variant::DABDenseUNet: return "DA-BDense-UNet";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (auto v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

/// BDense-UNet-1 drops the attention gate, BDense-UNet-2 drops the LSTM
/// attention, BDLSTM-DenseUNet drops both, UNet-skip-concat also replaces
/// BD-LSTM fusion with plain concatenation.
inline ModelConfig configure_variant(Variant v, ModelConfig base) {
  base.use_bdlstm = v != Variant::UNetSkipConcat;
  base.use_attention_gate = v == Variant::DABDenseUNet || v == Variant::BDenseUNet2;
  base.use_lstm_attention = v == Variant::DABDenseUNet || v == Variant::BDenseUNet1;
  return base;
}

inline std::optional<Variant> variant_of(const ModelConfig& cfg) {
  for (auto v : kAllVariants) {
    const auto c = configure_variant(v, cfg);
    if (c.use_bdlstm == cfg.use_bdlstm && c.use_attention_gate == cfg.use_attention_gate &&
        c.use_lstm_attention == cfg.use_lstm_attention) {
      return v;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Layout

struct LevelLayout {
  std::size_t in_channels;    // entering the encoder dense block
  std::size_t skip_channels;  // encoder dense block output
  std::size_t down_channels;  // after 1x1 compression
  std::size_t gate_channels;  // decoder feature arriving from below
  std::size_t fused_channels; // skip fusion output
  std::size_t out_channels;   // decoder dense block output
};

struct ModelLayout {
  std::vector<LevelLayout> levels;  // index 0 is full resolution
  std::size_t bottleneck_in = 0;
  std::size_t bottleneck_out = 0;
  std::size_t head_in = 0;
};

inline ModelLayout compute_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t grow = cfg.block_layers * cfg.growth_rate;
  ModelLayout layout;
  std::size_t c = cfg.stem_channels;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    LevelLayout lv{};
    lv.in_channels = c;
    lv.skip_channels = c + grow;
    lv.down_channels = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.compression * lv.skip_channels)));
    c = lv.down_channels;
    layout.levels.push_back(lv);
  }
  layout.bottleneck_in = c;
  layout.bottleneck_out = c + grow;
  std::size_t below = layout.bottleneck_out;
  for (std::size_t l = cfg.levels; l-- > 0;) {
    auto& lv = layout.levels[l];
    lv.gate_channels = below;
    lv.fused_channels = cfg.use_bdlstm ? lv.skip_channels : 2 * lv.skip_channels;
    lv.out_channels = lv.fused_channels + grow;
    below = lv.out_channels;
  }
  layout.head_in = below;
  return layout;
}

/// Every trainable tensor the configuration implies, in registration order.
inline std::vector<ParameterSpec> parameter_schema(const ModelConfig& cfg) {
  const auto layout = compute_layout(cfg);
  std::vector<ParameterSpec> specs;
  auto conv = [&](const std::string& prefix, std::size_t out, std::size_t in, std::size_t k) {
    specs.push_back({prefix + ".w", {out, in, k, k}, InitRecipe::he(in * k * k)});
    specs.push_back({prefix + ".b", {out}, InitRecipe::zeros()});
  };
  auto block = [&](const std::string& prefix, std::size_t in) {
    for (std::size_t j = 0; j < cfg.block_layers; ++j) {
      conv(prefix + ".block.layer" + std::to_string(j + 1), cfg.growth_rate, in + j * cfg.growth_rate, 3);
    }
  };

  conv("stem", cfg.stem_channels, 1, 3);
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    const auto& lv = layout.levels[l];
    const std::string enc = "enc" + std::to_string(l + 1);
    block(enc, lv.in_channels);
    conv(enc + ".down", lv.down_channels, lv.skip_channels, 1);
  }
  block("bottleneck", layout.bottleneck_in);
  for (std::size_t l = cfg.levels; l-- > 0;) {
    const auto& lv = layout.levels[l];
    const std::string lvl = std::to_string(l + 1);
    const std::size_t s = lv.skip_channels;
    conv("dec" + lvl + ".up", s, lv.gate_channels, 3);
    if (cfg.use_attention_gate) {
      const std::size_t fa = nn::attention_width(s);
      const std::string ag = "ag" + lvl;
      specs.push_back({ag + ".wx", {s, fa}, InitRecipe::he(s)});
      specs.push_back({ag + ".wg", {lv.gate_channels, fa}, InitRecipe::he(lv.gate_channels)});
      specs.push_back({ag + ".bg", {fa}, InitRecipe::zeros()});
      specs.push_back({ag + ".psi", {fa, 1}, InitRecipe::he(fa)});
      specs.push_back({ag + ".bpsi", {1}, InitRecipe::zeros()});
    }
    if (cfg.use_bdlstm) {
      for (const char* dir : {"fwd", "bwd"}) {
        const std::string base = "skip" + lvl + ".lstm." + dir + ".";
        for (const char* gate : {"i", "f", "o", "c"}) {
          const std::string g(gate);
          specs.push_back({base + "W" + g, {s, s}, InitRecipe::fan_in_uniform(s)});
          specs.push_back({base + "U" + g, {s, s}, InitRecipe::fan_in_uniform(s)});
          specs.push_back({base + "b" + g, {s}, g == "f" ? InitRecipe::constant(1.0) : InitRecipe::zeros()});
        }
      }
      const std::string fuse = "skip" + lvl + ".fuse.";
      specs.push_back({fuse + "Wyf", {s, s}, InitRecipe::fan_in_uniform(s)});
      specs.push_back({fuse + "Wyb", {s, s}, InitRecipe::fan_in_uniform(s)});
      specs.push_back({fuse + "by", {s}, InitRecipe::zeros()});
      if (cfg.use_lstm_attention) {
        specs.push_back({fuse + "va", {cfg.attention_dim, 1}, InitRecipe::fan_in_uniform(cfg.attention_dim)});
        specs.push_back({fuse + "Wa", {2, cfg.attention_dim}, InitRecipe::fan_in_uniform(2)});
      }
    }
    block("dec" + lvl, lv.fused_channels);
  }
  conv("head", 1, layout.head_in, 1);
  return specs;
}

// ---------------------------------------------------------------------------
// Model

struct ForwardOptions {
  std::optional<double> force_alpha;  // replace every attention gate by this constant
  bool force_uniform_beta = false;    // replace channel attention by equal weights
};

struct ForwardResult {
  Tensor prob;                 // [N,1,H,W] foreground probability
  std::vector<Tensor> alphas;  // one [N,1,H,W] map per decoder level, deepest first
  std::vector<Tensor> betas;   // one [2,N*H*W,C] weight tensor per decoder level, deepest first
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    for (const auto& spec : parameter_schema(cfg_)) store_.add(spec.name, initialize(spec, cfg_.seed), spec.init);
  }

  Model(ModelConfig cfg, ParameterStore store) : cfg_(std::move(cfg)), store_(std::move(store)) {}

  const ModelConfig& config() const { return cfg_; }
  const ParameterStore& parameters() const { return store_; }
  ParameterStore& parameters() { return store_; }
  std::size_t parameter_count() const { return store_.scalar_count(); }

  ForwardResult forward(Tape& tape, const Tensor& x, const ForwardOptions& options = {}) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.height || x.dim(3) != cfg_.width) {
      throw ShapeError("model expects [N,1," + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                       "] input, got " + to_string(x.shape()));
    }
    const auto layout = compute_layout(cfg_);
    ForwardResult result;
    Tensor cur = conv2d(tape, x, p("stem.w"), p("stem.b"), 1, 1);
    std::vector<Tensor> skips;
    for (std::size_t l = 0; l < cfg_.levels; ++l) {
      const std::string enc = "enc" + std::to_string(l + 1);
      Tensor skip = nn::dense_block(tape, cur, block_config(layout.levels[l].in_channels), block_params(enc));
      skips.push_back(skip);
      cur = nn::transition_down(tape, skip, conv_params(enc + ".down"));
    }
    cur = nn::dense_block(tape, cur, block_config(layout.bottleneck_in), block_params("bottleneck"));

    for (std::size_t l = cfg_.levels; l-- > 0;) {
      const auto& lv = layout.levels[l];
      const std::string lvl = std::to_string(l + 1);
      Tensor up = nn::transition_up(tape, cur, conv_params("dec" + lvl + ".up"));
      Tensor skip = skips[l];
      if (cfg_.use_attention_gate) {
        if (options.force_alpha) {
          const double a = *options.force_alpha;
          result.alphas.push_back(Tensor::full({skip.dim(0), 1, skip.dim(2), skip.dim(3)}, a));
          skip = scale(tape, skip, a);
        } else {
          auto gate = nn::attention_gate(tape, skip, cur, gate_params("ag" + lvl));
          result.alphas.push_back(gate.alpha);
          skip = gate.gated;
        }
      }
      Tensor fused;
      if (cfg_.use_bdlstm) {
        auto out = nn::fuse_skip(tape, skip, up, fusion_params("skip" + lvl), cfg_.cell_output,
                                 options.force_uniform_beta);
        if (out.beta.defined()) result.betas.push_back(out.beta);
        fused = out.fused;
      } else {
        fused = concat(tape, {skip, up}, 1);
      }
      cur = nn::dense_block(tape, fused, block_config(lv.fused_channels), block_params("dec" + lvl));
    }
    result.prob = sigmoid(tape, conv2d(tape, cur, p("head.w"), p("head.b")));
    return result;
  }

  nlohmann::json schema_json() const {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& e : store_.entries()) {
      params.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"init", e.init.describe()}});
    }
    nlohmann::json j{{"config", cfg_}, {"parameter_count", parameter_count()}, {"parameters", params}};
    if (auto v = variant_of(cfg_)) j["variant"] = std::string(variant_name(*v));
    return j;
  }

 private:
  const Tensor& p(const std::string& name) const { return store_[name]; }

  nn::ConvParams conv_params(const std::string& prefix) const { return {p(prefix + ".w"), p(prefix + ".b")}; }

  nn::DenseBlockConfig block_config(std::size_t in) const { return {cfg_.block_layers, cfg_.growth_rate, in}; }

  nn::DenseBlockParams block_params(const std::string& prefix) const {
    nn::DenseBlockParams bp;
    for (std::size_t j = 0; j < cfg_.block_layers; ++j) {
      bp.layers.push_back(conv_params(prefix + ".block.layer" + std::to_string(j + 1)));
    }
    return bp;
  }

  nn::AttentionGateParams gate_params(const std::string& prefix) const {
    return {p(prefix + ".wx"), p(prefix + ".wg"), p(prefix + ".bg"), p(prefix + ".psi"), p(prefix + ".bpsi")};
  }

  nn::LstmParams lstm_params(const std::string& prefix) const {
    auto q = [&](const char* n) { return p(prefix + n); };
    return {q("Wi"), q("Ui"), q("bi"), q("Wf"), q("Uf"), q("bf"), q("Wo"), q("Uo"), q("bo"), q("Wc"), q("Uc"), q("bc")};
  }

  nn::SkipFusionParams fusion_params(const std::string& prefix) const {
    nn::FusionParams fp{p(prefix + ".fuse.Wyf"), p(prefix + ".fuse.Wyb"), p(prefix + ".fuse.by"), {}, {}};
    if (cfg_.use_lstm_attention) {
      fp.va = p(prefix + ".fuse.va");
      fp.Wa = p(prefix + ".fuse.Wa");
    }
    return {lstm_params(prefix + ".lstm.fwd."), lstm_params(prefix + ".lstm.bwd."), fp};
  }

  ModelConfig cfg_;
  ParameterStore store_;
};

inline Model build(const ModelConfig& cfg) { return Model(cfg); }

inline Model build_variant(std::string_view name, const ModelConfig& base) {
  return Model(configure_variant(parse_variant(name), base));
}

// ---------------------------------------------------------------------------
// Weight files

inline void save_weights(const Model& model, const std::filesystem::path& path) {
  std::vector<dtf::NamedTensor> entries;
  for (const auto& e : model.parameters().entries()) entries.push_back({e.name, e.tensor});
  dtf::write_container(path, entries, {{"model_config", model.config()}});
}

/// Loads into the schema implied by `cfg`; any missing, extra or mis-shaped
/// name is reported and no model is returned.
inline Model load_weights(const std::filesystem::path& path, const ModelConfig& cfg) {
  const auto container = dtf::read_container(path);
  const auto schema = parameter_schema(cfg);
  std::map<std::string, const Tensor*> found;
  for (const auto& e : container.tensors) found.emplace(e.name, &e.tensor);

  std::vector<std::string> missing, extra, mismatched;
  std::set<std::string> expected;
  for (const auto& spec : schema) {
    expected.insert(spec.name);
    const auto it = found.find(spec.name);
    if (it == found.end()) {
      missing.push_back(spec.name);
    } else if (it->second->shape() != spec.shape) {
      mismatched.push_back(spec.name + " " + to_string(it->second->shape()) + " != " + to_string(spec.shape));
    }
  }
  for (const auto& e : container.tensors) {
    if (!expected.contains(e.name)) extra.push_back(e.name);
  }
  if (!missing.empty() || !extra.empty() || !mismatched.empty()) throw SchemaError(missing, extra, mismatched);

  ParameterStore store;
  for (const auto& spec : schema) {
    const Tensor& t = *found.at(spec.name);
    store.add(spec.name, Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end())),
              spec.init);
  }
  return Model(cfg, std::move(store));
}

inline Model load_weights(const std::filesystem::path& path) {
  const auto container = dtf::read_container(path);
  if (!container.header.contains("model_config")) throw FormatError("weight file has no model_config", 0);
  return load_weights(path, container.header["model_config"].get<ModelConfig>());
}

}  // namespace dabdu
