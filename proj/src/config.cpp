#include "dape/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "dape/errors.hpp"

namespace dape {

namespace {

template <class E>
struct EnumNames;

template <>
struct EnumNames<MaskMode> {
  static constexpr std::array<std::pair<MaskMode, const char*>, 2> v{
      {{MaskMode::kMatmul, "matmul"}, {MaskMode::kPreSoftmax, "pre-softmax"}}};
};
template <>
struct EnumNames<ResidualSource> {
  static constexpr std::array<std::pair<ResidualSource, const char*>, 2> v{
      {{ResidualSource::kM3, "m3"}, {ResidualSource::kM2, "m2"}}};
};
template <>
struct EnumNames<ChannelAgg> {
  static constexpr std::array<std::pair<ChannelAgg, const char*>, 2> v{
      {{ChannelAgg::kMean, "mean"}, {ChannelAgg::kSum, "sum"}}};
};
template <>
struct EnumNames<NfaMerge> {
  static constexpr std::array<std::pair<NfaMerge, const char*>, 2> v{
      {{NfaMerge::kSlotsOnly, "slots_only"}, {NfaMerge::kPoolAdd, "pool_add"}}};
};

template <class E>
std::string enum_name(E e) {
  for (const auto& [k, n] : EnumNames<E>::v)
    if (k == e) return n;
  return "?";
}

template <class E>
E enum_from(const std::string& key, const nlohmann::json& j) {
  if (!j.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  const auto s = j.get<std::string>();
  std::string options;
  for (const auto& [k, n] : EnumNames<E>::v) {
    if (s == n) return k;
    options += std::string(options.empty() ? "" : ", ") + n;
  }
  throw ConfigError("config key '" + key + "': unknown value '" + s + "' (expected one of " + options + ")");
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

}  // namespace

void DapeConfig::validate() const {
  require(d >= 7, "d must be at least 7 so every granularity branch gets a channel");
  require(n_layers >= 1, "n_layers must be positive");
  require(s >= 1 && image_size % s == 0, "s must divide image_size");
  const std::size_t coarse_side = image_size / std::max<std::size_t>(s, 1);
  require(grid_y >= 1 && grid_x >= 1 && coarse_side % grid_y == 0 && coarse_side % grid_x == 0,
          "grid must divide image_size / s");
  require(text_tokens >= 1 && text_tokens <= text_len, "text_tokens must lie in [1, text_len]");
  for (auto [name, v] : {std::pair{"k0", k0}, {"k_c", k_c}, {"k_thr", k_thr}})
    require(std::isfinite(v) && v >= -1.0 && v <= 1.0, std::string(name) + " must lie in [-1, 1]");
  require(segments >= 1 && d % segments == 0, "segments must divide d");
  require(k1 >= 1 && k1 <= d / std::max<std::size_t>(segments, 1), "k1 must lie in [1, d / segments]");
  double mu_sum = 0.0;
  for (double m : mu) {
    require(m > 0.0, "mu entries must be positive");
    mu_sum += m;
  }
  require(std::abs(mu_sum - 1.0) <= 1e-12, "mu must sum to 1");
  for (std::size_t k : kernels) require(k % 2 == 1, "kernel sizes must be odd");
  require(tau_d >= 0.0 && tau_d <= 1.0, "tau_d must lie in [0, 1]");
  require(image_size % (2 * nfa_gy()) == 0 && image_size % (2 * nfa_gx()) == 0,
          "2 x nfa grid must divide image_size");
  require(!main_path_nfa() || (nfa_gy() == grid_y && nfa_gx() == grid_x),
          "the main-path NFA needs nfa_grid equal to grid so its update pools onto the image tokens");
  require(nfa_j1() >= 1 && 4 * nfa_j1() <= text_tokens, "nfa_text_tokens must lie in [1, text_tokens / 4]");
  require(phi_period >= 1, "phi_period must be at least 1");
  require(slots() >= 1, "phi_slots must be positive");
  require(cutoff > 0.0 && cutoff <= 1.0, "cutoff must lie in (0, 1]");
  require(temperature > 0.0 && std::isfinite(temperature), "temperature must be positive");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be non-negative");
  require(batch_size >= 2, "batch_size must be at least 2");
  require(eval_every >= 1, "eval_every must be positive");
  require(corpus_scenes >= 4, "corpus_scenes must be at least 4");
  require(density_mix[0] >= 0 && density_mix[1] >= 0 && density_mix[2] >= 0 &&
              density_mix[0] + density_mix[1] + density_mix[2] > 0,
          "density_mix weights must be non-negative and not all zero");
}

CoarseAlignConfig DapeConfig::coarse() const { return {s, grid_y, grid_x, text_tokens, k0, mask_mode}; }

CwaSettings DapeConfig::cwa() const { return {segments, k1, k_c, cwa_agg, mask_mode}; }

NfaSettings DapeConfig::nfa(bool refine) const {
  NfaSettings n;
  n.hierarchy = {mu, k_thr, tau_d, refine};
  n.kernels = kernels;
  n.grid_y = nfa_gy();
  n.grid_x = nfa_gx();
  n.text_tokens = nfa_j1();
  n.keys_from_values = keys_from_values;
  n.mode = mask_mode;
  return n;
}

PhiSettings DapeConfig::phi() const {
  PhiSettings p;
  p.period = phi_period;
  p.k0 = k0;
  p.mode = mask_mode;
  p.nfa = nfa(enable_nfa);
  p.residual = residual_source;
  return p;
}

nlohmann::json to_json(const DapeConfig& c) {
  nlohmann::json j;
  j["d"] = c.d;
  j["n_layers"] = c.n_layers;
  j["image_size"] = c.image_size;
  j["text_len"] = c.text_len;
  j["s"] = c.s;
  j["grid"] = {c.grid_y, c.grid_x};
  j["text_tokens"] = c.text_tokens;
  j["k0"] = c.k0;
  j["k_c"] = c.k_c;
  j["segments"] = c.segments;
  j["k1"] = c.k1;
  j["cwa_agg"] = enum_name(c.cwa_agg);
  j["mu"] = c.mu;
  j["kernels"] = c.kernels;
  j["k_thr"] = c.k_thr;
  j["tau_d"] = c.tau_d;
  j["nfa_grid"] = {c.nfa_grid_y, c.nfa_grid_x};
  j["nfa_text_tokens"] = c.nfa_text_tokens;
  j["keys_from_values"] = c.keys_from_values;
  j["nfa_merge"] = enum_name(c.nfa_merge);
  j["phi_period"] = c.phi_period;
  j["phi_slots"] = c.phi_slots;
  j["cutoff"] = c.cutoff;
  j["residual_source"] = enum_name(c.residual_source);
  j["mask_mode"] = enum_name(c.mask_mode);
  j["enable_cwa"] = c.enable_cwa;
  j["enable_nfa"] = c.enable_nfa;
  j["enable_phi"] = c.enable_phi;
  j["temperature"] = c.temperature;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["eval_every"] = c.eval_every;
  j["seed"] = c.seed;
  j["corpus_dir"] = c.corpus_dir;
  j["corpus_scenes"] = c.corpus_scenes;
  j["corpus_seed"] = c.corpus_seed;
  j["density_mix"] = c.density_mix;
  return j;
}

DapeConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const std::set<std::string> known = [] {
    std::set<std::string> k;
    const nlohmann::json defaults = to_json(DapeConfig{});
    for (const auto& [key, _] : defaults.items()) k.insert(key);
    return k;
  }();
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

  DapeConfig c;
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::remove_reference_t<decltype(out)>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  };
  auto get_pair = [&](const char* key, std::size_t& a, std::size_t& b) {
    if (!j.contains(key)) return;
    std::array<std::size_t, 2> v{};
    get(key, v);
    a = v[0];
    b = v[1];
  };
  auto get_enum = [&](const char* key, auto& out) {
    if (j.contains(key)) out = enum_from<std::remove_reference_t<decltype(out)>>(key, j.at(key));
  };
  get("d", c.d);
  get("n_layers", c.n_layers);
  get("image_size", c.image_size);
  get("text_len", c.text_len);
  get("s", c.s);
  get_pair("grid", c.grid_y, c.grid_x);
  get("text_tokens", c.text_tokens);
  get("k0", c.k0);
  get("k_c", c.k_c);
  get("segments", c.segments);
  get("k1", c.k1);
  get_enum("cwa_agg", c.cwa_agg);
  get("mu", c.mu);
  get("kernels", c.kernels);
  get("k_thr", c.k_thr);
  get("tau_d", c.tau_d);
  get_pair("nfa_grid", c.nfa_grid_y, c.nfa_grid_x);
  get("nfa_text_tokens", c.nfa_text_tokens);
  get("keys_from_values", c.keys_from_values);
  get_enum("nfa_merge", c.nfa_merge);
  get("phi_period", c.phi_period);
  get("phi_slots", c.phi_slots);
  get("cutoff", c.cutoff);
  get_enum("residual_source", c.residual_source);
  get_enum("mask_mode", c.mask_mode);
  get("enable_cwa", c.enable_cwa);
  get("enable_nfa", c.enable_nfa);
  get("enable_phi", c.enable_phi);
  get("temperature", c.temperature);
  get("learning_rate", c.learning_rate);
  get("batch_size", c.batch_size);
  get("steps", c.steps);
  get("eval_every", c.eval_every);
  get("seed", c.seed);
  get("corpus_dir", c.corpus_dir);
  get("corpus_scenes", c.corpus_scenes);
  get("corpus_seed", c.corpus_seed);
  get("density_mix", c.density_mix);
  c.validate();
  return c;
}

DapeConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const DapeConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

}  // namespace dape
