#include "dape/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dape/errors.hpp"
#include "dape/kernels.hpp"
#include "dape/phi.hpp"

namespace dape {

void ParameterStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named '" + name + "'");
  return values_[it->second];
}

Tensor& ParameterStore::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterStore&>(*this).get(name));
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

bool ParameterStore::operator==(const ParameterStore& o) const {
  if (names_ != o.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i].shape() != o.values_[i].shape() || !std::ranges::equal(values_[i].data(), o.values_[i].data())) return false;
  return true;
}

namespace {

std::string layer_name(std::size_t l) { return "layer" + std::to_string(l); }

class Initializer {
 public:
  Initializer(ParameterStore& store, std::uint64_t seed) : store_(store), seed_(seed) {}

  void normal(const std::string& name, Shape shape, double sd) {
    Rng rng(derive_seed(seed_, fnv1a(name)));
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = rng.normal(0.0, sd);
    store_.add(name, std::move(t));
  }
  void fill(const std::string& name, Shape shape, double value) { store_.add(name, Tensor(std::move(shape), value)); }

  void projections(const std::string& prefix, std::size_t d) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (const char* w : {"wq", "wk", "wv"}) normal(prefix + "." + w, {d, d}, sd);
  }

  // Near-identity depthwise kernels: small uniform taps plus one at the centre.
  void nfa(const std::string& prefix, const DapeConfig& c) {
    const auto widths = split_widths(c.d, c.mu);
    for (int k = 0; k < 3; ++k) {
      const std::string name = prefix + ".conv" + std::to_string(k);
      const std::size_t ks = c.kernels[k];
      const double bound = 1.0 / static_cast<double>(ks * ks);
      Rng rng(derive_seed(seed_, fnv1a(name)));
      Tensor t({ks, ks, widths[k]});
      for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
      for (std::size_t ch = 0; ch < widths[k]; ++ch) t.at(ks / 2, ks / 2, ch) += 1.0;
      store_.add(name, std::move(t));
    }
    projections(prefix + ".image", c.d);
    projections(prefix + ".text", c.d);
  }

 private:
  ParameterStore& store_;
  std::uint64_t seed_;
};

ProjectionVars projections(const BoundModel& m, const std::string& prefix) {
  return {m[prefix + ".wq"], m[prefix + ".wk"], m[prefix + ".wv"]};
}

NfaParams nfa_params(const BoundModel& m, const std::string& prefix) {
  return {{m[prefix + ".conv0"], m[prefix + ".conv1"], m[prefix + ".conv2"]},
          projections(m, prefix + ".image"),
          projections(m, prefix + ".text")};
}

}  // namespace

DapeModel DapeModel::init(const DapeConfig& config) {
  config.validate();
  DapeModel m;
  m.config = config;
  Initializer init(m.params, config.seed);
  const std::size_t d = config.d, tokens = config.image_tokens();
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_name(l);
    init.projections(p + ".coarse.image", d);
    init.projections(p + ".coarse.text", d);
    if (config.enable_cwa) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(d));
      init.normal(p + ".cwa.gate.w1", {d, d}, sd);
      init.fill(p + ".cwa.gate.b1", {1, d}, 0.0);
      init.normal(p + ".cwa.gate.w2", {d, d}, sd);
      init.fill(p + ".cwa.gate.b2", {1, d}, 0.0);
      init.normal(p + ".cwa.bridge", {tokens, d}, 1.0 / std::sqrt(static_cast<double>(tokens)));
      init.projections(p + ".cwa.text", d);
      init.projections(p + ".cwa.channel", d);
    }
    if (config.main_path_nfa()) init.nfa(p + ".nfa", config);
    if (config.phi_layer(l)) {
      init.projections(p + ".phi.coarse.image", d);
      init.projections(p + ".phi.coarse.text", d);
      init.normal(p + ".phi.detail.w", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
      init.fill(p + ".phi.detail.b", {1, d}, 0.0);
      init.nfa(p + ".phi.nfa", config);
      init.projections(p + ".phi.query", d);
      init.projections(p + ".phi.memory", d);
    }
  }
  if (config.enable_phi) init.normal("slots", {config.slots(), d}, 0.02);
  init.fill("log_temperature", {1, 1}, std::log(config.temperature));
  return m;
}

BoundModel::BoundModel(Tape& tape, const DapeModel& model, bool trainable) : tape_(&tape), config_(&model.config) {
  for (const auto& name : model.params.names()) {
    const Tensor& v = model.params.get(name);
    index_.emplace(name, vars_.size());
    vars_.emplace_back(name, trainable ? tape.leaf(v) : tape.constant(v));
  }
}

BoundModel::BoundModel(const DapeModel& model, const std::vector<Var>& vars) : config_(&model.config) {
  if (vars.size() != model.params.size() || vars.empty()) {
    throw DimensionError("expected " + std::to_string(model.params.size()) + " parameter vars, got " +
                         std::to_string(vars.size()));
  }
  tape_ = &vars.front().tape();
  for (std::size_t i = 0; i < vars.size(); ++i) {
    index_.emplace(model.params.names()[i], i);
    vars_.emplace_back(model.params.names()[i], vars[i]);
  }
}

Var BoundModel::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named '" + name + "'");
  return vars_[it->second].second;
}

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& ids, const Featurizer& featurizer,
                 const DapeConfig& config) {
  if (ids.size() < 2) throw ConfigError("a batch needs at least 2 pairs");
  Batch b;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t id = ids[i];
    if (id >= corpus.scenes.size()) throw IndexError("scene " + std::to_string(id) + " not in corpus");
    const Tensor& px = corpus.pixels[id];
    if (px.dim(0) != config.image_size || px.dim(1) != config.image_size) {
      throw DimensionError("scene canvas " + shape_string(px.shape()) + " does not match image_size " +
                           std::to_string(config.image_size));
    }
    b.images.push_back(featurizer.image(px));
    b.highpassed.push_back(highpass_channels(b.images.back(), config.cutoff));
    b.texts.push_back(featurizer.text(corpus.scenes[id].caption(), config.text_len));
    b.labels.push_back(i);
    b.scene_ids.push_back(id);
  }
  return b;
}

namespace {

struct SampleResult {
  Var image, text;  // 1×d each, before normalization
  std::vector<LayerTrace> layers;
};

SampleResult forward_sample(const BoundModel& m, const Tensor& image, const Tensor& highpassed, const Tensor& text,
                            DecisionLog* log) {
  const DapeConfig& c = m.config();
  Tape& tape = m.tape();
  CostMeter& meter = tape.cost();
  const std::size_t tokens = c.image_tokens();

  Var x = tape.constant(tokenize_image(downsample_avg(image, c.s), c.grid_y, c.grid_x).tokens);
  Var y = tape.constant(tokenize_text(text, c.text_tokens).tokens);
  std::vector<std::size_t> real(tokens);
  std::iota(real.begin(), real.end(), 0);
  // Adds an I-row update to the real tokens, leaving any slots alone.
  auto add_real = [&](Var stream, Var update) {
    if (stream.value().rows() == tokens) return add(stream, update);
    return scatter_rows(stream, real, add(gather_rows(stream, real), update));
  };
  const Var map = c.main_path_nfa() ? tape.constant(image) : Var{};
  DetailState detail;

  SampleResult out;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = layer_name(l);
    const CostCounters before = meter.total();
    LayerTrace lt;
    lt.layer = l;
    lt.image_tokens = x.value().rows();
    lt.text_tokens = y.value().rows();
    const Var y_in = y;

    CoarseAlignOutput coarse;
    {
      auto s = meter.scope("coarse");
      coarse = coarse_align_tokens(x, y, projections(m, p + ".coarse.image"), projections(m, p + ".coarse.text"),
                                   c.k0, c.mask_mode, log);
    }
    lt.a0 = coarse.a0;
    x = add(x, coarse.m1);
    Var fused = coarse.t1;
    if (c.enable_cwa) {
      auto s = meter.scope("cwa");
      const Var real_x = x.value().rows() == tokens ? x : gather_rows(x, real);
      const CwaParams cp{{m[p + ".cwa.gate.w1"], m[p + ".cwa.gate.b1"], m[p + ".cwa.gate.w2"], m[p + ".cwa.gate.b2"]},
                         m[p + ".cwa.bridge"],
                         projections(m, p + ".cwa.text"),
                         projections(m, p + ".cwa.channel")};
      CwaOutput cw = cwa_tokens(real_x, coarse.t1, cp, c.cwa(), log);
      fused = fuse_text(coarse.t1, cw.t2);
      lt.ac = std::move(cw.ac);
    }
    y = add(y, fused);

    if (c.main_path_nfa()) {
      NfaOutput nfa = nfa_forward(map, y, nfa_params(m, p + ".nfa"), c.nfa(true), log);
      x = add_real(x, pool_to_level1(nfa.m2));
      lt.nfa = std::move(nfa.mask);
    }

    if (c.phi_layer(l)) {
      const PhiParams pp{m["slots"],
                         m[p + ".phi.detail.w"],
                         m[p + ".phi.detail.b"],
                         projections(m, p + ".phi.coarse.image"),
                         projections(m, p + ".phi.coarse.text"),
                         nfa_params(m, p + ".phi.nfa"),
                         projections(m, p + ".phi.query"),
                         projections(m, p + ".phi.memory")};
      const CostCounters pre = meter.total();
      PhiOutput phi = phi_inject(l, x, tokens, highpassed, detail, y_in, pp, c.phi(), log);
      lt.injection_cost = meter.total() - pre;
      // The injection rewrites every row; keep the real tokens residual like the rest of the stack.
      x = add_real(phi.stream, x.value().rows() == tokens ? x : gather_rows(x, real));
      detail = phi.detail;
      lt.phi_a0 = std::move(phi.a0);
      lt.phi_nfa = std::move(phi.nfa_mask);
    }
    lt.detail_generation = detail.generation;

    require_finite(x.value(), "the image stream after " + p);
    require_finite(y.value(), "the text stream after " + p);
    lt.cost = meter.total() - before;
    out.layers.push_back(std::move(lt));
  }
  out.image = mean_rows(x);
  out.text = mean_rows(y);
  return out;
}

}  // namespace

ForwardResult forward(const BoundModel& model, const Batch& batch, DecisionLog* decisions) {
  if (batch.size() == 0) throw ConfigError("empty batch");
  if (batch.images.size() != batch.texts.size() || batch.highpassed.size() != batch.images.size()) {
    throw DimensionError("batch images and texts differ in count");
  }
  ForwardResult r;
  std::vector<Var> imgs, txts;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SampleResult s = forward_sample(model, batch.images[i], batch.highpassed[i], batch.texts[i], decisions);
    imgs.push_back(s.image);
    txts.push_back(s.text);
    r.trace.samples.push_back(std::move(s.layers));
  }
  r.image_embeddings = l2_normalize_rows(concat_rows(imgs));
  r.text_embeddings = l2_normalize_rows(concat_rows(txts));
  r.trace.cost = model.tape().cost();
  return r;
}

ForwardResult forward(Tape& tape, const DapeModel& model, const Batch& batch) {
  const BoundModel bound(tape, model, false);
  return forward(bound, batch);
}

Var contrastive_loss(Var img, Var txt, Var inv_temperature, const std::vector<std::size_t>& labels) {
  const std::size_t b = img.value().rows();
  if (b < 2) throw ConfigError("contrastive loss needs a batch of at least 2");
  if (txt.value().rows() != b || labels.size() != b) throw DimensionError("contrastive loss: batch sizes differ");
  const Var logits = mul_scalar(matmul(img, transpose(txt)), inv_temperature);
  std::vector<std::pair<std::size_t, std::size_t>> i2t, t2i;
  for (std::size_t i = 0; i < b; ++i) {
    i2t.emplace_back(i, labels[i]);
    t2i.emplace_back(labels[i], i);
  }
  const Var a = mean(pick(log_softmax(logits), i2t));
  const Var bb = mean(pick(log_softmax(transpose(logits)), t2i));
  return scale(add(a, bb), -0.5);
}

double contrastive_loss(const Tensor& img, const Tensor& txt, double temperature,
                        const std::vector<std::size_t>& labels) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  Tape tape;
  return contrastive_loss(tape.constant(img), tape.constant(txt), tape.constant(Tensor::scalar(1.0 / temperature)),
                          labels)
      .value()[0];
}

Var batch_loss(const BoundModel& model, const Batch& batch, DecisionLog* decisions) {
  const ForwardResult f = forward(model, batch, decisions);
  const Var inv_t = exp(scale(model["log_temperature"], -1.0));
  return contrastive_loss(f.image_embeddings, f.text_embeddings, inv_t, batch.labels);
}

StepResult train_step(DapeModel& model, const Batch& batch) {
  Tape tape;
  const BoundModel bound(tape, model, true);
  const Var loss = batch_loss(bound, batch);
  StepResult r;
  r.loss = loss.value()[0];
  if (!std::isfinite(r.loss)) throw NumericError("non-finite training loss");
  tape.backward(loss);
  const double lr = model.config.learning_rate;
  double sq = 0.0;
  for (const auto& [name, v] : bound.vars()) {
    const Tensor g = tape.grad(v);
    Tensor& p = model.params.get(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      sq += g[i] * g[i];
      p[i] -= lr * g[i];
    }
  }
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) throw NumericError("non-finite gradient");
  r.cost = tape.cost();
  return r;
}

CostReport cost_report(const ForwardTrace& trace) {
  CostReport r;
  for (const char* m : {"coarse", "cwa", "nfa", "phi"}) r.modules[m].counters = trace.cost.top_level(m);
  r.total = trace.cost.total();
  r.fine_macs = trace.cost.containing("nfa").macs;
  auto count = [&](const HierarchicalMask& h) {
    r.fine_cosines += h.total_cosines();
    r.uniform_cosines += h.uniform_cosines();
    ++r.hierarchies;
  };
  for (const auto& sample : trace.samples)
    for (const auto& l : sample) {
      r.modules["coarse"].tokens += l.image_tokens + l.text_tokens;
      if (l.ac) r.modules["cwa"].tokens += l.ac->weights.rows();
      if (l.nfa) {
        r.modules["nfa"].tokens += 4 * l.nfa->image_tokens;
        count(*l.nfa);
      }
      if (l.phi_nfa) {
        r.modules["phi"].tokens += 4 * l.phi_nfa->image_tokens;
        count(*l.phi_nfa);
      }
    }
  return r;
}

Retrieval retrieval(const Tensor& img, const Tensor& txt, const std::vector<std::size_t>& labels) {
  const Tensor sim = matmul(img, transpose(txt));
  Retrieval r;
  r.n = img.rows();
  for (std::size_t i = 0; i < r.n; ++i) {
    const double own = sim.at(i, labels[i]);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < sim.cols(); ++j)
      if (j != labels[i] && sim.at(i, j) >= own) ++rank;
    if (rank < 1) r.r1 += 1.0;
    if (rank < 5) r.r5 += 1.0;
  }
  r.r1 /= static_cast<double>(r.n);
  r.r5 /= static_cast<double>(r.n);
  return r;
}

Retrieval evaluate_retrieval(const DapeModel& model, const Batch& batch) {
  Tape tape;
  const ForwardResult f = forward(tape, model, batch);
  return retrieval(f.image_embeddings.value(), f.text_embeddings.value(), batch.labels);
}

namespace {

constexpr char kMagic[5] = {'D', 'A', 'P', 'E', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw FileError("checkpoint truncated: " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{buf[i]} << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const DapeModel& model, const std::string& path) {
  nlohmann::json header;
  header["config"] = to_json(model.config);
  std::uint64_t offset = 0;
  for (const auto& name : model.params.names()) {
    const Tensor& t = model.params.get(name);
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * 8;
  }
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);
  put_u64(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& name : model.params.names())
    for (double v : model.params.get(name).data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw FileError("write failed for checkpoint " + path);
}

DapeModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint " + path);
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0) throw FileError("not a DAPE1 checkpoint: " + path);
  const std::uint64_t len = get_u64(in, path);
  std::string h(len, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw FileError("checkpoint truncated: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw FileError("checkpoint header unreadable in " + path + ": " + e.what());
  }
  DapeModel m;
  m.config = config_from_json(header.at("config"));
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<Shape>());
    for (auto& v : t.storage()) v = std::bit_cast<double>(get_u64(in, path));
    m.params.add(entry.at("name").get<std::string>(), std::move(t));
  }
  return m;
}

}  // namespace dape
