#include "dape/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dape/errors.hpp"
#include "dape/kernels.hpp"

namespace dape {

namespace fs = std::filesystem;

std::string run_root() {
  const char* env = std::getenv("DAPE_RUN_DIR");
  return env && *env ? env : "runs";
}

std::string run_dir(const DapeConfig& config) {
  const fs::path dir = fs::path(run_root()) / config_hash(config);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir.string();
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out << text;
  if (!out) throw FileError("write failed for " + path.string());
}

// Chunks of `size`, folding a trailing single element into the previous chunk.
std::vector<std::vector<std::size_t>> chunks(const std::vector<std::size_t>& ids, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ids.size(); i += size)
    out.emplace_back(ids.begin() + static_cast<long>(i), ids.begin() + static_cast<long>(std::min(ids.size(), i + size)));
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

}  // namespace

FeaturizedCorpus prepare_corpus(const DapeConfig& config, const std::string& dir) {
  FeaturizedCorpus fc;
  if (!config.corpus_dir.empty()) {
    if (!fs::exists(fs::path(config.corpus_dir) / "manifest.json")) {
      throw FileError("corpus not found at " + config.corpus_dir);
    }
    fc.corpus = read_corpus(config.corpus_dir);
  } else {
    const fs::path cdir = dir.empty() ? fs::path() : fs::path(dir) / "corpus";
    const bool cached = !dir.empty() && fs::exists(cdir / "manifest.json");
    if (cached) fc.corpus = read_corpus(cdir.string());
    // A cached corpus from another configuration is regenerated.
    if (!cached || fc.corpus.seed != config.corpus_seed || fc.corpus.density_mix != config.density_mix || fc.corpus.scenes.size() != config.corpus_scenes ||
        fc.corpus.scenes.front().canvas != config.image_size) {
      fc.corpus = generate_corpus(config.corpus_scenes, config.corpus_seed, config.density_mix, config.image_size);
      if (!dir.empty()) write_corpus(fc.corpus, cdir.string());
    }
  }
  std::vector<std::size_t> ids(fc.corpus.scenes.size());
  std::iota(ids.begin(), ids.end(), 0);
  fc.all = make_batch(fc.corpus, ids, Featurizer(config.d, config.seed), config);
  for (std::size_t i : ids) (fc.corpus.scenes[i].eval ? fc.eval : fc.train).push_back(i);
  if (fc.train.size() < 2 || fc.eval.size() < 2) {
    throw ConfigError("corpus split leaves fewer than 2 scenes on one side; use more scenes");
  }
  return fc;
}

Batch subset(const Batch& b, const std::vector<std::size_t>& rows) {
  Batch out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= b.size()) throw IndexError("batch row " + std::to_string(r) + " out of range");
    out.images.push_back(b.images[r]);
    out.highpassed.push_back(b.highpassed[r]);
    out.texts.push_back(b.texts[r]);
    out.labels.push_back(i);
    out.scene_ids.push_back(b.scene_ids[r]);
  }
  return out;
}

double split_loss(const DapeModel& model, const Batch& all, const std::vector<std::size_t>& ids) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& chunk : chunks(ids, model.config.batch_size)) {
    const Batch b = subset(all, chunk);
    Tape tape;
    const ForwardResult f = forward(tape, model, b);
    const Var inv_t = tape.constant(Tensor::scalar(std::exp(-model.params.get("log_temperature")[0])));
    total += contrastive_loss(f.image_embeddings, f.text_embeddings, inv_t, b.labels).value()[0] * chunk.size();
    n += chunk.size();
  }
  return total / static_cast<double>(n);
}

std::string metrics_header() {
  return "run_id,config_hash,step,batch_loss,train_loss,r1,r5,n_eval,macs_coarse,macs_cwa,macs_nfa,macs_phi,"
         "macs_total,fine_cosines,uniform_cosines\n";
}

std::string metrics_line(const MetricsRow& r) {
  const std::string batch = std::isnan(r.batch_loss) ? std::string() : format_double(r.batch_loss);
  std::string s = r.run_id + "," + r.config_hash + "," + std::to_string(r.step) + "," + batch +
                  "," + format_double(r.train_loss) + "," + format_double(r.eval.r1) + "," + format_double(r.eval.r5) +
                  "," + std::to_string(r.eval.n);
  for (const char* m : {"coarse", "cwa", "nfa", "phi"}) s += "," + std::to_string(r.cost.modules.at(m).counters.macs);
  s += "," + std::to_string(r.cost.total.macs) + "," + std::to_string(r.cost.fine_cosines) + "," +
       std::to_string(r.cost.uniform_cosines) + "\n";
  return s;
}

namespace {

MetricsRow measure(const DapeModel& model, const FeaturizedCorpus& fc, const std::string& run_id, std::size_t step,
                   double batch_loss) {
  MetricsRow row;
  row.run_id = run_id;
  row.config_hash = config_hash(model.config);
  row.step = step;
  row.batch_loss = batch_loss;
  row.train_loss = split_loss(model, fc.all, fc.train);
  const Batch eval = subset(fc.all, fc.eval);
  Tape tape;
  const ForwardResult f = forward(tape, model, eval);
  row.eval = retrieval(f.image_embeddings.value(), f.text_embeddings.value(), eval.labels);
  row.cost = cost_report(f.trace);
  return row;
}

}  // namespace

TrainReport cmd_train(const DapeConfig& config, const TrainOptions& options) {
  config.validate();
  TrainReport report;
  report.dir = options.write ? run_dir(config) : std::string();
  FeaturizedCorpus owned;
  const FeaturizedCorpus* fc = options.corpus;
  if (!fc) {
    owned = prepare_corpus(config, report.dir);
    fc = &owned;
  }
  report.model = DapeModel::init(config);
  report.rows.push_back(measure(report.model, *fc, options.run_id, 0, std::nan("")));

  const auto start = std::chrono::steady_clock::now();
  double train_seconds = 0.0;
  std::vector<std::size_t> order;
  std::size_t cursor = 0, epoch = 0;
  const std::size_t per_batch = std::min(config.batch_size, fc->train.size());
  for (std::size_t step = 1; step <= config.steps; ++step) {
    if (cursor + per_batch > order.size()) {
      order = fc->train;
      Rng rng(derive_seed(config.seed, fnv1a("batches") + epoch++));
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
      cursor = 0;
    }
    const Batch b = subset(fc->all, std::vector<std::size_t>(order.begin() + static_cast<long>(cursor),
                                                             order.begin() + static_cast<long>(cursor + per_batch)));
    cursor += per_batch;
    const auto t0 = std::chrono::steady_clock::now();
    const StepResult r = train_step(report.model, b);
    train_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (step % config.eval_every == 0 || step == config.steps) {
      report.rows.push_back(measure(report.model, *fc, options.run_id, step, r.loss));
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.steps_per_sec = train_seconds > 0.0 ? static_cast<double>(config.steps) / train_seconds : 0.0;

  if (options.write) {
    std::string csv = metrics_header();
    for (const auto& row : report.rows) csv += metrics_line(row);
    write_file(fs::path(report.dir) / "metrics.csv", csv);
    save_checkpoint(report.model, (fs::path(report.dir) / "checkpoint.bin").string());
    write_file(fs::path(report.dir) / "config.json", to_json(config).dump(2) + "\n");
    nlohmann::json timing{{"seconds", report.seconds}, {"train_seconds", train_seconds},
                          {"steps_per_sec", report.steps_per_sec}};
    write_file(fs::path(report.dir) / "timing.json", timing.dump(2) + "\n");
  }
  return report;
}

std::vector<std::pair<std::string, DapeConfig>> ablation_variants(const DapeConfig& config) {
  auto with = [&](bool cwa, bool nfa, bool phi) {
    DapeConfig c = config;
    c.enable_cwa = cwa;
    c.enable_nfa = nfa;
    c.enable_phi = phi;
    return c;
  };
  return {{"base", with(false, false, false)},
          {"+CWA", with(true, false, false)},
          {"+NFA", with(false, true, false)},
          {"+PHI", with(false, false, true)},
          {"+DAPE", with(true, true, true)}};
}

std::vector<AblationRow> cmd_ablate(const DapeConfig& config, bool write) {
  config.validate();
  const std::string dir = write ? run_dir(config) : std::string();
  const FeaturizedCorpus fc =
      prepare_corpus(config, dir);
  std::vector<AblationRow> rows;
  for (const auto& [name, variant] : ablation_variants(config)) {
    TrainOptions o;
    o.run_id = name;
    o.write = write;
    o.corpus = &fc;
    const TrainReport r = cmd_train(variant, o);
    rows.push_back({name, config_hash(variant), r.rows.back().eval, r.rows.back().cost, r.steps_per_sec});
  }
  if (write) {
    std::string csv = "variant,config_hash,r1,r5,macs_total,macs_fine,cosines_fine,macs_coarse,macs_cwa,macs_nfa,macs_phi\n";
    std::string timing = "variant,steps_per_sec\n";
    for (const auto& r : rows) {
      csv += r.variant + "," + r.config_hash + "," + format_double(r.eval.r1) + "," + format_double(r.eval.r5) + "," +
             std::to_string(r.cost.total.macs) + "," + std::to_string(r.cost.fine_macs) + "," +
             std::to_string(r.cost.fine_cosines);
      for (const char* m : {"coarse", "cwa", "nfa", "phi"}) csv += "," + std::to_string(r.cost.modules.at(m).counters.macs);
      csv += "\n";
      timing += r.variant + "," + format_double(r.steps_per_sec) + "\n";
    }
    write_file(fs::path(dir) / "ablation.csv", csv);
    write_file(fs::path(dir) / "ablation_timing.csv", timing);
  }
  return rows;
}

std::pair<Tensor, Tensor> density_scene(const DapeConfig& config, double dense_fraction, std::uint64_t seed) {
  if (!(dense_fraction >= 0.0 && dense_fraction <= 1.0)) throw ConfigError("density must lie in [0, 1]");
  const std::size_t gy = config.nfa_gy(), gx = config.nfa_gx(), n = gy * gx, side = config.image_size;
  const std::size_t dense = static_cast<std::size_t>(std::llround(dense_fraction * static_cast<double>(n)));
  std::vector<std::size_t> cells(n);
  std::iota(cells.begin(), cells.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(cells[i], cells[rng.below(i + 1)]);
  std::vector<bool> on(n, false);
  for (std::size_t i = 0; i < dense; ++i) on[cells[i]] = true;

  const Featurizer f(config.d, config.seed);
  const std::string word = kColorNames[seed % kColorNames.size()];
  std::string caption = word;
  for (std::size_t i = 1; i < config.text_len; ++i) caption += " " + word;
  const Tensor text = f.text(caption, config.text_len);

  Tensor map({side, side, config.d});
  const std::size_t ch = side / gy, cw = side / gx;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double sign = on[(y / ch) * gx + x / cw] ? 1.0 : -1.0;
      for (std::size_t k = 0; k < config.d; ++k) map.at(y, x, k) = sign * text.at(0, k);
    }
  return {map, text};
}

BenchRow bench_point(const DapeConfig& config, double dense_fraction) {
  const auto [map, text] = density_scene(config, dense_fraction, config.seed);
  NfaWeights w;
  const auto widths = split_widths(config.d, config.mu);
  for (int k = 0; k < 3; ++k) {
    const std::size_t ks = config.kernels[k];
    w.conv[k] = Tensor({ks, ks, widths[k]});
    for (std::size_t c = 0; c < widths[k]; ++c) w.conv[k].at(ks / 2, ks / 2, c) = 1.0;
  }
  w.image = w.text = ProjectionSet::identity(config.d);
  Tape tape;
  const NfaOutput out = nfa_forward(tape.constant(map), tape.constant(text), bind_constant(tape, w), config.nfa(true));

  BenchRow r;
  r.target = dense_fraction;
  const auto& h = out.mask;
  r.dense_fraction = static_cast<double>(h.dense[0].size()) / static_cast<double>(h.image_tokens);
  r.cosines = h.cosines;
  r.nfa_cosines = h.total_cosines();
  r.uniform_cosines = h.uniform_cosines();
  for (int k = 0; k < 3; ++k) {
    r.nfa_macs += tape.cost().containing("level" + std::to_string(k + 1)).macs;
    const std::uint64_t f = std::uint64_t{1} << (2 * k);
    r.uniform_macs += f * h.image_tokens * h.text_tokens * 3 * widths[k];
  }
  r.ratio = static_cast<double>(r.nfa_cosines) / static_cast<double>(r.uniform_cosines);
  r.closed_form = (1.0 + 20.0 * r.dense_fraction) / 21.0;
  return r;
}

std::vector<BenchRow> cmd_bench(const DapeConfig& config, const std::vector<double>& densities, bool write) {
  config.validate();
  std::vector<BenchRow> rows;
  for (double d : densities) rows.push_back(bench_point(config, d));
  if (write) {
    std::string csv =
        "target,dense_fraction,cosines_l1,cosines_l2,cosines_l3,nfa_cosines,uniform_cosines,nfa_macs,uniform_macs,"
        "ratio,closed_form\n";
    for (const auto& r : rows)
      csv += format_double(r.target) + "," + format_double(r.dense_fraction) + "," + std::to_string(r.cosines[0]) +
             "," + std::to_string(r.cosines[1]) + "," + std::to_string(r.cosines[2]) + "," +
             std::to_string(r.nfa_cosines) + "," + std::to_string(r.uniform_cosines) + "," +
             std::to_string(r.nfa_macs) + "," + std::to_string(r.uniform_macs) + "," + format_double(r.ratio) + "," +
             format_double(r.closed_form) + "\n";
    write_file(fs::path(run_dir(config)) / "bench.csv", csv);
  }
  return rows;
}

}  // namespace dape
