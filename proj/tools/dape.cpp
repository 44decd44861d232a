// dape: corpus generation, checks, training, ablation and cost benchmarks.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dape/checks.hpp"
#include "dape/errors.hpp"
#include "dape/faults.hpp"
#include "dape/harness.hpp"

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3;

dape::Triple parse_mix(const std::string& s) {
  std::vector<double> v;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');) v.push_back(std::stod(part));
  if (v.size() != 3) throw dape::ConfigError("--density expects three comma-separated weights, got '" + s + "'");
  return {v[0], v[1], v[2]};
}

void print_rows(const std::vector<dape::MetricsRow>& rows) {
  std::cout << dape::metrics_header();
  for (const auto& r : rows) std::cout << dape::metrics_line(r);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DAPE alignment encoder at desk scale"};
  app.require_subcommand(1);

  std::size_t n = 64;
  std::uint64_t seed = 0;
  std::string density = "1,1,1", out = "corpus";
  auto* gen = app.add_subcommand("gen", "Render a synthetic shapes corpus");
  gen->add_option("--n", n, "Number of scenes (>= 4)");
  gen->add_option("--seed", seed, "Corpus seed");
  gen->add_option("--density", density, "Sparse,mixed,dense weights");
  gen->add_option("--out", out, "Output directory");

  std::string suite, report;
  bool list = false;
  auto* check = app.add_subcommand("check", "Run the invariant, gradient and oracle suites");
  check->add_option("--suite", suite, "Suite or module name");
  check->add_option("--report", report, "Write the JSON report here");
  check->add_flag("--list", list, "List suites and exit");

  std::string config_path;
  auto* train = app.add_subcommand("train", "Train and write metrics.csv and checkpoint.bin");
  train->add_option("--config", config_path, "Config JSON")->required();
  auto* ablate = app.add_subcommand("ablate", "Train the five ablation variants");
  ablate->add_option("--config", config_path, "Config JSON")->required();
  std::vector<double> densities{0.0, 0.25, 0.5, 0.75, 1.0};
  auto* bench = app.add_subcommand("bench", "Fine-alignment cost against density");
  bench->add_option("--config", config_path, "Config JSON")->required();
  bench->add_option("--densities", densities, "Dense-row fractions")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    dape::load_faults_from_env();
    if (*gen) {
      const auto corpus = dape::generate_corpus(n, seed, parse_mix(density));
      dape::write_corpus(corpus, out);
      std::cout << "wrote " << corpus.scenes.size() << " scenes to " << out << "\n";
      return kOk;
    }
    if (*check) {
      if (list) {
        for (const auto& s : dape::list_suites()) std::cout << s.module << "\t" << s.name << "\n";
        return kOk;
      }
      const auto r = dape::run_checks(suite);
      for (const auto& s : r.suites) {
        std::printf("%s %s/%s (%.3f s)\n", s.passed ? "PASS" : "FAIL", s.module.c_str(), s.name.c_str(), s.seconds);
        for (const auto& f : s.failures) std::cout << "    " << f << "\n";
      }
      if (!report.empty()) {
        std::ofstream f(report);
        if (!f) throw dape::FileError("cannot write " + report);
        f << r.to_json().dump(2) << "\n";
      }
      return r.passed() ? kOk : kCheckFailed;
    }
    const dape::DapeConfig config = dape::load_config(config_path);
    if (*train) {
      const auto r = dape::cmd_train(config);
      print_rows(r.rows);
      std::cout << "run directory: " << r.dir << "\n";
      return kOk;
    }
    if (*ablate) {
      const auto rows = dape::cmd_ablate(config);
      std::cout << "variant,r1,r5,macs_total,macs_fine,steps_per_sec\n";
      for (const auto& r : rows)
        std::cout << r.variant << "," << dape::format_double(r.eval.r1) << "," << dape::format_double(r.eval.r5) << ","
                  << r.cost.total.macs << "," << r.cost.fine_macs << "," << dape::format_double(r.steps_per_sec) << "\n";
      std::cout << "run directory: " << dape::run_dir(config) << "\n";
      return kOk;
    }
    if (*bench) {
      const auto rows = dape::cmd_bench(config, densities);
      std::cout << "target,dense_fraction,nfa_cosines,uniform_cosines,ratio,closed_form\n";
      for (const auto& r : rows)
        std::cout << dape::format_double(r.target) << "," << dape::format_double(r.dense_fraction) << ","
                  << r.nfa_cosines << "," << r.uniform_cosines << "," << dape::format_double(r.ratio) << ","
                  << dape::format_double(r.closed_form) << "\n";
      std::cout << "run directory: " << dape::run_dir(config) << "\n";
      return kOk;
    }
  } catch (const dape::FileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const dape::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: bad number: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
