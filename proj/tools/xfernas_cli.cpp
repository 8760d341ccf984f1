// xfernas command-line front end. Every subcommand writes its result files
// and exits 0, or prints one "xfernas: error: ..." line and exits nonzero.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xfernas/archspace.hpp"
#include "xfernas/errors.hpp"
#include "xfernas/experiments.hpp"
#include "xfernas/search.hpp"
#include "xfernas/taskbench.hpp"
#include "xfernas/xfernet.hpp"

namespace fs = std::filesystem;
using namespace xfernas;

namespace {

void write_file(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("cannot write " + file.string());
  os << text;
  if (!os) throw Error("write failed: " + file.string());
}

// grid.csv -> grid_summary.csv
fs::path sibling(const fs::path& file, const std::string& suffix, const std::string& ext) {
  fs::path out = file;
  out.replace_filename(file.stem().string() + suffix + ext);
  return out;
}

// "0..9", "3", or "1,4,7".
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  try {
    if (const auto dots = text.find(".."); dots != std::string::npos) {
      std::size_t used = 0;
      const std::uint64_t lo = std::stoull(text.substr(0, dots), &used);
      if (used != dots) throw ConfigError("");
      const std::string hi_text = text.substr(dots + 2);
      const std::uint64_t hi = std::stoull(hi_text, &used);
      if (used != hi_text.size() || hi < lo) throw ConfigError("");
      for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
      return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw ConfigError("");
    }
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse seeds '" + text + "' (expected A..B or a comma list)");
  }
  if (out.empty()) throw ConfigError("no seeds given");
  return out;
}

std::string train_log_csv(const TrainLog& log) {
  std::string out = "epoch,loss\n";
  char buf[64];
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e + 1, log.epoch_loss[e]);
    out += buf;
  }
  return out;
}

struct TrainFlags {
  double alpha = 0.8;
  double lr = 1e-3;
  double wd = 1e-4;
  int epochs = 200;
  int batch = 32;
  int max_steps = 0;

  void add(CLI::App* app) {
    app->add_option("--alpha", alpha, "weight of the prediction loss")->capture_default_str();
    app->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    app->add_option("--wd", wd, "decoupled weight decay")->capture_default_str();
    app->add_option("--epochs", epochs)->capture_default_str();
    app->add_option("--batch", batch)->capture_default_str();
    app->add_option("--max-steps", max_steps, "cap on optimizer steps, 0 = none")->capture_default_str();
  }
  void apply(TrainConfig& t) const {
    t.alpha = alpha;
    t.lr = lr;
    t.weight_decay = wd;
    t.epochs = epochs;
    t.batch_size = batch;
    t.max_steps = max_steps;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xfernas: transfer-aware architecture search on a synthetic task suite"};
  app.require_subcommand(1);

  // sample
  std::uint64_t sample_seed = 0;
  int sample_b = 5;
  std::string sample_out;
  auto* sample = app.add_subcommand("sample", "emit a random genome as JSON");
  sample->add_option("--seed", sample_seed)->capture_default_str();
  sample->add_option("--b", sample_b, "blocks per cell")->capture_default_str();
  sample->add_option("--out", sample_out, "output file (stdout if omitted)");

  // suite init
  SuiteDescriptor suite_desc;
  std::string suite_out;
  auto* suite = app.add_subcommand("suite", "task suite descriptors");
  suite->require_subcommand(1);
  auto* suite_init = suite->add_subcommand("init", "write a suite descriptor; the last task is the target");
  suite_init->add_option("--seed", suite_desc.seed)->capture_default_str();
  suite_init->add_option("--tasks", suite_desc.n_tasks)->capture_default_str();
  suite_init->add_option("--tau", suite_desc.tau)->capture_default_str();
  suite_init->add_option("--noise", suite_desc.noise_sigma)->capture_default_str();
  suite_init->add_option("--out", suite_out)->required();

  // knowledge build
  std::string kb_suite, kb_out;
  int kb_per_task = 200;
  std::uint64_t kb_seed = 0;
  auto* knowledge = app.add_subcommand("knowledge", "source-task histories");
  knowledge->require_subcommand(1);
  auto* kb = knowledge->add_subcommand("build", "evaluate random genomes on every source task");
  kb->add_option("--suite", kb_suite)->required();
  kb->add_option("--per-task", kb_per_task)->capture_default_str();
  kb->add_option("--seed", kb_seed)->capture_default_str();
  kb->add_option("--out", kb_out)->required();

  // train
  std::string tr_history, tr_out, tr_suite, tr_target;
  std::uint64_t tr_seed = 0;
  TrainFlags tr_flags;
  auto* tr = app.add_subcommand("train", "fit the surrogate to a history and write a checkpoint");
  tr->add_option("--history", tr_history)->required();
  tr->add_option("--suite", tr_suite, "take the target task from this suite");
  tr->add_option("--target", tr_target, "target task id (default: suite target, else 'target')");
  tr->add_option("--seed", tr_seed)->capture_default_str();
  tr_flags.add(tr);
  tr->add_option("--out", tr_out, "checkpoint prefix")->required();

  // search
  std::string se_suite, se_source, se_out;
  SearchConfig se_cfg;
  bool se_no_transfer = false;
  TrainFlags se_flags;
  auto* se = app.add_subcommand("search", "run the two-phase search on the suite's target task");
  se->add_option("--suite", se_suite)->required();
  se->add_option("--source", se_source, "source history (JSONL)");
  se->add_flag("--no-transfer", se_no_transfer, "ignore source knowledge");
  se->add_option("--budget", se_cfg.budget)->capture_default_str();
  se->add_option("--eta", se_cfg.eta)->capture_default_str();
  se->add_option("--ascent-steps", se_cfg.max_ascent_steps)->capture_default_str();
  se->add_option("--starts", se_cfg.starts_per_round, "proposals per round")->capture_default_str();
  se->add_option("--rounds", se_cfg.rounds)->capture_default_str();
  se->add_option("--seed", se_cfg.seed)->capture_default_str();
  se_flags.max_steps = ComparisonConfig::default_search().train.max_steps;
  se_flags.add(se);
  se->add_option("--out", se_out, "report JSON; a .csv sibling is written too")->required();

  // ablation
  std::string ab_config, ab_out;
  bool ab_progress = false;
  auto* ab = app.add_subcommand("ablation", "source/target knowledge-size grid");
  ab->add_option("--config", ab_config, "JSON config (defaults if omitted)");
  ab->add_option("--out", ab_out, "cell CSV; <stem>_summary.csv and <stem>_meta.json go alongside")->required();
  ab->add_flag("--progress", ab_progress, "report each cell on stderr");

  // compare
  std::string cmp_suite, cmp_seeds = "0..9", cmp_out;
  ComparisonConfig cmp_cfg;
  bool cmp_progress = false;
  auto* cmp = app.add_subcommand("compare", "transfer vs no-transfer vs random search over seeds");
  cmp->add_option("--suite", cmp_suite)->required();
  cmp->add_option("--seeds", cmp_seeds, "A..B or a comma list")->capture_default_str();
  cmp->add_option("--budget", cmp_cfg.search.budget)->capture_default_str();
  cmp->add_option("--per-task", cmp_cfg.source_per_task, "source records per source task")->capture_default_str();
  cmp->add_option("--max-steps", cmp_cfg.search.train.max_steps)->capture_default_str();
  cmp->add_option("--out", cmp_out, "per-seed CSV; <stem>_summary.csv goes alongside")->required();
  cmp->add_flag("--progress", cmp_progress, "report each seed on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "xfernas: error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*sample) {
      const std::string text = genome_to_json(sample_genome(sample_seed, sample_b));
      if (sample_out.empty()) {
        std::cout << text;
      } else {
        write_file(sample_out, text);
      }
    } else if (*suite_init) {
      if (suite_desc.n_tasks < 1) throw ConfigError("--tasks must be >= 1");
      TaskSuite check(suite_desc);
      save_suite(suite_desc, suite_out);
      std::cout << "suite: " << suite_desc.n_tasks << " tasks, target " << check.target_task() << "\n";
    } else if (*kb) {
      const TaskSuite s(load_suite(kb_suite));
      const ObservationHistory h = build_source_knowledge(s, kb_per_task, kb_seed);
      save_history(h, kb_out);
      std::cout << "knowledge: " << h.size() << " records over " << h.source_tasks().size() << " source tasks\n";
    } else if (*tr) {
      ObservationHistory h = load_history(tr_history);
      std::string target = tr_target;
      if (target.empty()) target = tr_suite.empty() ? "target" : TaskSuite(load_suite(tr_suite)).target_task();
      h.set_target(target);
      TrainConfig cfg;
      tr_flags.apply(cfg);
      cfg.seed = tr_seed;
      const TrainResult r = train(h, cfg);
      r.net.save(tr_out);
      write_file(tr_out + ".log.csv", train_log_csv(r.log));
      std::printf("train: %d steps, %zu epochs, final loss %.6f, target %s\n", r.log.steps, r.log.epoch_loss.size(),
                  r.log.epoch_loss.back(), target.c_str());
    } else if (*se) {
      const TaskSuite s(load_suite(se_suite));
      const std::string target = s.target_task();
      ObservationHistory source({target}, target);
      if (!se_no_transfer) {
        if (se_source.empty()) throw ConfigError("--source is required unless --no-transfer is given");
        source = load_history(se_source);
        source.set_target(target);
      }
      se_flags.apply(se_cfg.train);
      const Oracle oracle = [&](const Genome& g) { return s.evaluate(target, g); };
      const SearchReport report = xfernas_search(oracle, source, target, se_cfg);
      write_file(se_out, report_to_json(report));
      write_file(sibling(se_out, "", ".csv"), report_to_csv(report));
      if (!report.failure.empty()) throw SearchError("oracle failed: " + report.failure);
      std::printf("search: %d oracle calls, best %.6f (%s)\n", report.oracle_calls,
                  report.best ? report.best->score : 0.0, report.best ? fingerprint(report.best->genome).c_str() : "-");
    } else if (*ab) {
      const AblationConfig cfg = ab_config.empty() ? AblationConfig{} : load_ablation_config(ab_config);
      cfg.validate();
      const auto cells = run_ablation(cfg, [&](const AblationCell& c) {
        if (ab_progress) std::fprintf(stderr, "cell source=%d target=%d split=%d r=%.4f\n", c.source_size, c.target_size, c.split, c.pearson_r);
      });
      write_file(ab_out, cells_to_csv(cells));
      write_file(sibling(ab_out, "_summary", ".csv"), summary_to_csv(summarize(cells)));
      write_file(sibling(ab_out, "_meta", ".json"), ablation_config_to_json(cfg));
      std::cout << "ablation: " << cells.size() << " cells\n";
    } else if (*cmp) {
      cmp_cfg.suite = load_suite(cmp_suite);
      const auto rows = run_search_comparison(cmp_cfg, parse_seeds(cmp_seeds), [&](const ComparisonRow& r) {
        if (cmp_progress) {
          std::fprintf(stderr, "seed %llu transfer=%.4f no_transfer=%.4f random=%.4f\n",
                       static_cast<unsigned long long>(r.seed), r.transfer, r.no_transfer, r.random);
        }
      });
      const ComparisonSummary sum = summarize(rows);
      write_file(cmp_out, comparison_to_csv(rows));
      write_file(sibling(cmp_out, "_summary", ".csv"), comparison_summary_to_csv(sum));
      std::printf("compare: %d seeds, transfer >= random in %d, transfer >= no-transfer in %d\n", sum.seeds,
                  sum.wins_vs_random, sum.wins_vs_no_transfer);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "xfernas: error: " << msg << "\n";
    return 1;
  }
  return 0;
}
