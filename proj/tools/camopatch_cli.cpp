// camopatch: train, evaluate, compare and ablate camouflage patches.
//
// Exit codes: 0 ok, 2 bad arguments or config, 3 detector transport failure,
// 1 anything else. Progress goes to stderr.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "camopatch/runtime.hpp"

using namespace camo;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::int64_t> seed;
  std::string out;
  std::string detector;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config, "TOML run config");
  if (needs_config) opt->required();
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory (default: the config's output_dir)");
  cmd->add_option("--detector", c.detector, "toy | external:<command>");
}

/// Config with command-line overrides applied. Without --config the defaults
/// are used, which still need a seed.
config::RunConfig resolve(const Common& c, const std::optional<fs::path>& fallback = std::nullopt) {
  config::RunConfig rc;
  if (!c.config.empty()) rc = config::load(c.config);
  else if (fallback) rc = config::load(*fallback);
  if (c.seed) rc.seed = c.seed;
  if (!c.detector.empty()) runtime::apply_detector_flag(rc, c.detector);
  return rc;
}

fs::path out_dir(const Common& c, const config::RunConfig& rc) {
  return c.out.empty() ? rc.resolve(rc.output_dir) : fs::path(c.out);
}

void print_report(const std::string& what, const eval::EvalReport& r) {
  std::cout << what << ": mAP50 " << io::fixed(r.map50_percent) << "%  mean PerC "
            << io::fixed(r.mean_perc_distance) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trains and evaluates camouflage patches against an object detector."};
  app.require_subcommand(1);

  Common train_c;
  auto* train = app.add_subcommand("train", "train one patch per image");
  add_common(train, train_c, true);

  Common eval_c;
  std::string eval_run;
  bool no_patch = false;
  auto* evalc = app.add_subcommand("eval", "evaluate a train run (or the clean images)");
  add_common(evalc, eval_c, false);
  evalc->add_option("--run", eval_run, "train output directory");
  evalc->add_flag("--no-patch", no_patch, "evaluate the unpatched images");

  Common ablate_c;
  auto* ablate = app.add_subcommand("ablate", "run the studies of a grid config");
  add_common(ablate, ablate_c, true);

  Common compare_c;
  std::vector<std::string> compare_runs;
  std::string scores_csv;
  bool include_clean = false;
  auto* compare = app.add_subcommand("compare", "score several runs with the combined rank");
  add_common(compare, compare_c, false);
  compare->add_option("--run", compare_runs, "label=<train output dir>, repeatable");
  compare->add_flag("--include-clean", include_clean, "add the unpatched images as 'No Patch'");
  compare->add_option("--scores", scores_csv, "offline: CSV of label,map50,mean_perc")->check(CLI::ExistingFile);

  std::string export_patch;
  Common export_c;
  bool export_scenes = false;
  auto* exportc = app.add_subcommand("export", "write a patch PNG, or the configured scenes");
  exportc->add_option("--patch", export_patch, "patch sidecar (.json)");
  exportc->add_flag("--scenes", export_scenes, "write scene_<k>.png and truth.json for --config");
  exportc->add_option("--config", export_c.config, "TOML run config (with --scenes)");
  exportc->add_option("--out", export_c.out, "output PNG, or directory with --scenes")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      const auto rc = resolve(train_c);
      const auto out = out_dir(train_c, rc);
      const auto s = runtime::cmd_train(rc, out);
      print_report("clean", s.clean);
      print_report("patched", s.patched);
      std::cout << "wrote " << s.sidecars.size() << " patches under " << out.string() << "\n";
    } else if (*evalc) {
      std::optional<fs::path> run;
      if (!eval_run.empty()) run = eval_run;
      std::optional<fs::path> fallback;
      if (run && fs::exists(*run / "config.toml")) fallback = *run / "config.toml";
      if (eval_c.config.empty() && !fallback) throw InvalidArgument("eval needs --config or a --run holding config.toml");
      const auto rc = resolve(eval_c, fallback);
      const fs::path out = eval_c.out.empty() ? (run ? *run / "eval" : fs::path("eval")) : fs::path(eval_c.out);
      print_report(no_patch ? "clean" : "patched", runtime::cmd_eval(rc, run, no_patch, out));
    } else if (*ablate) {
      const auto rc = resolve(ablate_c);
      const auto out = out_dir(ablate_c, rc);
      const auto results = runtime::cmd_ablate(rc, out);
      for (const auto& r : results)
        std::cout << r.name << ": " << (r.winner ? r.cells[*r.winner].label : "no variant completed") << "\n";
      std::cout << "wrote " << (out / "ablation.md").string() << "\n";
    } else if (*compare) {
      if (!scores_csv.empty()) {
        if (!compare_runs.empty() || include_clean)
          throw InvalidArgument("--scores cannot be combined with --run or --include-clean");
        const fs::path out = compare_c.out.empty() ? fs::path(".") : fs::path(compare_c.out);
        fs::create_directories(out);
        std::cout << io::score_table_markdown(runtime::cmd_compare_offline(scores_csv, out));
      } else {
        std::vector<runtime::LabelledRun> runs;
        for (const auto& r : compare_runs) {
          const auto eq = r.find('=');
          if (eq == std::string::npos || eq == 0 || eq + 1 == r.size())
            throw InvalidArgument("--run expects label=<dir>, got '" + r + "'");
          runs.push_back({r.substr(0, eq), r.substr(eq + 1)});
        }
        std::optional<fs::path> fallback;
        if (!runs.empty() && fs::exists(runs.front().run / "config.toml")) fallback = runs.front().run / "config.toml";
        if (compare_c.config.empty() && !fallback) throw InvalidArgument("compare needs --config or runs holding config.toml");
        const auto rc = resolve(compare_c, fallback);
        const fs::path out = compare_c.out.empty() ? fs::path("compare") : fs::path(compare_c.out);
        std::cout << io::score_table_markdown(runtime::cmd_compare(rc, runs, include_clean, out));
      }
    } else if (*exportc) {
      if (export_scenes == !export_patch.empty()) throw InvalidArgument("export needs exactly one of --patch or --scenes");
      if (export_scenes) {
        if (export_c.config.empty()) throw InvalidArgument("export --scenes needs --config");
        fs::create_directories(export_c.out);
        runtime::cmd_export_scenes(config::load(export_c.config), export_c.out);
      } else {
        runtime::cmd_export_patch(export_patch, export_c.out);
      }
    }
  } catch (const patch::TrainingAborted& e) {
    std::cerr << "error: training aborted after " << e.record.size() << " steps: " << e.what() << "\n";
    return 3;
  } catch (const TransportError& e) {
    std::cerr << "error: detector transport: " << e.what() << "\n";
    return 3;
  } catch (const config::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
