// fedprog: command-line front end for the federated prognostics toolkit.
//
//   fedprog simulate       draw a synthetic multi-user degradation study
//   fedprog ingest-cmapss  convert NASA turbofan FD001 files into a study dir
//   fedprog train          fit a prognostic model (federated / centralized / individual)
//   fedprog evaluate       score a held-out test set against saved artifacts
//   fedprog reproduce      run one of the built-in studies end to end
//
// A "study directory" is the interchange format shared by the subcommands:
// grid.json plus one subdirectory per participant (signals.csv + ttf.csv),
// with the held-out systems under test/.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "fedprog/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedprog;

namespace {

struct SimulateArgs {
  std::string study = "sim1";
  double missing = 0.3;
  std::uint64_t seed = 42;
  std::uint64_t permutation_seed = 0;
  std::string out;
};

int run_simulate(const SimulateArgs& a) {
  SimConfig cfg;
  cfg.seed = a.seed;
  cfg.missing_fraction = a.missing;
  cfg.permutation_seed = a.permutation_seed;
  if (a.study == "sim1") {
    // defaults: three users with 54/27/9 systems, 30 test systems
  } else if (a.study == "stragglers") {
    cfg.user_split = {33, 70, 55, 56, 67};
    cfg.step = 8e-3;
  } else if (a.study == "scale") {
    cfg.user_split = make_scale_split(150, 1, 20, a.seed);
  } else {
    throw ArgumentError("unknown study '" + a.study + "' (expected sim1, stragglers or scale)");
  }
  StudyData data = generate_study(cfg);
  save_study_dir(data.grid, data.participants, &data.test, a.out);
  std::printf("wrote %zu participants + %d test systems to %s\n", data.participants.size(),
              data.test.size(), a.out.c_str());
  return 0;
}

struct IngestArgs {
  std::string data_dir;
  std::string out;
  double missing = 0.3;
  std::uint64_t seed = 42;
  std::uint64_t permutation_seed = 0;
};

int run_ingest(const IngestArgs& a) {
  if (!cmapss_files_present(a.data_dir))
    throw ConfigError(a.data_dir +
                      " must contain train_FD001.txt, test_FD001.txt and RUL_FD001.txt");
  CaseStudyConfig cfg;
  cfg.missing_fraction = a.missing;
  cfg.seed = a.seed;
  cfg.permutation_seed = a.permutation_seed;
  CaseStudyData data = build_case_study(parse_cmapss(fs::path(a.data_dir) / "train_FD001.txt"),
                                        parse_cmapss(fs::path(a.data_dir) / "test_FD001.txt"),
                                        parse_rul(fs::path(a.data_dir) / "RUL_FD001.txt"), cfg);
  save_study_dir(data.grid, data.participants, &data.test, a.out);
  std::printf("wrote %zu participants + %d test engines to %s\n", data.participants.size(),
              data.test.size(), a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string mode = "federated";
  std::string user;
  std::string select = "cv";
  int folds = 5;
  double fve_threshold = 0.9;
  std::vector<int> k_grid;
  int k = 0;
  int ksub = 0;
  std::string family = "lognormal";
  std::string transport = "inproc";
  std::string straggler = "none";
  double tau_ms = 2.048;
  int max_sweeps = 100;
  double conv_eps = 1e-6;
  double stability_eps = 0.0;
  std::uint64_t seed = 42;
  std::string out;
};

int run_train(const TrainArgs& a) {
  LoadedStudy study = load_study_dir(a.data);
  if (study.participants.empty()) throw ConfigError(a.data + " holds no training participants");

  TrainConfig cfg;
  cfg.transport = transport_from_name(a.transport);
  cfg.family = family_from_name(a.family);
  cfg.plan.subspace_rank = a.ksub;
  cfg.plan.max_sweeps = a.max_sweeps;
  cfg.plan.conv_eps = a.conv_eps;
  cfg.plan.stability_eps = a.stability_eps;
  cfg.plan.straggler = straggler_from_name(a.straggler);
  cfg.plan.tau_comm = a.tau_ms * 1e-3;
  cfg.plan.seed = a.seed;

  if (a.select == "fixed") {
    if (a.k < 1) throw ArgumentError("--select fixed requires --k");
    cfg.select = SelectionSpec::fixed(a.k);
  } else if (a.select == "fve") {
    cfg.select = SelectionSpec::fve(a.fve_threshold);
  } else if (a.select == "cv") {
    CVPlan cv;
    cv.folds = a.folds;
    cv.candidates = a.k_grid;
    cfg.select = SelectionSpec::cross_validated(cv);
  } else {
    throw ArgumentError("unknown selection '" + a.select + "' (expected cv, fve or fixed)");
  }

  TrainedArtifacts art;
  const TrainMode mode = mode_from_name(a.mode);
  if (mode == TrainMode::individual) {
    if (a.user.empty()) throw ArgumentError("--mode individual requires --user");
    const LocalDataset* ds = nullptr;
    for (const LocalDataset& d : study.participants)
      if (d.participant_id == a.user) ds = &d;
    if (!ds) throw ConfigError("no participant '" + a.user + "' in " + a.data);
    art = train_individual(*ds, cfg);
  } else if (mode == TrainMode::federated) {
    art = train_federated(roster_of(study.participants), cfg);
  } else {
    art = train_centralized(roster_of(study.participants), cfg);
  }
  save_artifacts(art, a.out);
  std::printf("%s model: family=%s k=%d rank=%d sweeps=%d (%s) train=%.2fs -> %s\n",
              mode_name(art.mode), family_name(art.family).c_str(), art.selected_k,
              art.subspace_rank, art.sweeps, art.stop_reason.c_str(), art.train_seconds,
              a.out.c_str());
  return 0;
}

struct EvaluateArgs {
  std::string artifacts;
  std::string test;
  std::string out;
};

int run_evaluate(const EvaluateArgs& a) {
  TrainedArtifacts art = load_artifacts(a.artifacts);
  LoadedStudy study = load_study_dir(a.test);
  if (!study.has_test) throw ConfigError(a.test + " has no test/ dataset");
  EvalReport rep = evaluate_artifacts(art, study.test);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_errors_csv(rep.records, fs::path(a.out) / "errors.csv");
    std::ofstream js(fs::path(a.out) / "report.json");
    js << cell_report_json("evaluate", fs::path(a.artifacts).filename().string(), art, rep)
              .dump(2)
       << "\n";
  }
  std::printf("n=%d median=%.6f iqr=%.6f mean=%.6f\n", rep.n_test(), rep.median_error,
              rep.iqr_error, rep.mean_error);
  return 0;
}

struct ReproduceArgs {
  std::string study;
  std::string cmapss_dir;
  std::string out;
  int permutations = 15;
  std::uint64_t seed = 42;
};

int run_reproduce(const ReproduceArgs& a) {
  fs::path out = a.out;
  if (!out.empty()) fs::create_directories(out);

  if (a.study == "sim1") {
    Sim1Options opt;
    opt.permutations = a.permutations;
    opt.seed = a.seed;
    opt.out_dir = out;
    Sim1Result r = run_sim1(opt);
    for (double level : r.levels)
      std::printf("missing=%.0f%%: federated median=%.4f, beats all individuals in %d/%d\n",
                  level * 100, r.fed_level_median[level], r.fed_beats_all_individuals[level],
                  opt.permutations);
    for (size_t u = 0; u < r.indiv_user_median.size(); ++u)
      std::printf("individual user_%zu (n=%d): median=%.4f\n", u + 1, r.user_sizes[u],
                  r.indiv_user_median[u]);
    return 0;
  }
  if (a.study == "stragglers") {
    StragglerOptions opt;
    opt.seed = a.seed;
    opt.out_dir = out;
    StragglerResult r = run_straggler_study(opt);
    for (int budget : opt.sweep_budgets)
      std::printf("budget=%d sweeps: full=%.4f drop-one=%.4f\n", budget, r.full_median[budget],
                  r.straggler_median[budget]);
    return 0;
  }
  if (a.study == "scale") {
    ScaleOptions opt;
    opt.seed = a.seed;
    opt.out_dir = out;
    ScaleResult r = run_scale_study(opt);
    std::printf("federated median=%.4f over %d users\n", r.fed_median, opt.users);
    const char* label[] = {"<5", "5-14", ">=15"};
    for (int g = 0; g < 3; ++g)
      std::printf("individual fleets %s systems (%d users): median=%.4f\n", label[g],
                  r.group_users[g], r.group_median[g]);
    if (r.skipped_users)
      std::printf("%d users had too few systems for any individual model\n", r.skipped_users);
    return 0;
  }
  if (a.study == "timing") {
    TimingOptions opt;
    opt.seed = a.seed;
    opt.out_dir = out;
    TimingResult r = run_timing_study(opt);
    for (const TimingPoint& p : r.points)
      std::printf("users=%2d signals=%3d federated=%.3fs (compute %.3f + comm %.3f, %d sweeps) "
                  "pooled=%.3fs\n",
                  p.users, p.signals, p.fed_total_seconds, p.fed_compute_seconds,
                  p.fed_comm_seconds, p.fed_sweeps, p.nonfed_seconds);
    return 0;
  }
  if (a.study == "cmapss") {
    if (a.cmapss_dir.empty())
      throw ArgumentError("--study cmapss requires --cmapss-dir pointing at the FD001 files");
    CmapssOptions opt;
    opt.data_dir = a.cmapss_dir;
    opt.permutations = a.permutations;
    opt.seed = a.seed;
    opt.out_dir = out;
    CmapssResult r = run_cmapss_study(opt);
    for (auto& [level, med] : r.fed_level_median)
      std::printf("missing=%.0f%%: federated median=%.4f\n", level * 100, med);
    return 0;
  }
  throw ArgumentError("unknown study '" + a.study +
                      "' (expected sim1, stragglers, scale, timing or cmapss)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated prognostics toolkit"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* c_sim = app.add_subcommand("simulate", "draw a synthetic degradation study");
  c_sim->add_option("--study", sim.study, "sim1, stragglers or scale")
      ->default_val("sim1");
  c_sim->add_option("--missing", sim.missing, "fraction of samples hidden per signal");
  c_sim->add_option("--seed", sim.seed, "generator seed");
  c_sim->add_option("--permutation-seed", sim.permutation_seed,
                    "nonzero: shuffle system-to-user assignment");
  c_sim->add_option("--out", sim.out, "study directory to write")->required();

  IngestArgs ing;
  CLI::App* c_ing = app.add_subcommand("ingest-cmapss", "convert FD001 files to a study directory");
  c_ing->add_option("--data-dir", ing.data_dir, "directory holding the FD001 text files")
      ->required();
  c_ing->add_option("--out", ing.out, "study directory to write")->required();
  c_ing->add_option("--missing", ing.missing, "extra missingness applied to training signals");
  c_ing->add_option("--seed", ing.seed, "missingness seed");
  c_ing->add_option("--permutation-seed", ing.permutation_seed,
                    "nonzero: shuffle engine-to-user assignment");

  TrainArgs tr;
  CLI::App* c_tr = app.add_subcommand("train", "fit a prognostic model from a study directory");
  c_tr->add_option("--data", tr.data, "study directory")->required();
  c_tr->add_option("--mode", tr.mode, "federated, centralized or individual");
  c_tr->add_option("--user", tr.user, "participant id (individual mode)");
  c_tr->add_option("--select", tr.select, "cv, fve or fixed");
  c_tr->add_option("--folds", tr.folds, "cross-validation folds");
  c_tr->add_option("--fve-threshold", tr.fve_threshold, "variance-explained cutoff");
  c_tr->add_option("--k-grid", tr.k_grid, "candidate score dimensions for cv");
  c_tr->add_option("--k", tr.k, "score dimension (fixed selection)");
  c_tr->add_option("--ksub", tr.ksub, "tracked subspace rank (0: min(grid, systems))");
  c_tr->add_option("--family", tr.family,
                   "normal, lognormal, sev, weibull, logistic or loglogistic");
  c_tr->add_option("--transport", tr.transport, "inproc or socket");
  c_tr->add_option("--straggler", tr.straggler, "none or drop-one");
  c_tr->add_option("--tau-ms", tr.tau_ms, "modeled milliseconds per token handoff");
  c_tr->add_option("--max-sweeps", tr.max_sweeps, "token-ring sweep budget");
  c_tr->add_option("--conv-eps", tr.conv_eps, "residual stopping threshold");
  c_tr->add_option("--stability-eps", tr.stability_eps,
                   "basis-movement stopping threshold (0: off)");
  c_tr->add_option("--seed", tr.seed, "subspace initialization seed");
  c_tr->add_option("--out", tr.out, "artifact directory to write")->required();

  EvaluateArgs ev;
  CLI::App* c_ev = app.add_subcommand("evaluate", "score a held-out test set");
  c_ev->add_option("--artifacts", ev.artifacts, "artifact directory from train")->required();
  c_ev->add_option("--test", ev.test, "study directory holding grid.json and test/")->required();
  c_ev->add_option("--out", ev.out, "directory for errors.csv and report.json");

  ReproduceArgs rep;
  CLI::App* c_rep = app.add_subcommand("reproduce", "run a built-in study end to end");
  c_rep->add_option("--study", rep.study, "sim1, stragglers, scale, timing or cmapss")
      ->required();
  c_rep->add_option("--cmapss-dir", rep.cmapss_dir, "directory holding the FD001 text files");
  c_rep->add_option("--permutations", rep.permutations, "data permutations per cell");
  c_rep->add_option("--seed", rep.seed, "study seed");
  c_rep->add_option("--out", rep.out, "directory for per-cell results and summary.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_sim->parsed()) return run_simulate(sim);
    if (c_ing->parsed()) return run_ingest(ing);
    if (c_tr->parsed()) return run_train(tr);
    if (c_ev->parsed()) return run_evaluate(ev);
    if (c_rep->parsed()) return run_reproduce(rep);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fedprog: %s\n", e.what());
    return 1;
  }
  return 0;
}
