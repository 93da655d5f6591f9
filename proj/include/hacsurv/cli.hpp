#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hacsurv/metrics.hpp"
#include "hacsurv/training.hpp"

namespace hacsurv::cli {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DomainError("cannot open file: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DomainError("cannot write file: " + p.string());
  out << content;
}

inline json load_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw DomainError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

// Numeric matrix without header; rows = subjects, cols = grid points.
inline std::string matrix_to_csv(const std::vector<double>& m, std::size_t rows,
                                 std::size_t cols) {
  std::string out;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out += format_double(m[r * cols + c]);
      out += (c + 1 < cols) ? ',' : '\n';
    }
  }
  return out;
}

inline std::vector<double> matrix_from_csv(const std::string& text,
                                           std::size_t& rows, std::size_t& cols) {
  std::vector<double> out;
  rows = 0;
  cols = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t c = 0, pos = 0;
    while (pos <= line.size()) {
      std::size_t end = line.find(',', pos);
      if (end == std::string::npos) end = line.size();
      out.push_back(std::stod(line.substr(pos, end - pos)));
      pos = end + 1;
      ++c;
    }
    if (cols == 0)
      cols = c;
    else if (c != cols)
      throw DomainError("matrix CSV: ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  return out;
}

inline TrainConfig load_config(const std::string& path, std::uint64_t seed,
                               Variant variant) {
  TrainConfig cfg;
  if (!path.empty()) cfg = TrainConfig::from_json(load_json(path));
  cfg.seed = seed;
  cfg.variant = variant;
  return cfg;
}

inline json audit(std::uint64_t seed, const json& config_echo) {
  return {{"seed", seed}, {"config_hash", hex64(fnv1a(config_echo.dump()))}};
}

// ---------------------------------------------------------------------------

inline int cmd_synth(const std::string& spec_arg, std::uint64_t seed, int n,
                     const std::string& out, const std::string& test_out,
                     double test_fraction) {
  SyntheticSpec spec = spec_arg == "default"
                           ? default_synthetic_spec(seed, n)
                           : SyntheticSpec::from_json(load_json(spec_arg));
  if (spec_arg != "default") {
    spec.seed = seed;
    if (n > 0) spec.n = n;
  }
  SyntheticResult res = generate_synthetic(spec);

  SurvivalDataset train = res.data;
  if (!test_out.empty()) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw DomainError("synth: test fraction must lie in (0,1)");
    std::vector<std::size_t> idx(res.data.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed, 424242);
    rng.shuffle(idx);
    std::size_t n_test =
        static_cast<std::size_t>(test_fraction * static_cast<double>(idx.size()));
    std::vector<std::size_t> test_rows(idx.begin(),
                                       idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_rows(idx.begin() + static_cast<std::ptrdiff_t>(n_test),
                                        idx.end());
    std::sort(test_rows.begin(), test_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    write_file(test_out, dataset_to_csv(res.data.subset(test_rows)));
    train = res.data.subset(train_rows);
  }
  write_file(out, dataset_to_csv(train));

  json truth = json::array();
  for (const auto& m : spec.marginals) truth.push_back(m.to_json());
  json meta = res.metadata;
  meta.update(audit(seed, spec.to_json()));
  meta["truth_marginals"] = truth;
  meta["train_file"] = out;
  if (!test_out.empty()) meta["test_file"] = test_out;
  write_file(out + ".meta.json", meta.dump(2) + "\n");
  std::cout << "wrote " << out << " (" << train.size() << " rows)\n";
  return 0;
}

inline int cmd_sample_copula(const std::string& copula_path, int n,
                             std::uint64_t seed, const std::string& out) {
  CopulaModel m = CopulaModel::from_json(load_json(copula_path));
  auto u = sample_copula(m, n, seed);
  const int dim = m.dimension();
  std::string csv;
  for (int j = 0; j < dim; ++j) csv += "u" + std::to_string(j) + (j + 1 < dim ? "," : "\n");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) {
      csv += format_double(u[static_cast<std::size_t>(i) * dim + j]);
      csv += (j + 1 < dim) ? ',' : '\n';
    }
  write_file(out, csv);
  json meta = audit(seed, m.to_json());
  meta["n"] = n;
  write_file(out + ".meta.json", meta.dump(2) + "\n");
  std::cout << "wrote " << out << "\n";
  return 0;
}

inline int cmd_fit_pairwise(const std::string& data_path, int i, int j,
                            const std::string& config_path, std::uint64_t seed,
                            const std::string& out) {
  SurvivalDataset data = dataset_from_csv(read_file(data_path));
  TrainConfig cfg = load_config(config_path, seed, Variant::Hierarchical);
  PairwiseFit fit = fit_pairwise(data, {i, j}, cfg);
  json out_json = audit(seed, cfg.to_json());
  out_json["pair"] = {i, j};
  out_json["generator"] = fit.generator->to_json();
  out_json["marginals"] = fit.net->to_json();
  out_json["tau"] = fit.tau.tau;
  out_json["tau_se"] = fit.tau.se;
  out_json["trace"] = fit.trace.to_json();
  write_file(out, out_json.dump(2) + "\n");
  std::cout << "pair (" << i << "," << j << ") tau=" << fit.tau.tau << "\n";
  return 0;
}

inline int cmd_select_structure(const std::string& taus_path, std::uint64_t seed,
                                const std::string& out) {
  json in = load_json(taus_path);
  auto tau = in.at("tau").get<std::vector<std::vector<double>>>();
  double floor = in.value("tau_floor", 0.05);
  Blueprint bp = select_structure(tau, floor);
  json out_json = audit(seed, in);
  out_json["blueprint"] = bp.to_json();
  write_file(out, out_json.dump(2) + "\n");
  std::cout << "blueprint with " << bp.groups.size() << " inner group(s)\n";
  return 0;
}

inline int cmd_fit_inner(const std::string& outer_path,
                         const std::string& target_path,
                         const std::string& config_path, std::uint64_t seed,
                         const std::string& out) {
  GeneratorPtr outer = generator_from_json(load_json(outer_path));
  auto target_json = load_json(target_path);
  // accept either a bare generator or a fit-pairwise output
  auto target = EmpiricalGenerator::from_json(
      target_json.contains("generator") ? target_json.at("generator") : target_json);
  TrainConfig cfg = load_config(config_path, seed, Variant::Hierarchical);
  RegenFit fit = fit_inner_regeneration(outer, *target, cfg);
  json out_json = audit(seed, cfg.to_json());
  out_json["generator"] = fit.generator->to_json();
  out_json["fitted_tau"] = fit.fitted_tau.tau;
  out_json["target_tau"] = fit.target_tau.tau;
  out_json["nesting_pass"] = fit.nesting.pass;
  out_json["trace"] = fit.trace.to_json();
  write_file(out, out_json.dump(2) + "\n");
  std::cout << "inner tau=" << fit.fitted_tau.tau
            << " target=" << fit.target_tau.tau << "\n";
  return 0;
}

inline int cmd_fit(const std::string& data_path, const std::string& variant,
                   const std::string& config_path, std::uint64_t seed,
                   const std::string& out_dir, int grid_points) {
  SurvivalDataset data = dataset_from_csv(read_file(data_path));
  TrainConfig cfg = load_config(config_path, seed, variant_from_name(variant));
  FitBundle bundle = fit_model(data, cfg);

  json b = audit(seed, cfg.to_json());
  b["variant"] = variant;
  b["copula"] = bundle.copula.to_json();
  b["marginals"] = bundle.net->to_json();
  b["grid"] = quantile_time_grid(data, grid_points);
  write_file(fs::path(out_dir) / "bundle.json", b.dump(2) + "\n");
  json report = bundle.report.to_json();
  report["model_files"] = {"bundle.json"};
  write_file(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
  std::cout << "fit " << variant << " done, stages=" << bundle.report.stages.size()
            << "\n";
  return 0;
}

inline int cmd_predict(const std::string& bundle_path, const std::string& data_path,
                       const std::string& out_dir) {
  json b = load_json(fs::path(bundle_path).extension() == ".json"
                         ? fs::path(bundle_path)
                         : fs::path(bundle_path) / "bundle.json");
  CopulaModel copula = CopulaModel::from_json(b.at("copula"));
  MonotoneSurvivalNet net = MonotoneSurvivalNet::from_json(b.at("marginals"));
  std::vector<double> grid = b.at("grid").get<std::vector<double>>();
  SurvivalDataset subjects = dataset_from_csv(read_file(data_path));
  PredictionGrid pg = predict_grid(copula, net, subjects, grid);

  json meta{{"seed", b.at("seed")},
            {"config_hash", b.at("config_hash")},
            {"grid", pg.times},
            {"n_subjects", pg.n_subjects},
            {"n_events", pg.n_events()}};
  for (int k = 0; k < pg.n_events(); ++k) {
    std::string sfile = "survival_" + std::to_string(k) + ".csv";
    std::string cfile = "cif_" + std::to_string(k) + ".csv";
    write_file(fs::path(out_dir) / sfile,
               matrix_to_csv(pg.survival[static_cast<std::size_t>(k)],
                             subjects.size(), pg.times.size()));
    write_file(fs::path(out_dir) / cfile,
               matrix_to_csv(pg.cif[static_cast<std::size_t>(k)], subjects.size(),
                             pg.times.size()));
    meta["files"]["survival"].push_back(sfile);
    meta["files"]["cif"].push_back(cfile);
  }
  write_file(fs::path(out_dir) / "predictions.meta.json", meta.dump(2) + "\n");
  std::cout << "predicted " << pg.n_subjects << " subjects on " << pg.times.size()
            << " grid points\n";
  return 0;
}

inline int cmd_eval(const std::string& pred_dir, const std::string& data_path,
                    const std::string& train_path, const std::string& truth_path,
                    const std::string& out) {
  json meta = load_json(fs::path(pred_dir) / "predictions.meta.json");
  SurvivalDataset test = dataset_from_csv(read_file(data_path));
  SurvivalDataset train = dataset_from_csv(read_file(train_path));
  PredictionGrid pg;
  pg.times = meta.at("grid").get<std::vector<double>>();
  pg.n_subjects = meta.at("n_subjects").get<int>();
  if (static_cast<std::size_t>(pg.n_subjects) != test.size())
    throw DomainError("eval: prediction subject count != dataset rows");
  int n_events = meta.at("n_events").get<int>();
  for (int k = 0; k < n_events; ++k) {
    std::size_t r = 0, c = 0;
    pg.survival.push_back(matrix_from_csv(
        read_file(fs::path(pred_dir) /
                  meta.at("files").at("survival").at(k).get<std::string>()),
        r, c));
    pg.cif.push_back(matrix_from_csv(
        read_file(fs::path(pred_dir) /
                  meta.at("files").at("cif").at(k).get<std::string>()),
        r, c));
    if (r != test.size() || c != pg.times.size())
      throw DomainError("eval: matrix shape mismatch for event " + std::to_string(k));
  }

  std::vector<WeibullCoxMarginal> truth_models;
  std::vector<const MarginalModel*> truth_ptrs;
  if (!truth_path.empty()) {
    json t = load_json(truth_path);
    const json& arr = t.contains("truth_marginals") ? t.at("truth_marginals") : t;
    for (const auto& mj : arr)
      truth_models.push_back(WeibullCoxMarginal::from_json(mj));
    for (const auto& m : truth_models) truth_ptrs.push_back(&m);
  }
  MetricsReport rep = evaluate_predictions(pg, test, train, truth_ptrs);
  json out_json{{"seed", meta.at("seed")},
                {"config_hash", meta.at("config_hash")},
                {"metrics", rep.to_json()}};
  write_file(out, out_json.dump(2) + "\n");
  std::cout << "metrics written to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
  CLI::App app{"hierarchical-copula competing-risks survival toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 41;
  std::string config_path;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
  std::string synth_spec = "default", synth_out = "data.csv", synth_test_out;
  int synth_n = 20000;
  double synth_test_fraction = 0.2;
  synth->add_option("--spec", synth_spec, "'default' or a SyntheticSpec JSON path");
  synth->add_option("--seed", seed, "random seed");
  synth->add_option("--n", synth_n, "sample count");
  synth->add_option("--out", synth_out, "output CSV")->required();
  synth->add_option("--test-out", synth_test_out, "held-out split CSV");
  synth->add_option("--test-fraction", synth_test_fraction, "held-out fraction");

  // sample-copula
  auto* sc = app.add_subcommand("sample-copula", "draw samples from a copula JSON");
  std::string sc_copula, sc_out = "u.csv";
  int sc_n = 10000;
  sc->add_option("--copula", sc_copula, "copula JSON path")->required();
  sc->add_option("--n", sc_n, "sample count");
  sc->add_option("--seed", seed, "random seed");
  sc->add_option("--out", sc_out, "output CSV")->required();

  // fit-pairwise
  auto* fp = app.add_subcommand("fit-pairwise", "fit one pairwise copula");
  std::string fp_data, fp_out = "pairwise.json";
  std::vector<int> fp_pair;
  fp->add_option("--data", fp_data, "dataset CSV")->required();
  fp->add_option("--pair", fp_pair, "two event labels")->expected(2)->required();
  fp->add_option("--config", config_path, "TrainConfig JSON");
  fp->add_option("--seed", seed, "random seed");
  fp->add_option("--out", fp_out, "output JSON")->required();

  // select-structure
  auto* ss = app.add_subcommand("select-structure", "group events into a HAC blueprint");
  std::string ss_taus, ss_out = "blueprint.json";
  ss->add_option("--taus", ss_taus, "JSON with a square 'tau' matrix")->required();
  ss->add_option("--seed", seed, "random seed");
  ss->add_option("--out", ss_out, "output JSON")->required();

  // fit-inner
  auto* fi = app.add_subcommand("fit-inner", "re-generation fit of a nested inner generator");
  std::string fi_outer, fi_target, fi_out = "inner.json";
  fi->add_option("--outer", fi_outer, "outer generator JSON")->required();
  fi->add_option("--target", fi_target, "target generator JSON")->required();
  fi->add_option("--config", config_path, "TrainConfig JSON");
  fi->add_option("--seed", seed, "random seed");
  fi->add_option("--out", fi_out, "output JSON")->required();

  // fit
  auto* fit = app.add_subcommand("fit", "fit a full model");
  std::string fit_data, fit_variant = "hierarchical", fit_out_dir = "model";
  int grid_points = 100;
  fit->add_option("--data", fit_data, "dataset CSV")->required();
  fit->add_option("--variant", fit_variant,
                  "independent | symmetric | hierarchical");
  fit->add_option("--config", config_path, "TrainConfig JSON");
  fit->add_option("--seed", seed, "random seed");
  fit->add_option("--out-dir", fit_out_dir, "output directory")->required();
  fit->add_option("--grid-points", grid_points, "shared prediction grid size");

  // predict
  auto* pr = app.add_subcommand("predict", "evaluate a fitted bundle on covariates");
  std::string pr_bundle, pr_data, pr_out_dir = "predictions";
  pr->add_option("--bundle", pr_bundle, "bundle dir or bundle.json")->required();
  pr->add_option("--data", pr_data, "subjects CSV")->required();
  pr->add_option("--out-dir", pr_out_dir, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "compute metrics for predictions");
  std::string ev_pred, ev_data, ev_train, ev_truth, ev_out = "metrics.json";
  ev->add_option("--pred-dir", ev_pred, "predictions directory")->required();
  ev->add_option("--data", ev_data, "evaluation dataset CSV")->required();
  ev->add_option("--train", ev_train, "training dataset CSV (censoring KM)")
      ->required();
  ev->add_option("--truth", ev_truth, "synthetic truth sidecar JSON");
  ev->add_option("--out", ev_out, "output JSON")->required();

  try {
    app.parse(argc, argv);
    if (synth->parsed())
      return cmd_synth(synth_spec, seed, synth_n, synth_out, synth_test_out,
                       synth_test_fraction);
    if (sc->parsed()) return cmd_sample_copula(sc_copula, sc_n, seed, sc_out);
    if (fp->parsed())
      return cmd_fit_pairwise(fp_data, fp_pair[0], fp_pair[1], config_path, seed,
                              fp_out);
    if (ss->parsed()) return cmd_select_structure(ss_taus, seed, ss_out);
    if (fi->parsed())
      return cmd_fit_inner(fi_outer, fi_target, config_path, seed, fi_out);
    if (fit->parsed())
      return cmd_fit(fit_data, fit_variant, config_path, seed, fit_out_dir,
                     grid_points);
    if (pr->parsed()) return cmd_predict(pr_bundle, pr_data, pr_out_dir);
    if (ev->parsed()) return cmd_eval(ev_pred, ev_data, ev_train, ev_truth, ev_out);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hacsurv::cli
