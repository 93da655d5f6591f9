#include "doctest.h"

#include <filesystem>

#include "hacsurv/cli.hpp"

using namespace hacsurv;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
  std::vector<const char*> argv{"hacsurv"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("hacsurv_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string operator/(const std::string& name) const {
    return (path / name).string();
  }
};

// Small desk config: keeps the smoke pipeline to seconds.
std::string write_small_config(const TempDir& dir) {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 128;
  cfg.patience = 4;
  cfg.generator.atom_count = 16;
  cfg.generator.eps_dim = 3;
  cfg.generator.hidden = {8};
  cfg.net.embed_width = 8;
  cfg.net.cov_width = 6;
  cfg.net.joint_width = 6;
  std::string path = dir / "config.json";
  cli::write_file(path, cfg.to_json().dump(2));
  return path;
}

}  // namespace

TEST_CASE("synth then fit then predict then eval: pipeline smoke") {
  TempDir dir;
  std::string cfg = write_small_config(dir);
  CHECK(run_cli({"synth", "--seed", "7", "--n", "600", "--out", dir / "d.csv",
                 "--test-out", dir / "t.csv", "--test-fraction", "0.25"}) == 0);
  CHECK(fs::exists(dir / "d.csv"));
  CHECK(fs::exists(dir / "d.csv.meta.json"));
  CHECK(fs::exists(dir / "t.csv"));

  CHECK(run_cli({"fit", "--data", dir / "d.csv", "--variant", "independent",
                 "--config", cfg, "--seed", "7", "--out-dir", dir / "m",
                 "--grid-points", "25"}) == 0);
  CHECK(fs::exists(dir / "m/bundle.json"));
  CHECK(fs::exists(dir / "m/report.json"));

  CHECK(run_cli({"predict", "--bundle", dir / "m", "--data", dir / "t.csv",
                 "--out-dir", dir / "p"}) == 0);
  CHECK(fs::exists(dir / "p/predictions.meta.json"));
  CHECK(fs::exists(dir / "p/survival_0.csv"));
  CHECK(fs::exists(dir / "p/cif_3.csv"));

  CHECK(run_cli({"eval", "--pred-dir", dir / "p", "--data", dir / "t.csv",
                 "--train", dir / "d.csv", "--truth", dir / "d.csv.meta.json",
                 "--out", dir / "metrics.json"}) == 0);
  json metrics = cli::load_json(dir / "metrics.json");
  CHECK(metrics.contains("metrics"));
  CHECK(metrics.at("metrics").contains("ctd"));
  CHECK(metrics.at("metrics").contains("ibs"));
  CHECK(metrics.at("metrics").contains("survival_l1"));
  CHECK(metrics.at("metrics").at("survival_l1").size() == 4);
}

TEST_CASE("sample-copula output matches the library sampler and is reproducible") {
  TempDir dir;
  HacTree tree;
  tree.root = std::make_shared<ClaytonGenerator>(1.0);
  tree.inner.push_back({std::make_shared<ClaytonGenerator>(3.0), {0, 1}});
  tree.inner.push_back({std::make_shared<ClaytonGenerator>(8.0), {2, 3}});
  CopulaModel m = CopulaModel::hierarchical(std::move(tree));
  cli::write_file(dir / "copula.json", m.to_json().dump());

  CHECK(run_cli({"sample-copula", "--copula", dir / "copula.json", "--n", "500",
                 "--seed", "13", "--out", dir / "u.csv"}) == 0);
  std::string first = cli::read_file(dir / "u.csv");
  CHECK(first.rfind("u0,u1,u2,u3\n", 0) == 0);

  CHECK(run_cli({"sample-copula", "--copula", dir / "copula.json", "--n", "500",
                 "--seed", "13", "--out", dir / "u2.csv"}) == 0);
  CHECK(cli::read_file(dir / "u2.csv") == first);
  CHECK(cli::read_file(dir / "u2.csv.meta.json") ==
        cli::read_file(dir / "u.csv.meta.json"));
}

TEST_CASE("synth reruns are byte identical") {
  TempDir dir;
  CHECK(run_cli({"synth", "--seed", "21", "--n", "300", "--out", dir / "a.csv"}) == 0);
  CHECK(run_cli({"synth", "--seed", "21", "--n", "300", "--out", dir / "b.csv"}) == 0);
  CHECK(cli::read_file(dir / "a.csv") == cli::read_file(dir / "b.csv"));
  json ma = cli::load_json(dir / "a.csv.meta.json");
  json mb = cli::load_json(dir / "b.csv.meta.json");
  ma.erase("train_file");
  mb.erase("train_file");
  CHECK(ma.dump() == mb.dump());
  CHECK(ma.contains("seed"));
  CHECK(ma.contains("config_hash"));
}

TEST_CASE("fit reruns identical up to wall clock") {
  TempDir dir;
  std::string cfg = write_small_config(dir);
  CHECK(run_cli({"synth", "--seed", "5", "--n", "400", "--out", dir / "d.csv"}) == 0);
  CHECK(run_cli({"fit", "--data", dir / "d.csv", "--variant", "symmetric",
                 "--config", cfg, "--seed", "5", "--out-dir", dir / "m1"}) == 0);
  CHECK(run_cli({"fit", "--data", dir / "d.csv", "--variant", "symmetric",
                 "--config", cfg, "--seed", "5", "--out-dir", dir / "m2"}) == 0);
  CHECK(cli::read_file(dir / "m1/bundle.json") == cli::read_file(dir / "m2/bundle.json"));
  json r1 = cli::load_json(dir / "m1/report.json");
  json r2 = cli::load_json(dir / "m2/report.json");
  r1.erase("wall_clock_seconds");
  r2.erase("wall_clock_seconds");
  CHECK(r1.dump() == r2.dump());
}

TEST_CASE("select-structure and fit-inner round trip via files") {
  TempDir dir;
  json taus{{"tau",
             {{0.0, 0.6, 0.33, 0.33},
              {0.6, 0.0, 0.33, 0.33},
              {0.33, 0.33, 0.0, 0.8},
              {0.33, 0.33, 0.8, 0.0}}}};
  cli::write_file(dir / "taus.json", taus.dump());
  CHECK(run_cli({"select-structure", "--taus", dir / "taus.json", "--out",
                 dir / "bp.json"}) == 0);
  json bp = cli::load_json(dir / "bp.json");
  CHECK(bp.at("blueprint").at("groups").size() == 2);

  // fit-inner against a parametric target, few epochs
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 256;
  cfg.n_regen = 400;
  cfg.generator.atom_count = 16;
  cfg.generator.eps_dim = 3;
  cfg.generator.hidden = {8};
  cli::write_file(dir / "cfg.json", cfg.to_json().dump());
  cli::write_file(dir / "outer.json", ClaytonGenerator(1.0).to_json().dump());
  cli::write_file(dir / "target.json",
                  EmpiricalGenerator(std::vector<double>{0.5, 1.0, 2.0}).to_json().dump());
  CHECK(run_cli({"fit-inner", "--outer", dir / "outer.json", "--target",
                 dir / "target.json", "--config", dir / "cfg.json", "--seed", "3",
                 "--out", dir / "inner.json"}) == 0);
  json inner = cli::load_json(dir / "inner.json");
  CHECK(inner.at("nesting_pass").get<bool>());
  CHECK(inner.at("generator").at("kind") == "subordinator");
}

TEST_CASE("malformed inputs produce nonzero exit") {
  TempDir dir;
  cli::write_file(dir / "bad.csv", "not,a,header\n1,2,3\n");
  CHECK(run_cli({"fit", "--data", dir / "bad.csv", "--variant", "independent",
                 "--out-dir", dir / "m"}) != 0);
  cli::write_file(dir / "bad.json", "{broken");
  CHECK(run_cli({"sample-copula", "--copula", dir / "bad.json", "--out",
                 dir / "u.csv"}) != 0);
  CHECK(run_cli({"fit", "--data", dir / "missing.csv", "--variant", "bogus",
                 "--out-dir", dir / "m"}) != 0);
}
