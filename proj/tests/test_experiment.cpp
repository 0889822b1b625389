#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "ctb/error.hpp"
#include "ctb/experiment.hpp"
#include "ctb/parallel.hpp"
#include "test_support.hpp"

using namespace ctb;
using namespace ctb::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ctb_test_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

CommandResult run(const std::string& command, const std::string& text, const fs::path& out) {
  RunOptions o;
  o.out_dir = out.string();
  return run_command(command, ExperimentConfig::parse(text), o);
}

int csv_rows(const fs::path& p) {
  std::ifstream is(p);
  int n = -1;
  for (std::string line; std::getline(is, line);) n += line.empty() ? 0 : 1;
  return n;
}

}  // namespace

TEST_CASE("config defaults cover every section") {
  const ExperimentConfig c = ExperimentConfig::defaults();
  for (const char* s : {"run", "region", "kernel", "testing", "transform", "compat", "operator", "report"})
    CHECK(c.values().count(s) == 1);
  CHECK(c.get("kernel", "kind") == "compact_cauchy");
  CHECK(c.integers("compat", "M") == std::vector<int>{2, 3, 4, 5, 6});
  CHECK(c.region().cell_count() == 128);
}

TEST_CASE("config overrides and typed access") {
  const ExperimentConfig c = ExperimentConfig::parse(
      "; comment\n[region]\nfinest_level = -4\n[operator]\neps = 0.5, 0.25\nlb = false\n[run]\nseed = 9\n");
  CHECK(c.integer("region", "finest_level") == -4);
  CHECK(c.numbers("operator", "eps") == std::vector<double>{0.5, 0.25});
  CHECK_FALSE(c.flag("operator", "lb"));
  CHECK(c.seed() == 9);
  CHECK(c.region().cell_count() == 16);
}

TEST_CASE("config rejects malformed input") {
  CHECK_THROWS_AS(ExperimentConfig::parse("[kernel]\nfoo = 1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kern]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kern]\nkind = zero\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("seed = 1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kernel]\ndelta = abc\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kernel]\nL = power:-1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kernel]\nS = wobbly:1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kernel]\nkind = custom\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[kernel]\nkind = sinc\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[testing]\nb1 = wave:1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[region]\ndim = 3\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[operator]\nlb = maybe\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/ctb.ini"), ConfigError);
}

TEST_CASE("testing profiles") {
  const Region r = interval(0, 0, -3);
  const GridFunction c = make_profile(r, "constant:2,-1", 0);
  CHECK(c[5] == Scalar(2, -1));
  // Cell centres are (k + 1/2)/8.
  const GridFunction p = make_profile(r, "polynomial:1,0,2", 0);
  CHECK(p[3].real() == doctest::Approx(1 + 2 * 0.4375 * 0.4375));
  const GridFunction w = make_profile(r, "power:0.5", 0);
  CHECK(w[0].real() == doctest::Approx(std::sqrt(0.0625)));
  const GridFunction s = make_profile(r, "spike:0.5,0.1,3", 0);
  CHECK(s[4] == Scalar(4));
  CHECK(s[3] == Scalar(4));
  CHECK(s[0] == Scalar(1));
  const GridFunction a = make_profile(r, "random:0.5,2", 7);
  const GridFunction b = make_profile(r, "random:0.5,2", 7);
  CHECK(max_abs_diff(a, b) == 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(a[i]) >= 0.5);
    CHECK(std::abs(a[i]) <= 2);
  }

  const fs::path dir = scratch("profile");
  {
    std::ofstream os(dir / "b.csv");
    a.write_csv(os);
  }
  CHECK(max_abs_diff(make_profile(r, "file:" + (dir / "b.csv").string(), 0), a) < 1e-15);
  CHECK_THROWS_AS(make_profile(r, "file:" + (dir / "none.csv").string(), 0), IoError);
}

TEST_CASE("unknown command") {
  CHECK_THROWS_AS(run_command("plot", ExperimentConfig::defaults()), ConfigError);
  CHECK(command_names().size() == 5);
}

TEST_CASE("transform with constant testing functions passes") {
  const fs::path out = scratch("transform");
  const CommandResult res = run("transform", "", out);
  CHECK(res.pass);
  const json j = read_json(out / "transform.json");
  CHECK(j["command"] == "transform");
  CHECK(j["verdict"] == "PASS");
  CHECK(j["wallclock"] == "transform.run.json");
  CHECK(j["config_echo"]["region"]["finest_level"] == "-7");
  CHECK_FALSE(j["config_echo"]["run"].contains("out"));
  for (const auto& s : j["metrics"]["systems"]) CHECK(s["max_reconstruction_error"].get<double>() < 1e-12);
  CHECK(fs::exists(out / "transform_roundtrip.csv"));
  CHECK(fs::exists(out / "transform_gram.csv"));
  CHECK(fs::exists(out / "transform_siblings.csv"));
  CHECK(read_json(out / "transform.run.json").contains("wallclock_seconds"));
}

TEST_CASE("transform with random testing functions is reproducible") {
  const std::string cfg = "[testing]\nb1 = random:0.2,1\nb2 = random:0.2,1\n";
  const fs::path a = scratch("transform_a");
  const fs::path b = scratch("transform_b");
  CHECK(run("transform", cfg, a).pass);
  CHECK(run("transform", cfg, b).pass);
  for (const char* f : {"transform.json", "transform_roundtrip.csv", "transform_gram.csv", "transform_siblings.csv"})
    CHECK(slurp(a / f) == slurp(b / f));

  RunOptions o;
  o.out_dir = (b / "other").string();
  o.seed = 2;
  CHECK(run_command("transform", ExperimentConfig::parse(cfg), o).pass);
  CHECK(slurp(b / "other" / "transform_roundtrip.csv") != slurp(a / "transform_roundtrip.csv"));
}

TEST_CASE("transform names the degenerate cube") {
  // x - 1/2 integrates to zero over the root.
  const fs::path out = scratch("degenerate");
  try {
    run("transform", "[testing]\nb1 = polynomial:-0.5,1\n", out);
    FAIL("expected a degenerate testing function");
  } catch (const DegenerateError& e) {
    CHECK(std::string(e.what()).find("cube 0:0") != std::string::npos);
  }
}

TEST_CASE("kernel command for the zero kernel") {
  const fs::path out = scratch("kernel_zero");
  CHECK(run("kernel", "[kernel]\nkind = zero\n", out).pass);
  const json m = read_json(out / "kernel.json")["metrics"];
  CHECK(m["smoothness"]["worst_ratio"].get<double>() == 0);
  CHECK(m["decay"]["worst_ratio"].get<double>() == 0);
}

TEST_CASE("kernel command for the hilbert kernel") {
  const fs::path out = scratch("kernel_hilbert");
  CHECK(run("kernel", "[kernel]\nkind = hilbert\n", out).pass);
  const json m = read_json(out / "kernel.json")["metrics"];
  // 1/|t - x| against a constant envelope is an identity in one dimension.
  CHECK(m["decay"]["worst_ratio"].get<double>() == doctest::Approx(1).epsilon(1e-12));
  CHECK(m["smoothness"]["worst_ratio"].get<double>() > 1);
  CHECK(std::isfinite(m["smoothness"]["worst_ratio"].get<double>()));
  CHECK_FALSE(m["compact_kernel"].get<bool>());
  CHECK(m["triple"] == "L=constant:1 S=constant:1 D=constant:1");
  CHECK(csv_rows(out / "kernel_shell.csv") > 0);
}

TEST_CASE("compat command on constant testing functions") {
  const fs::path out = scratch("compat_one");
  CHECK(run("compat", "", out).pass);
  const json m = read_json(out / "compat.json")["metrics"];
  CHECK(m["verdict"] == "compatible");
  CHECK(m["tails_monotone"].get<bool>());
  CHECK(csv_rows(out / "compat_tails.csv") == 5);
  for (const auto& s : m["smallf"]) CHECK(s["fall_throughs"].get<int>() == 0);
}

TEST_CASE("compat command on a non accretive compatible pair") {
  // x - 0.3 changes sign on [0,1) yet no dyadic average along the tree vanishes.
  const std::string cfg = "[testing]\nb1 = polynomial:-0.3,1\nb2 = polynomial:-0.3,1\n";
  const Region r = ExperimentConfig::parse(cfg).region();
  const GridFunction b = make_profile(r, "polynomial:-0.3,1", 0);
  CHECK(b[0].real() < 0);
  const fs::path out = scratch("compat_signed");
  CHECK(run("compat", cfg, out).pass);
  CHECK(read_json(out / "compat.json")["metrics"]["verdict"] == "compatible");
}

TEST_CASE("compat command on an incompatible pair") {
  const fs::path out = scratch("compat_bad");
  CHECK_FALSE(run("compat", "[testing]\nb1 = power:2\nb2 = power:2\n", out).pass);
  const json j = read_json(out / "compat.json");
  CHECK(j["verdict"] == "FAIL");
  CHECK(j["metrics"]["verdict"] == "incompatible");
  CHECK(csv_rows(out / "compat_tails.csv") == 5);
}

TEST_CASE("operator command on the zero kernel") {
  const fs::path out = scratch("operator_zero");
  CHECK(run("operator", "[kernel]\nkind = zero\n", out).pass);
  const json m = read_json(out / "operator.json")["metrics"];
  CHECK(m["max_norm"].get<double>() == 0);
  CHECK(m["weak"]["max_ratio"].get<double>() == 0);
  CHECK(m["local"]["max_hardy"].get<double>() == 0);
  CHECK(m["cmo"]["tb1_bmo"].get<double>() == 0);
  CHECK(m["necessity"]["worst_ratio"].get<double>() == 0);
  for (const auto& p : m["compactness"]["curve"]) CHECK(p["perp_perp"].get<double>() == 0);
  for (const char* f : {"operator_weak.csv", "operator_local.csv", "operator_lb.csv", "operator_cmo.csv",
                        "operator_bump.csv", "operator_compactness.csv", "operator_necessity.csv"})
    CHECK(fs::exists(out / f));
}

TEST_CASE("operator command contrasts compact and hilbert kernels") {
  const fs::path a = scratch("operator_compact");
  const fs::path b = scratch("operator_hilbert");
  const std::string skip = "[operator]\nbump = false\nnecessity = false\nlocal = false\n";
  CHECK(run("operator", skip, a).pass);
  CHECK(run("operator", skip + "[kernel]\nkind = hilbert\n", b).pass);
  const json ca = read_json(a / "operator.json")["metrics"]["compactness"];
  const json cb = read_json(b / "operator.json")["metrics"]["compactness"];
  CHECK(ca["compact_evidence"].get<bool>());
  CHECK_FALSE(cb["compact_evidence"].get<bool>());
  CHECK(ca["decrease_factor"].get<double>() >= 2);
  const double first = cb["curve"][0]["perp_perp"].get<double>();
  for (const auto& p : cb["curve"]) CHECK(std::abs(p["perp_perp"].get<double>() - first) <= 0.25 * first);
  CHECK_FALSE(read_json(b / "operator.json")["metrics"]["cmo"]["tb1_vanishing"].get<bool>());
}

TEST_CASE("operator command resumes from a persisted matrix") {
  const fs::path out = scratch("operator_cache");
  const std::string cfg = "[region]\nfinest_level = -5\n[operator]\ncache = " + (out / "T.bin").string() + "\n";
  CHECK(run("operator", cfg, out / "first").pass);
  CHECK(read_json(out / "first" / "operator.run.json")["cache"] == "stored");
  CHECK(fs::exists(out / "T.bin"));
  CHECK(run("operator", cfg, out / "second").pass);
  CHECK(read_json(out / "second" / "operator.run.json")["cache"] == "hit");
  CHECK(slurp(out / "first" / "operator.json") == slurp(out / "second" / "operator.json"));

  CHECK_THROWS_AS(run("operator", cfg + "[kernel]\nkind = hilbert\n", out / "third"), ConfigError);
  CHECK_THROWS_AS(run("operator", "[region]\nfinest_level = -4\n[operator]\ncache = " +
                                      (out / "T.bin").string() + "\n",
                      out / "fourth"),
                  ConfigError);
}

TEST_CASE("operator reports do not depend on the thread count") {
  const fs::path out = scratch("operator_threads");
  const std::string cfg = "[region]\nfinest_level = -5\n[testing]\nb1 = random:0.3,1\nb2 = random:0.3,1\n";
  const int before = thread_count();
  set_thread_count(1);
  CHECK(run("operator", cfg, out / "one").pass);
  set_thread_count(4);
  CHECK(run("operator", cfg, out / "four").pass);
  set_thread_count(before);
  for (const auto& e : fs::directory_iterator(out / "one")) {
    const std::string name = e.path().filename().string();
    if (name.ends_with(".run.json")) continue;
    CHECK_MESSAGE(slurp(e.path()) == slurp(out / "four" / name), name);
  }
  CHECK(read_json(out / "four" / "operator.run.json")["threads"] == 4);
}

TEST_CASE("report merges passing inputs") {
  const fs::path out = scratch("report_pass");
  const std::string cfg = "[region]\nfinest_level = -7\n";
  for (const char* c : {"transform", "kernel", "compat", "operator"}) CHECK(run(c, cfg, out).pass);
  CHECK(run("report", cfg, out).pass);
  const json m = read_json(out / "report.json")["metrics"];
  for (const auto& [k, v] : m["inputs"].items()) CHECK(v == "PASS");
  CHECK(m["hypotheses"]["compact_kernel"].get<bool>());
  CHECK(m["hypotheses"]["compatible"].get<bool>());
  CHECK(m["conditions"]["weak_compactness"].get<bool>());
  CHECK(m["conditions"]["tb1_in_cmo"].get<bool>());
  CHECK(m["conditions"]["tstar_b2_in_cmo"].get<bool>());
  CHECK(m["outcome"] == "compact");
}

TEST_CASE("report tolerates missing inputs") {
  const fs::path out = scratch("report_missing");
  CHECK(run("kernel", "", out).pass);
  CHECK(run("report", "", out).pass);
  const json m = read_json(out / "report.json")["metrics"];
  CHECK(m["inputs"]["kernel.json"] == "PASS");
  CHECK(m["inputs"]["operator.json"] == "missing");
  CHECK(m["outcome"] == "incomplete");

  CHECK_THROWS_AS(run("report", "", scratch("report_empty")), IoError);
}

TEST_CASE("report renders the bounded non compact control") {
  const fs::path out = scratch("report_hilbert");
  const std::string cfg = "[kernel]\nkind = hilbert\n[operator]\nbump = false\n";
  for (const char* c : {"kernel", "compat", "operator"}) CHECK(run(c, cfg, out).pass);
  CHECK(run("report", cfg, out).pass);
  const json m = read_json(out / "report.json")["metrics"];
  CHECK_FALSE(m["hypotheses"]["compact_kernel"].get<bool>());
  CHECK_FALSE(m["compression_decays"].get<bool>());
  CHECK_FALSE(m["conditions"]["tb1_in_cmo"].get<bool>());
  CHECK(m["outcome"] == "hypotheses_unmet");
  CHECK(m["inputs"]["transform.json"] == "missing");
}
