// Batch driver over the C API. Exit codes: 0 PASS, 1 invariant failure,
// 2 configuration error.
#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <string>

#include "ctb/ctb.h"

namespace {

int exit_code(ctb_status s) {
  switch (s) {
    case CTB_OK:
      return 0;
    case CTB_ERR_CONFIG:
    case CTB_ERR_IO:
    case CTB_ERR_ARGUMENT:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dyadic diagnostics for compact singular integral operators"};
  app.require_subcommand(1, 1);
  std::string config;
  std::string out;
  std::int64_t seed = -1;
  int threads = 1;
  app.add_option("--config", config, "Config file")->required();
  app.add_option("--seed", seed, "Seed overriding run.seed")->check(CLI::NonNegativeNumber);
  app.add_option("--out", out, "Output directory overriding run.out");
  app.add_option("--threads", threads, "Worker threads, 0 for all cores")->check(CLI::NonNegativeNumber);
  app.fallthrough();
  const char* commands[][2] = {{"transform", "Wavelet round trips, Gram table and sibling sums"},
                               {"kernel", "Kernel smoothness, decay and shell bounds"},
                               {"compat", "Compatibility scan and smallF census"},
                               {"operator", "Operator diagnostics on the discretized kernel"},
                               {"report", "Merge the JSON reports into one verdict"}};
  for (const auto& c : commands) app.add_subcommand(c[0], c[1]);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  ctb_status s = ctb_set_threads(threads);
  if (s != CTB_OK) {
    std::fprintf(stderr, "error: %s\n", ctb_last_error());
    return exit_code(s);
  }
  int pass = 0;
  s = ctb_run(command.c_str(), config.c_str(), seed, out.empty() ? nullptr : out.c_str(), &pass);
  if (s != CTB_OK) {
    std::fprintf(stderr, "error (%s): %s\n", ctb_status_name(s), ctb_last_error());
    return exit_code(s);
  }
  std::printf("%s %s\n", command.c_str(), pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}
