#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctb/kernel.hpp"
#include "ctb/operator.hpp"
#include "ctb/wavelets.hpp"

namespace ctb {

// Flat sectioned key-value configuration. Every known key is present after
// parsing, defaults included; unknown sections and keys are rejected.
class ExperimentConfig {
 public:
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  static ExperimentConfig defaults();

  const std::string& get(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, const std::string& value);
  double number(const std::string& section, const std::string& key) const;
  int integer(const std::string& section, const std::string& key) const;
  bool flag(const std::string& section, const std::string& key) const;
  std::vector<int> integers(const std::string& section, const std::string& key) const;
  std::vector<double> numbers(const std::string& section, const std::string& key) const;

  // section -> key -> value, in key order.
  const std::map<std::string, std::map<std::string, std::string>>& values() const { return values_; }

  Region region() const;
  KernelParams kernel_params() const;
  CompactKernel kernel() const;
  QuadratureSettings quadrature() const;
  GridFunction testing_function(const Region& region, int which) const;
  TestingPair testing_pair(const Region& region) const;
  std::uint64_t seed() const;

 private:
  // Builds every derived object once so that bad values fail before any work.
  void validate() const;

  std::map<std::string, std::map<std::string, std::string>> values_;
};

// b profiles: constant:re[,im] | polynomial:a0,a1,... | power:p |
// spike:centre,width,height | random:lo,hi | file:path.
GridFunction make_profile(const Region& region, const std::string& spec, std::uint64_t seed);

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

struct CommandResult {
  std::string command;
  bool pass = false;
  // Report files written, relative to the output directory.
  std::vector<std::string> files;
};

std::vector<std::string> command_names();

// Runs one subcommand, writing CSV tables and <command>.json to the output
// directory. Run-dependent facts (wall clock, thread count, cache use) go to
// <command>.run.json so the reports themselves are reproducible.
CommandResult run_command(const std::string& command, ExperimentConfig config,
                          const RunOptions& options = {});

}  // namespace ctb
