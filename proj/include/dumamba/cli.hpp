#pragma once

// Command implementations behind the dumamba tool. Options are precision
// neutral; each build provides its own entry point.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dumamba::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitNumeric = 3,
  kExitSelfcheck = 4,
};

struct Options {
  std::string command;
  std::string config;  // JSON file; flags below override it
  std::optional<std::uint64_t> seed;
  std::string out;
  bool f64 = false;

  std::string manifest;
  std::string checkpoint;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::size_t count = 4;   // gen-data
  int extent = 32;         // gen-data
  std::vector<std::string> families;  // perturb; empty means all
  bool corrupt_adjoint = false;       // selfcheck fault injection
  bool quiet = false;
};

int run_f32(const Options& opt);
int run_f64(const Options& opt);

inline int run(const Options& opt) { return opt.f64 ? run_f64(opt) : run_f32(opt); }

}  // namespace dumamba::cli
