// Command-line front end: selfcheck, forward, gradcheck, bench, gen-fixture.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cafbifpn/cli.hpp"

int main(int argc, char** argv) {
  namespace cli = cafbifpn::cli;
  CLI::App app{"C-AFBiFPN feature pyramid: forward passes, gradient checks and benchmarks"};
  app.require_subcommand(1);

  std::string config, input, output, fault;
  std::uint64_t seed = 0;
  std::vector<std::size_t> sizes{16, 32, 64};
  int reps = 3;

  auto* selfcheck = app.add_subcommand("selfcheck", "run every invariant at desk scale");
  selfcheck->add_option("--inject-fault", fault, "test hook: topk-tiebreak");

  auto* forward = app.add_subcommand("forward", "run the pipeline on C2..C5 and write P2O..P5O");
  forward->add_option("--config", config)->required()->check(CLI::ExistingFile);
  forward->add_option("--input", input)->required()->check(CLI::ExistingDirectory);
  forward->add_option("--output", output)->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients per parameter group");
  gradcheck->add_option("--config", config)->required()->check(CLI::ExistingFile);
  gradcheck->add_option("--seed", seed)->required();

  auto* bench = app.add_subcommand("bench", "dense vs routed attention timings and MAC counts");
  bench->add_option("--config", config)->required()->check(CLI::ExistingFile);
  bench->add_option("--sizes", sizes, "square map extents")->delimiter(',');
  bench->add_option("--reps", reps)->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-fixture", "write synthetic backbone maps C2..C5");
  gen->add_option("--seed", seed)->required();
  gen->add_option("--out", output)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::ok : cli::usage_error;
  }

  return cli::guarded(
      [&] {
        if (*selfcheck) return cli::selfcheck(fault, std::cout);
        if (*forward) return cli::forward(config, input, output, std::cout);
        if (*gradcheck) return cli::gradcheck(config, seed, std::cout);
        if (*bench) return cli::bench(config, sizes, reps, std::cout);
        return cli::gen_fixture(seed, output, std::cout);
      },
      std::cerr);
}
