// cocycle-clt <subcommand> --config <path> --out <dir> [--seed N] [--threads N] [--trace]
//
// Exit status 0 on success. On any error a JSON object
// {"error": <kind>, "detail": <message>} is printed to stdout and written to
// <out>/error.json, and the exit status is 1 (2 for usage errors).

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "cocycle_clt/pipeline.hpp"

using namespace cocycle_clt;

namespace {

std::uint64_t parse_seed(const std::string& text, const char* source) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used, 10);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::InvalidArgument, std::string(source) + " is not an unsigned integer: '" + text + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte Carlo experiments for Lyapunov spectra and central limit theorems of SL_d Markov cocycles"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::string> seed_text;
  unsigned threads = 1;
  bool trace = false;

  for (const auto& name : subcommands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed_text, "override the config seed");
    sub->add_option("--threads", threads, "worker threads for replica loops")->check(CLI::Range(1u, 1024u));
    sub->add_flag("--trace", trace, "write per-step increments of the Lyapunov run to trace.csv");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  try {
    auto config = load_config(config_path);
    if (seed_text) config.seed = parse_seed(*seed_text, "--seed");
    if (const char* env = std::getenv("COCYCLE_CLT_SEED")) config.seed = parse_seed(env, "COCYCLE_CLT_SEED");
    Pipeline pipeline(std::move(config), RunOptions{out_dir, threads, trace});
    const auto result = pipeline.run(sub);
    if (sub != "validate") std::cout << result.dump(2) << '\n';
    return 0;
  } catch (const Error& e) {
    const auto j = error_json(e);
    std::cout << j.dump() << '\n';
    try {
      fs::create_directories(out_dir);
      write_json(fs::path(out_dir) / "error.json", j);
    } catch (...) {
    }
    return 1;
  }
}
