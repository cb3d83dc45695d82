// Writes the synthetic three-class clip set used for training sanity runs.

#include <iostream>

#include "CLI11.hpp"
#include "meranet/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic moving-pattern clip set", "meranet-synth"};
  std::string out;
  meranet::SynthOptions opt;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--seed", opt.seed);
  app.add_option("--clips-per-class", opt.clips_per_class);
  app.add_option("--val-per-class", opt.val_per_class);
  app.add_option("--frames", opt.frames);
  app.add_option("--size", opt.size, "frame side length in pixels");
  app.add_option("--noise", opt.noise, "pixel noise standard deviation");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    const auto m = meranet::generate_synthetic(out, opt);
    std::cout << "wrote " << m.clips.size() << " clips (" << m.count("train") << " train, "
              << m.count("val") << " val) to " << out << '\n';
  } catch (const std::exception& e) {
    std::cerr << "meranet-synth: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
