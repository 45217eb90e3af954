// Writes the synthetic induction model with its tokenizer, template and a
// dataset to a directory that the CLI can load with --model.

#include "iclc/fixture.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Write the synthetic induction fixture"};
  std::string out;
  int n = 256;
  std::uint64_t seed = 7;
  app.add_option("out", out, "Output directory")->required();
  app.add_option("--examples", n, "Dataset size");
  app.add_option("--seed", seed, "Dataset seed");
  CLI11_PARSE(app, argc, argv);
  try {
    std::filesystem::create_directories(out);
    iclc::fixture::write(iclc::fixture::build(), out, n, seed);
    std::cout << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
