// Writes a synthetic dataset (PPM images + JSON-Lines annotations) and a
// ready-to-run pipeline config:
//
//   cfmdet_fixture <dir> [--train N] [--test N] [--seed S]

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <tuple>

#include <nlohmann/json.hpp>

#include "cfmdet/image.hpp"
#include "cfmdet/synthetic.hpp"
#include "cfmdet/tensorio.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  if (argc < 2 || std::string(argv[1]).rfind("--", 0) == 0) {
    std::cerr << "usage: cfmdet_fixture <dir> [--train N] [--test N] [--seed S]\n";
    return 2;
  }
  const fs::path dir = argv[1];
  std::size_t n_train = 200, n_test = 100;
  std::uint64_t seed = 1;
  for (int i = 2; i < argc; ++i) {
    const std::string a = argv[i];
    if (i + 1 >= argc) {
      std::cerr << "cfmdet_fixture: " << a << " needs a value\n";
      return 2;
    }
    const auto v = std::strtoull(argv[++i], nullptr, 10);
    if (a == "--train")
      n_train = v;
    else if (a == "--test")
      n_test = v;
    else if (a == "--seed")
      seed = v;
    else {
      std::cerr << "cfmdet_fixture: unknown option " << a << '\n';
      return 2;
    }
  }

  try {
    for (const auto& [name, count, s] : {std::tuple<std::string, std::size_t, std::uint64_t>{"train", n_train, seed},
                                         {"test", n_test, seed + 1}}) {
      const auto set = cfmdet::make_synthetic_set(count, s, name);
      fs::create_directories(dir / name);
      for (const auto& img : set) cfmdet::write_ppm(img.image, dir / name / (img.id + ".ppm"));
      cfmdet::write_annotations(cfmdet::to_annotations(set), dir / (name + ".jsonl"));
    }
    const nlohmann::json config = {
        {"seed", seed},
        {"output_dir", "out"},
        {"dataset",
         {{"train", {{"images", "train"}, {"annotations", "train.jsonl"}}},
          {"test", {{"images", "test"}, {"annotations", "test.jsonl"}}}}},
        {"pyramid", {{"scales_per_octave", 8}, {"min_scale", 1.0}, {"max_scale", 1.0}, {"ratio", 4}}},
        {"features", {"acf"}},
        {"train",
         {{"num_trees", 256},
          {"max_depth", 2},
          {"shrinkage", 0.5},
          {"bootstrap_rounds", 1},
          {"pos_per_gt", 10},
          {"seed_negatives", 2},
          {"neg_cap", 3000}}},
        {"detect", {{"threshold", nullptr}}},
        {"propose", {{"target", 20}, {"calibration_split", "train"}}},
        {"eval", {{"metric", "mr"}}},
        {"stages", {"bootstrap", "detect", "eval", "heatmap", "report"}}};
    std::ofstream out(dir / "config.json");
    out << config.dump(2) << '\n';
    std::cout << "wrote " << n_train << " train / " << n_test << " test images and config.json to " << dir.string()
              << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "cfmdet_fixture: error: " << e.what() << '\n';
    return 1;
  }
}
