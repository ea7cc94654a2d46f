#ifndef KGPATH_SYNTHETIC_H_
#define KGPATH_SYNTHETIC_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kgpath/kg_store.h"

namespace kgpath {

// Seeded generator for a small multimodal KG. Entities fall into latent
// clusters; the tail of (h, r) is a per-(relation, cluster) hub entity, so
// answers are determined by the head's cluster, which the image and OCR
// vectors encode with strength `signal`. The first relations are base maps
// and the remaining ones are compositions of two base maps, which gives the
// path miner two-hop decompositions to find.
struct SyntheticConfig {
  std::size_t entities = 50;
  std::size_t relations = 5;
  std::size_t clusters = 5;
  std::size_t feature_width = 32;
  double signal = 1.0;
  double noise = 1.0;
  double feature_fraction = 0.9;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 42;
};

struct SyntheticKg {
  std::vector<NamedTriple> train;
  std::vector<NamedTriple> valid;
  std::vector<NamedTriple> test;
  std::vector<std::string> entity_names;
  std::vector<std::size_t> cluster;  // parallel to entity_names
  std::map<std::string, ModalFeatureSet> features;
};

SyntheticKg generate_synthetic(const SyntheticConfig& config);

// Writes train.tsv, valid.tsv, test.tsv and features.tsv into `dir`.
void write_synthetic(const SyntheticKg& kg, const std::filesystem::path& dir);

}  // namespace kgpath

#endif  // KGPATH_SYNTHETIC_H_
