#include "kgpath/synthetic.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "kgpath/errors.h"
#include "kgpath/rng.h"

namespace kgpath {

namespace {

std::string numbered(const char* prefix, std::size_t i, std::size_t count) {
  const int digits = std::max(2, static_cast<int>(std::to_string(count - 1).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, digits, i);
  return buf;
}

}  // namespace

SyntheticKg generate_synthetic(const SyntheticConfig& config) {
  if (config.entities < 2 || config.relations < 1 || config.clusters < 1 ||
      config.clusters > config.entities) {
    throw ConfigError("synthetic: need >= 2 entities, >= 1 relation, 1 <= clusters <= entities");
  }
  if (config.feature_fraction < 0.0 || config.feature_fraction > 1.0) {
    throw ConfigError("synthetic: feature_fraction must lie in [0, 1]");
  }
  Rng rng(derive_seed(config.seed, 0x5e7));
  const std::size_t n = config.entities;
  const std::size_t k = config.clusters;

  SyntheticKg kg;
  for (std::size_t i = 0; i < n; ++i) kg.entity_names.push_back(numbered("e", i, n));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  kg.cluster.assign(n, 0);
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t pos = 0; pos < n; ++pos) {
    kg.cluster[order[pos]] = pos % k;
    members[pos % k].push_back(order[pos]);
  }
  for (auto& m : members) std::sort(m.begin(), m.end());

  const std::size_t base = (config.relations + 2) / 2;
  // hub[b][c]: tail entity of base relation b for heads in cluster c.
  std::vector<std::vector<std::size_t>> hub(base, std::vector<std::size_t>(k));
  for (std::size_t b = 0; b < base; ++b) {
    std::vector<std::size_t> perm(k);
    for (std::size_t c = 0; c < k; ++c) perm[c] = c;
    rng.shuffle(perm);
    for (std::size_t c = 0; c < k; ++c) {
      const auto& pool = members[perm[c]];
      hub[b][c] = pool[rng.below(pool.size())];
    }
  }
  auto tail_of = [&](std::size_t rel, std::size_t head) {
    if (rel < base) return hub[rel][kg.cluster[head]];
    const std::size_t j = rel - base;
    const std::size_t first = j % base;
    const std::size_t second = (j + 1) % base;
    const std::size_t mid = hub[first][kg.cluster[head]];
    return hub[second][kg.cluster[mid]];
  };

  std::vector<NamedTriple> all;
  for (std::size_t h = 0; h < n; ++h) {
    for (std::size_t r = 0; r < config.relations; ++r) {
      const std::size_t t = tail_of(r, h);
      if (t == h) continue;
      all.push_back({kg.entity_names[h], "r" + std::to_string(r), kg.entity_names[t]});
    }
  }
  rng.shuffle(all);

  const auto n_test = static_cast<std::size_t>(std::llround(config.test_fraction * all.size()));
  const auto n_valid = static_cast<std::size_t>(std::llround(config.valid_fraction * all.size()));
  std::vector<NamedTriple> held_test(all.begin(), all.begin() + n_test);
  std::vector<NamedTriple> held_valid(all.begin() + n_test, all.begin() + n_test + n_valid);
  kg.train.assign(all.begin() + n_test + n_valid, all.end());

  // Evaluation is transductive: held-out triples must mention known entities.
  std::set<std::string> seen;
  for (const auto& t : kg.train) {
    seen.insert(t[0]);
    seen.insert(t[2]);
  }
  auto keep_or_move = [&](const std::vector<NamedTriple>& held, std::vector<NamedTriple>& dest) {
    for (const auto& t : held) {
      if (seen.count(t[0]) && seen.count(t[2])) {
        dest.push_back(t);
      } else {
        kg.train.push_back(t);
        seen.insert(t[0]);
        seen.insert(t[2]);
      }
    }
  };
  keep_or_move(held_test, kg.test);
  keep_or_move(held_valid, kg.valid);

  // Cluster centroids, then per-entity vectors for the featured subset.
  const std::size_t w = config.feature_width;
  std::vector<std::vector<double>> img_centroid(k, std::vector<double>(w));
  std::vector<std::vector<double>> ocr_centroid(k, std::vector<double>(w));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < w; ++j) img_centroid[c][j] = rng.normal();
    for (std::size_t j = 0; j < w; ++j) ocr_centroid[c][j] = rng.normal();
  }
  std::vector<std::size_t> featured(n);
  for (std::size_t i = 0; i < n; ++i) featured[i] = i;
  rng.shuffle(featured);
  const auto n_featured = static_cast<std::size_t>(std::llround(config.feature_fraction * n));
  featured.resize(n_featured);
  std::sort(featured.begin(), featured.end());
  for (std::size_t e : featured) {
    ModalFeatureSet f;
    std::vector<double> img(w), ocr(w);
    for (std::size_t j = 0; j < w; ++j) {
      img[j] = config.signal * img_centroid[kg.cluster[e]][j] + config.noise * rng.normal();
    }
    for (std::size_t j = 0; j < w; ++j) {
      ocr[j] = config.signal * ocr_centroid[kg.cluster[e]][j] + config.noise * rng.normal();
    }
    f.image = std::move(img);
    f.ocr = std::move(ocr);
    kg.features[kg.entity_names[e]] = std::move(f);
  }
  return kg;
}

void write_synthetic(const SyntheticKg& kg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  write_triple_file(dir / "train.tsv", kg.train);
  write_triple_file(dir / "valid.tsv", kg.valid);
  write_triple_file(dir / "test.tsv", kg.test);

  std::vector<std::string> relations;
  for (const auto* split : {&kg.train, &kg.valid, &kg.test}) {
    for (const auto& t : *split) relations.push_back(t[1]);
  }
  const Vocabulary vocab = Vocabulary::build(kg.entity_names, relations);
  std::size_t width = 0;
  for (const auto& [name, f] : kg.features) {
    if (f.image) width = f.image->size();
  }
  FeatureRegistry registry(width);
  for (const auto& [name, f] : kg.features) registry.register_features(vocab.entity_id(name), f);
  write_feature_file(dir / "features.tsv", registry, vocab);
}

}  // namespace kgpath
