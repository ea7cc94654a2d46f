#include "kgpath/kg_store.h"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "kgpath/errors.h"

namespace kgpath {

namespace {

const char* const kSpecialNames[] = {"<pad>", "<null>", "<bos>", "<eos>", "<mask>"};

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<std::string> closest(const std::vector<std::string>& pool, const std::string& name,
                                 std::size_t limit) {
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& cand : pool) scored.emplace_back(edit_distance(cand, name), cand);
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < limit; ++i) out.push_back(scored[i].second);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

Vocabulary Vocabulary::build(std::vector<std::string> entity_names,
                             std::vector<std::string> relation_names) {
  std::sort(entity_names.begin(), entity_names.end());
  entity_names.erase(std::unique(entity_names.begin(), entity_names.end()), entity_names.end());
  std::sort(relation_names.begin(), relation_names.end());
  relation_names.erase(std::unique(relation_names.begin(), relation_names.end()),
                       relation_names.end());

  Vocabulary v;
  v.entities_ = std::move(entity_names);
  v.base_relations_ = relation_names.size();
  v.relations_ = relation_names;
  for (const auto& r : relation_names) v.relations_.push_back(r + kInverseSuffix);
  for (std::size_t i = 0; i < v.entities_.size(); ++i) {
    v.entity_index_[v.entities_[i]] = static_cast<EntityId>(i);
  }
  for (std::size_t i = 0; i < v.relations_.size(); ++i) {
    if (!v.relation_index_.emplace(v.relations_[i], static_cast<RelationId>(i)).second) {
      throw ConfigError("relation name collides with a synthesized inverse: " + v.relations_[i]);
    }
  }
  return v;
}

std::optional<EntityId> Vocabulary::find_entity(const std::string& name) const {
  auto it = entity_index_.find(name);
  if (it == entity_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> Vocabulary::find_relation(const std::string& name) const {
  auto it = relation_index_.find(name);
  if (it == relation_index_.end()) return std::nullopt;
  return it->second;
}

EntityId Vocabulary::entity_id(const std::string& name) const {
  if (auto e = find_entity(name)) return *e;
  throw LookupError("unknown entity: " + name);
}

RelationId Vocabulary::relation_id(const std::string& name) const {
  if (auto r = find_relation(name)) return *r;
  throw LookupError("unknown relation: " + name);
}

const std::string& Vocabulary::entity_name(EntityId e) const {
  if (e < 0 || static_cast<std::size_t>(e) >= entities_.size()) {
    throw LookupError("entity id out of range: " + std::to_string(e));
  }
  return entities_[e];
}

const std::string& Vocabulary::relation_name(RelationId r) const {
  if (r < 0 || static_cast<std::size_t>(r) >= relations_.size()) {
    throw LookupError("relation id out of range: " + std::to_string(r));
  }
  return relations_[r];
}

std::vector<std::string> Vocabulary::base_relation_names() const {
  return {relations_.begin(), relations_.begin() + static_cast<std::ptrdiff_t>(base_relations_)};
}

RelationId Vocabulary::inverse(RelationId r) const {
  relation_name(r);
  const auto b = static_cast<RelationId>(base_relations_);
  return r < b ? r + b : r - b;
}

TokenId Vocabulary::entity_token(EntityId e) const {
  entity_name(e);
  return kNumSpecial + e;
}

TokenId Vocabulary::relation_token(RelationId r) const {
  relation_name(r);
  return kNumSpecial + static_cast<TokenId>(entities_.size()) + r;
}

TokenKind Vocabulary::kind(TokenId t) const {
  if (t < 0 || static_cast<std::size_t>(t) >= num_tokens()) {
    throw LookupError("token id out of range: " + std::to_string(t));
  }
  if (t < kNumSpecial) return TokenKind::kSpecial;
  if (static_cast<std::size_t>(t - kNumSpecial) < entities_.size()) return TokenKind::kEntity;
  return TokenKind::kRelation;
}

EntityId Vocabulary::token_entity(TokenId t) const {
  if (kind(t) != TokenKind::kEntity) throw LookupError("token is not an entity: " + std::to_string(t));
  return t - kNumSpecial;
}

RelationId Vocabulary::token_relation(TokenId t) const {
  if (kind(t) != TokenKind::kRelation) {
    throw LookupError("token is not a relation: " + std::to_string(t));
  }
  return t - kNumSpecial - static_cast<TokenId>(entities_.size());
}

std::string Vocabulary::token_name(TokenId t) const {
  switch (kind(t)) {
    case TokenKind::kSpecial:
      return kSpecialNames[t];
    case TokenKind::kEntity:
      return entities_[token_entity(t)];
    case TokenKind::kRelation:
      return relations_[token_relation(t)];
  }
  return {};
}

TokenId Vocabulary::token_from_name(const std::string& name) const {
  for (TokenId t = 0; t < kNumSpecial; ++t) {
    if (name == kSpecialNames[t]) return t;
  }
  if (auto e = find_entity(name)) return entity_token(*e);
  if (auto r = find_relation(name)) return relation_token(*r);
  throw LookupError("unknown token: " + name);
}

std::vector<std::string> Vocabulary::suggest_entities(const std::string& name,
                                                      std::size_t limit) const {
  return closest(entities_, name, limit);
}

std::vector<std::string> Vocabulary::suggest_relations(const std::string& name,
                                                       std::size_t limit) const {
  return closest(relations_, name, limit);
}

std::vector<NamedTriple> read_triple_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open triple file: " + path.string());
  std::vector<NamedTriple> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto parts = split(line, '\t');
    if (parts.size() != 3) {
      throw ParseError(path.string(), line_no,
                       "expected head<TAB>relation<TAB>tail, found " +
                           std::to_string(parts.size()) + " field(s)");
    }
    for (const auto& p : parts) {
      if (p.empty()) throw ParseError(path.string(), line_no, "empty field");
    }
    out.push_back({parts[0], parts[1], parts[2]});
  }
  return out;
}

void write_triple_file(const std::filesystem::path& path, const std::vector<NamedTriple>& triples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write triple file: " + path.string());
  for (const auto& t : triples) out << t[0] << '\t' << t[1] << '\t' << t[2] << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Triple> encode_triples(const Vocabulary& vocab, const std::vector<NamedTriple>& named) {
  std::vector<Triple> out;
  out.reserve(named.size());
  for (const auto& t : named) {
    out.push_back({vocab.entity_id(t[0]), vocab.relation_id(t[1]), vocab.entity_id(t[2])});
  }
  return out;
}

IngestResult ingest_triples(const std::filesystem::path& path) {
  const auto named = read_triple_file(path);
  std::vector<std::string> entities, relations;
  for (const auto& t : named) {
    entities.push_back(t[0]);
    entities.push_back(t[2]);
    relations.push_back(t[1]);
  }
  IngestResult result;
  result.vocab = Vocabulary::build(std::move(entities), std::move(relations));
  result.triples = encode_triples(result.vocab, named);
  return result;
}

TripleSet augment_inverse(const TripleSet& input, const Vocabulary& vocab) {
  if (input.augmented) throw ContractError("augment_inverse: triples are already augmented");
  TripleSet out;
  out.augmented = true;
  out.triples.reserve(input.triples.size() * 2);
  out.triples = input.triples;
  for (const Triple& t : input.triples) {
    out.triples.push_back({t.tail, vocab.inverse(t.relation), t.head});
  }
  return out;
}

void FeatureRegistry::check_width(const std::optional<std::vector<double>>& v,
                                  const char* what) const {
  if (v && v->size() != width_) {
    throw DimensionError(std::string(what) + " feature width " + std::to_string(v->size()) +
                         " does not match configured width " + std::to_string(width_));
  }
}

void FeatureRegistry::register_features(EntityId entity, ModalFeatureSet features) {
  check_width(features.image, "image");
  check_width(features.ocr, "ocr");
  entries_[entity] = std::move(features);
}

void FeatureRegistry::set(EntityId entity, Modality modality, std::vector<double> values) {
  std::optional<std::vector<double>> v(std::move(values));
  check_width(v, modality == Modality::kImage ? "image" : "ocr");
  auto& slot = entries_[entity];
  (modality == Modality::kImage ? slot.image : slot.ocr) = std::move(v);
}

const ModalFeatureSet& FeatureRegistry::lookup(EntityId entity) const {
  static const ModalFeatureSet kAbsent;
  auto it = entries_.find(entity);
  return it == entries_.end() ? kAbsent : it->second;
}

std::size_t FeatureRegistry::count(Modality modality) const {
  std::size_t n = 0;
  for (const auto& [e, f] : entries_) {
    n += modality == Modality::kImage ? f.image.has_value() : f.ocr.has_value();
  }
  return n;
}

FeatureRegistry read_feature_file(const std::filesystem::path& path, const Vocabulary& vocab,
                                  std::size_t width) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature file: " + path.string());
  FeatureRegistry registry(width);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto parts = split(line, '\t');
    if (parts.size() != 3) {
      throw ParseError(path.string(), line_no, "expected entity<TAB>kind<TAB>values");
    }
    Modality modality;
    if (parts[1] == "img") {
      modality = Modality::kImage;
    } else if (parts[1] == "ocr") {
      modality = Modality::kOcr;
    } else {
      throw ParseError(path.string(), line_no, "feature kind must be img or ocr, got " + parts[1]);
    }
    std::vector<double> values;
    for (const auto& tok : split(parts[2], ',')) {
      double v = 0.0;
      const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
        throw ParseError(path.string(), line_no, "bad number: '" + tok + "'");
      }
      values.push_back(v);
    }
    const EntityId e = vocab.entity_id(parts[0]);
    try {
      registry.set(e, modality, std::move(values));
    } catch (const DimensionError& err) {
      throw ParseError(path.string(), line_no, err.what());
    }
  }
  return registry;
}

void write_feature_file(const std::filesystem::path& path, const FeatureRegistry& registry,
                        const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write feature file: " + path.string());
  char buf[32];
  auto emit = [&](EntityId e, const char* kind, const std::vector<double>& v) {
    out << vocab.entity_name(e) << '\t' << kind << '\t';
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      out << (i ? "," : "") << buf;
    }
    out << '\n';
  };
  for (const auto& [e, f] : registry.entries()) {
    if (f.image) emit(e, "img", *f.image);
    if (f.ocr) emit(e, "ocr", *f.ocr);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& dir, std::size_t feature_width) {
  const auto train = read_triple_file(dir / "train.tsv");
  const auto valid = read_triple_file(dir / "valid.tsv");
  const auto test = read_triple_file(dir / "test.tsv");
  std::vector<std::string> entities, relations;
  for (const auto* split_triples : {&train, &valid, &test}) {
    for (const auto& t : *split_triples) {
      entities.push_back(t[0]);
      entities.push_back(t[2]);
      relations.push_back(t[1]);
    }
  }
  Dataset ds{Vocabulary::build(std::move(entities), std::move(relations)), {}, {}, {},
             FeatureRegistry(feature_width)};
  ds.train.triples = encode_triples(ds.vocab, train);
  ds.valid.triples = encode_triples(ds.vocab, valid);
  ds.test.triples = encode_triples(ds.vocab, test);
  if (std::filesystem::exists(dir / "features.tsv")) {
    ds.features = read_feature_file(dir / "features.tsv", ds.vocab, feature_width);
  }
  return ds;
}

}  // namespace kgpath
