#ifndef KGPATH_KG_STORE_H_
#define KGPATH_KG_STORE_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kgpath {

using EntityId = std::int32_t;
using RelationId = std::int32_t;
using TokenId = std::int32_t;

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend auto operator<=>(const Triple&, const Triple&) = default;
};

enum class TokenKind { kSpecial, kEntity, kRelation };

// Entity and relation tables plus the reserved tokens. Token ids are laid
// out as [specials | entities | forward relations | inverse relations];
// every id is a pure function of the sorted name sets.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kNull = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kMask = 4;
  static constexpr TokenId kNumSpecial = 5;
  static constexpr const char* kInverseSuffix = "_inv";

  Vocabulary() = default;
  // Names are sorted and deduplicated; inverse relations are synthesized.
  static Vocabulary build(std::vector<std::string> entity_names,
                          std::vector<std::string> relation_names);

  std::size_t num_entities() const { return entities_.size(); }
  std::size_t num_base_relations() const { return base_relations_; }
  std::size_t num_relations() const { return relations_.size(); }
  std::size_t num_tokens() const { return kNumSpecial + num_entities() + num_relations(); }

  EntityId entity_id(const std::string& name) const;
  RelationId relation_id(const std::string& name) const;
  std::optional<EntityId> find_entity(const std::string& name) const;
  std::optional<RelationId> find_relation(const std::string& name) const;
  const std::string& entity_name(EntityId e) const;
  const std::string& relation_name(RelationId r) const;
  const std::vector<std::string>& entity_names() const { return entities_; }
  // Forward relation names only (inverse names are derived).
  std::vector<std::string> base_relation_names() const;

  RelationId inverse(RelationId r) const;
  bool is_inverse(RelationId r) const { return static_cast<std::size_t>(r) >= base_relations_; }

  TokenId entity_token(EntityId e) const;
  TokenId relation_token(RelationId r) const;
  TokenKind kind(TokenId t) const;
  EntityId token_entity(TokenId t) const;
  RelationId token_relation(TokenId t) const;
  std::string token_name(TokenId t) const;
  // Parses the output of token_name.
  TokenId token_from_name(const std::string& name) const;

  // Closest names by shared prefix then edit distance, for error messages.
  std::vector<std::string> suggest_entities(const std::string& name, std::size_t limit = 5) const;
  std::vector<std::string> suggest_relations(const std::string& name, std::size_t limit = 5) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.entities_ == b.entities_ && a.relations_ == b.relations_;
  }

 private:
  std::vector<std::string> entities_;
  std::vector<std::string> relations_;
  std::size_t base_relations_ = 0;
  std::map<std::string, EntityId> entity_index_;
  std::map<std::string, RelationId> relation_index_;
};

using NamedTriple = std::array<std::string, 3>;

// Reads head<TAB>relation<TAB>tail lines; blank lines are skipped.
std::vector<NamedTriple> read_triple_file(const std::filesystem::path& path);
void write_triple_file(const std::filesystem::path& path, const std::vector<NamedTriple>& triples);

struct TripleSet {
  std::vector<Triple> triples;
  bool augmented = false;
};

struct IngestResult {
  std::vector<Triple> triples;
  Vocabulary vocab;
};

IngestResult ingest_triples(const std::filesystem::path& path);

std::vector<Triple> encode_triples(const Vocabulary& vocab, const std::vector<NamedTriple>& named);

// Appends (t, r^-1, h) for every (h, r, t). Rejects already augmented sets.
TripleSet augment_inverse(const TripleSet& input, const Vocabulary& vocab);

enum class Modality { kImage, kOcr };

struct ModalFeatureSet {
  std::optional<std::vector<double>> image;
  std::optional<std::vector<double>> ocr;

  friend bool operator==(const ModalFeatureSet&, const ModalFeatureSet&) = default;
};

// Per-entity raw image / OCR vectors. Unregistered entities read back with
// both modalities absent.
class FeatureRegistry {
 public:
  explicit FeatureRegistry(std::size_t width = 32) : width_(width) {}

  std::size_t width() const { return width_; }
  void register_features(EntityId entity, ModalFeatureSet features);
  void set(EntityId entity, Modality modality, std::vector<double> values);
  const ModalFeatureSet& lookup(EntityId entity) const;
  std::size_t count(Modality modality) const;
  std::size_t size() const { return entries_.size(); }
  const std::map<EntityId, ModalFeatureSet>& entries() const { return entries_; }

 private:
  void check_width(const std::optional<std::vector<double>>& v, const char* what) const;

  std::size_t width_;
  std::map<EntityId, ModalFeatureSet> entries_;
};

// entity<TAB>img|ocr<TAB>v1,v2,...  ; entities missing from the vocabulary
// are a lookup error.
FeatureRegistry read_feature_file(const std::filesystem::path& path, const Vocabulary& vocab,
                                  std::size_t width);
void write_feature_file(const std::filesystem::path& path, const FeatureRegistry& registry,
                        const Vocabulary& vocab);

struct Dataset {
  Vocabulary vocab;
  TripleSet train;
  TripleSet valid;
  TripleSet test;
  FeatureRegistry features;
};

// Loads train.tsv / valid.tsv / test.tsv (and features.tsv when present)
// from a directory. The vocabulary covers the union of all three splits.
Dataset load_dataset(const std::filesystem::path& dir, std::size_t feature_width);

}  // namespace kgpath

#endif  // KGPATH_KG_STORE_H_
