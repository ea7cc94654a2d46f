#include "kgpath/checkpoint.h"

#include <algorithm>
#include <fstream>
#include <tuple>
#include <sstream>

#include "kgpath/binary_io.h"
#include "kgpath/errors.h"

namespace kgpath {

namespace {
constexpr const char* kMagic = "kgpath-checkpoint";

void expect(std::istream& in, const std::string& word) {
  std::string got;
  in >> got;
  if (got != word) throw VersionError("checkpoint: expected '" + word + "', found '" + got + "'");
}

std::string read_line(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw VersionError("checkpoint: truncated header");
  return line;
}
}  // namespace

TrainedModel make_model(const RunConfig& config, const Vocabulary& vocab, FusedStateTable states) {
  TrainedModel m;
  m.config = config;
  m.vocab = vocab;
  m.states = std::move(states);
  FusionConfig fusion = config.fusion();
  if (!m.states.empty()) {
    fusion.structure_dim = m.states.structure_dim();
    fusion.image_dim = m.states.image_dim();
    fusion.ocr_dim = m.states.ocr_dim();
  }
  m.net = std::make_unique<SequenceModel>(config.encoder(vocab.num_tokens(), fusion));
  return m;
}

void save_checkpoint(const std::filesystem::path& file, const TrainedModel& model) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + file.string());
  const std::string config = model.config.to_text();
  out << kMagic << ' ' << kCheckpointVersion << '\n';
  out << "config " << std::count(config.begin(), config.end(), '\n') << '\n' << config;
  out << "entities " << model.vocab.num_entities() << '\n';
  for (const auto& e : model.vocab.entity_names()) out << e << '\n';
  const auto relations = model.vocab.base_relation_names();
  out << "relations " << relations.size() << '\n';
  for (const auto& r : relations) out << r << '\n';
  const FusedStateTable& s = model.states;
  out << "states " << (s.empty() ? 0 : s.table().rows()) << ' ' << s.structure_dim() << ' '
      << s.image_dim() << ' ' << s.ocr_dim() << '\n';
  const ParamStore& params = model.net->params();
  out << "params " << params.size() << '\n';
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& v = params.vars()[i]->value;
    out << params.names()[i] << ' ' << v.rows() << ' ' << v.cols() << '\n';
  }
  out << "payload\n";
  if (!s.empty())
    for (double v : s.table().data()) binary::write_f64(out, v);
  for (const auto& var : params.vars())
    for (double v : var->value.data()) binary::write_f64(out, v);
  if (!out) throw IoError("write failed: " + file.string());
}

TrainedModel load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + file.string());
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kMagic) throw VersionError("not a checkpoint: " + file.string());
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  std::size_t n = 0;
  expect(in, "config");
  in >> n;
  read_line(in);
  std::string config_text;
  for (std::size_t i = 0; i < n; ++i) config_text += read_line(in) + '\n';
  const RunConfig config = RunConfig::parse(config_text, file.string());

  std::vector<std::string> entities, relations;
  expect(in, "entities");
  in >> n;
  read_line(in);
  for (std::size_t i = 0; i < n; ++i) entities.push_back(read_line(in));
  expect(in, "relations");
  in >> n;
  read_line(in);
  for (std::size_t i = 0; i < n; ++i) relations.push_back(read_line(in));
  const Vocabulary vocab = Vocabulary::build(entities, relations);

  std::size_t rows = 0, ds = 0, di = 0, dOcr = 0;
  expect(in, "states");
  in >> rows >> ds >> di >> dOcr;
  expect(in, "params");
  std::size_t count = 0;
  in >> count;
  std::vector<std::tuple<std::string, std::size_t, std::size_t>> shapes(count);
  for (auto& [name, r, c] : shapes) in >> name >> r >> c;
  expect(in, "payload");
  in.get();

  FusedStateTable states;
  if (rows > 0) {
    Tensor table({rows, ds + di + dOcr});
    for (double& v : table.data()) v = binary::read_f64(in);
    states = FusedStateTable(std::move(table), ds, di, dOcr);
  }
  TrainedModel model = make_model(config, vocab, std::move(states));
  const ParamStore& params = model.net->params();
  if (params.size() != count) {
    throw VersionError("checkpoint holds " + std::to_string(count) + " arrays, model expects " +
                       std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto& [name, r, c] = shapes[i];
    Tensor& v = params.vars()[i]->value;
    if (name != params.names()[i] || r != v.rows() || c != v.cols()) {
      throw VersionError("checkpoint array '" + name + "' does not match model array '" +
                         params.names()[i] + "' " + v.shape_string());
    }
    for (double& x : v.data()) x = binary::read_f64(in);
  }
  return model;
}

void require_same_vocabulary(const TrainedModel& model, const Vocabulary& data_vocab) {
  if (!(model.vocab == data_vocab)) {
    throw VersionError("vocabulary mismatch: checkpoint has " +
                       std::to_string(model.vocab.num_entities()) + " entities / " +
                       std::to_string(model.vocab.num_base_relations()) + " relations, data has " +
                       std::to_string(data_vocab.num_entities()) + " / " +
                       std::to_string(data_vocab.num_base_relations()));
  }
}

}  // namespace kgpath
