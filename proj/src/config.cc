#include "kgpath/config.h"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include "kgpath/errors.h"

namespace kgpath {

namespace {

using Field = std::variant<std::size_t RunConfig::*, double RunConfig::*, bool RunConfig::*,
                           std::string RunConfig::*>;

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> kFields = {
      {"width", &RunConfig::width},
      {"heads", &RunConfig::heads},
      {"layers", &RunConfig::layers},
      {"ffn_mult", &RunConfig::ffn_mult},
      {"init_scale", &RunConfig::init_scale},
      {"separate_trunks", &RunConfig::separate_trunks},
      {"mode", &RunConfig::mode},
      {"batch_size", &RunConfig::batch_size},
      {"epochs", &RunConfig::epochs},
      {"lr", &RunConfig::lr},
      {"epsilon", &RunConfig::epsilon},
      {"alpha", &RunConfig::alpha},
      {"beta", &RunConfig::beta},
      {"bias_b", &RunConfig::bias_b},
      {"noise", &RunConfig::noise},
      {"literal_smoothing_sum", &RunConfig::literal_smoothing_sum},
      {"p_k", &RunConfig::p_k},
      {"p_m", &RunConfig::p_m},
      {"eta", &RunConfig::eta},
      {"blind_reward_rate", &RunConfig::blind_reward_rate},
      {"r_good", &RunConfig::r_good},
      {"r_bad", &RunConfig::r_bad},
      {"r_step", &RunConfig::r_step},
      {"strict_paper_signs", &RunConfig::strict_paper_signs},
      {"max_hops", &RunConfig::max_hops},
      {"train_limit", &RunConfig::train_limit},
      {"seed", &RunConfig::seed},
      {"k_beam", &RunConfig::k_beam},
      {"typed_decoding", &RunConfig::typed_decoding},
      {"direct_channel", &RunConfig::direct_channel},
      {"graph_decoding", &RunConfig::graph_decoding},
      {"filtered", &RunConfig::filtered},
      {"feature_width", &RunConfig::feature_width},
      {"fusion_epochs", &RunConfig::fusion_epochs},
      {"fusion_lr", &RunConfig::fusion_lr},
      {"fusion_hidden", &RunConfig::fusion_hidden},
      {"fusion_init_scale", &RunConfig::fusion_init_scale},
      {"null_value", &RunConfig::null_value},
      {"gen_entities", &RunConfig::gen_entities},
      {"gen_relations", &RunConfig::gen_relations},
      {"gen_clusters", &RunConfig::gen_clusters},
      {"gen_signal", &RunConfig::gen_signal},
      {"gen_noise", &RunConfig::gen_noise},
      {"gen_feature_fraction", &RunConfig::gen_feature_fraction},
      {"gen_valid_fraction", &RunConfig::gen_valid_fraction},
      {"gen_test_fraction", &RunConfig::gen_test_fraction},
  };
  return kFields;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> kKeys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.first);
    return k;
  }();
  return kKeys;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, std::size_t>) {
          this->*member = parse_int<T>(key, value);
        } else if constexpr (std::is_same_v<T, double>) {
          this->*member = parse_double(key, value);
        } else if constexpr (std::is_same_v<T, bool>) {
          this->*member = parse_bool(key, value);
        } else {
          this->*member = value;
        }
      },
      field(key));
}

std::string RunConfig::get(const std::string& key) const {
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, double>) {
          return format_double(this->*member);
        } else if constexpr (std::is_same_v<T, bool>) {
          return this->*member ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return this->*member;
        } else {
          return std::to_string(this->*member);
        }
      },
      field(key));
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> kNames = {"paper-best", "overfit"};
  return kNames;
}

void RunConfig::apply_preset(const std::string& name) {
  if (name == "paper-best") {
    batch_size = 16;
    epsilon = 0.7;
    alpha = 0.6;
  } else if (name == "overfit") {
    train_limit = 1;
    epochs = 200;
    epsilon = 1.0;
    noise = false;
    p_k = 0.0;
    eta = 0.0;
    lr = 1e-2;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected paper-best or overfit)");
  }
}

void RunConfig::validate() const {
  parse_mode(mode);
  encoder(Vocabulary::kNumSpecial + 1, fusion()).validate();
  loss().validate();
  reward().validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  for (auto [name, p] : {std::pair{"p_k", p_k}, {"p_m", p_m}, {"eta", eta},
                              {"blind_reward_rate", blind_reward_rate}}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  }
  if (k_beam == 0) throw ConfigError("k_beam must be positive");
  if (max_hops == 0 || max_hops > kMaxHops) throw ConfigError("max_hops must lie in [1, 3]");
  if (feature_width == 0) throw ConfigError("feature_width must be positive");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& key : keys()) os << key << " = " << get(key) << '\n';
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, number, "expected key = value");
    try {
      const std::string key = trim(line.substr(0, eq));
      if (key == "preset") {
        cfg.apply_preset(trim(line.substr(eq + 1)));
      } else {
        cfg.set(key, line.substr(eq + 1));
      }
    } catch (const ConfigError& e) {
      throw ParseError(source, number, e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config: " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), file.string());
}

EncoderConfig RunConfig::encoder(std::size_t vocab_size, const FusionConfig& f) const {
  EncoderConfig e;
  e.width = width;
  e.heads = heads;
  e.layers = layers;
  e.ffn_mult = ffn_mult;
  e.vocab_size = vocab_size;
  e.structure_dim = f.structure_dim;
  e.image_dim = f.image_dim;
  e.ocr_dim = f.ocr_dim;
  e.init_scale = init_scale;
  e.bias_b = bias_b;
  e.separate_trunks = separate_trunks;
  e.mode = ablation();
  e.seed = derive_seed(seed, 1);
  return e;
}

LossConfig RunConfig::loss() const {
  return {.epsilon = epsilon, .beta = beta, .alpha = alpha, .noise = noise, .bias_b = bias_b,
          .literal_smoothing_sum = literal_smoothing_sum};
}

RewardConfig RunConfig::reward() const {
  return {.good = r_good, .bad = r_bad, .step = r_step, .strict_paper_signs = strict_paper_signs};
}

FusionConfig RunConfig::fusion() const {
  FusionConfig f;
  f.hidden = fusion_hidden;
  f.epochs = fusion_epochs;
  f.lr = fusion_lr;
  f.init_scale = fusion_init_scale;
  f.null_value = null_value;
  f.seed = derive_seed(seed, 2);
  return f;
}

SyntheticConfig RunConfig::synthetic() const {
  SyntheticConfig s;
  s.entities = gen_entities;
  s.relations = gen_relations;
  s.clusters = gen_clusters;
  s.feature_width = feature_width;
  s.signal = gen_signal;
  s.noise = gen_noise;
  s.feature_fraction = gen_feature_fraction;
  s.valid_fraction = gen_valid_fraction;
  s.test_fraction = gen_test_fraction;
  s.seed = seed;
  return s;
}

EvalOptions RunConfig::eval_options(const KgGraph* graph) const {
  EvalOptions o;
  o.decode.k_beam = k_beam;
  o.decode.typed = typed_decoding;
  o.decode.direct_channel = direct_channel;
  o.decode.graph = graph_decoding ? graph : nullptr;
  o.filtered = filtered;
  return o;
}

}  // namespace kgpath
