#include "nmcrl/train_config.hpp"

#include <cmath>

#include "nmcrl/errors.hpp"

namespace nmcrl {

using nlohmann::json;

std::string to_string(EncoderKind kind) { return kind == EncoderKind::nesta ? "nesta" : "mlp"; }

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1], got " + std::to_string(eta));
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be nonnegative");
  if (!renormalize_noise && ablation.completion && noise_sigma > 0.0 && !ablation.alignment)
    throw ConfigError("renormalize_noise=false leaves loss inputs off the unit sphere unless alignment is enabled");
  if (heads < 1 || layers < 1 || ffn_expansion < 1) throw ConfigError("layers, heads and ffn_expansion must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (alignment_rows < 1) throw ConfigError("alignment_rows must be >= 1");
  if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be >= 1");
  if (eval_n_way == 1) throw ConfigError("eval_n_way must be 0 (all unseen classes) or >= 2");
  if (eval_k.empty()) throw ConfigError("eval_k must list at least one k");
  for (auto k : eval_k)
    if (k < 1) throw ConfigError("eval_k entries must be >= 1");
  if (band_edges.empty()) throw ConfigError("band_edges must not be empty");
}

json to_json(const TrainConfig& c) {
  json bands = json::array();
  for (const auto& b : c.band_edges) bands.push_back({{"name", b.name}, {"low_hz", b.low_hz}, {"high_hz", b.high_hz}});
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"temperature", c.temperature},
          {"eta", c.eta},
          {"noise_sigma", c.noise_sigma},
          {"renormalize_noise", c.renormalize_noise},
          {"ablation",
           {{"subject_specific", c.ablation.subject_specific},
            {"neural_spectral", c.ablation.neural_spectral},
            {"consistency", c.ablation.consistency},
            {"completion", c.ablation.completion},
            {"alignment", c.ablation.alignment}}},
          {"seed", c.seed},
          {"embed_dim", c.embed_dim},
          {"encoder", to_string(c.encoder)},
          {"distinct_classes", c.distinct_classes},
          {"symmetric_loss", c.symmetric_loss},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn_expansion", c.ffn_expansion},
          {"dropout", c.dropout},
          {"band_edges", bands},
          {"alignment_rows", c.alignment_rows},
          {"mlp_hidden", c.mlp_hidden},
          {"eval_n_way", c.eval_n_way},
          {"eval_k", c.eval_k},
          {"repetitions_averaged", c.repetitions_averaged}};
}

namespace {

void check_type(const json& v, const std::string& key, bool ok, const char* expected) {
  if (!ok) throw ConfigError("config key '" + key + "': expected " + expected + ", got " + v.type_name());
}

double as_real(const json& v, const std::string& key) {
  check_type(v, key, v.is_number(), "a number");
  return v.get<double>();
}

std::uint64_t as_count(const json& v, const std::string& key) {
  check_type(v, key, v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0),
             "a nonnegative integer");
  return v.get<std::uint64_t>();
}

bool as_bool(const json& v, const std::string& key) {
  check_type(v, key, v.is_boolean(), "a boolean");
  return v.get<bool>();
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = as_real(v, key);
    else if (key == "batch_size") c.batch_size = as_count(v, key);
    else if (key == "epochs") c.epochs = as_count(v, key);
    else if (key == "temperature") c.temperature = as_real(v, key);
    else if (key == "eta") c.eta = as_real(v, key);
    else if (key == "noise_sigma") c.noise_sigma = as_real(v, key);
    else if (key == "renormalize_noise") c.renormalize_noise = as_bool(v, key);
    else if (key == "seed") c.seed = as_count(v, key);
    else if (key == "embed_dim") c.embed_dim = as_count(v, key);
    else if (key == "distinct_classes") c.distinct_classes = as_bool(v, key);
    else if (key == "symmetric_loss") c.symmetric_loss = as_bool(v, key);
    else if (key == "layers") c.layers = as_count(v, key);
    else if (key == "heads") c.heads = as_count(v, key);
    else if (key == "ffn_expansion") c.ffn_expansion = as_count(v, key);
    else if (key == "dropout") c.dropout = as_real(v, key);
    else if (key == "alignment_rows") c.alignment_rows = as_count(v, key);
    else if (key == "mlp_hidden") c.mlp_hidden = as_count(v, key);
    else if (key == "eval_n_way") c.eval_n_way = as_count(v, key);
    else if (key == "repetitions_averaged") c.repetitions_averaged = as_bool(v, key);
    else if (key == "encoder") {
      check_type(v, key, v.is_string(), "a string");
      const auto s = v.get<std::string>();
      if (s == "nesta") c.encoder = EncoderKind::nesta;
      else if (s == "mlp") c.encoder = EncoderKind::mlp;
      else throw ConfigError("config key 'encoder': expected \"nesta\" or \"mlp\", got \"" + s + "\"");
    } else if (key == "eval_k") {
      check_type(v, key, v.is_array(), "an array");
      c.eval_k.clear();
      for (const auto& k : v) c.eval_k.push_back(as_count(k, key));
    } else if (key == "ablation") {
      check_type(v, key, v.is_object(), "an object");
      for (const auto& [flag, fv] : v.items()) {
        const std::string name = "ablation." + flag;
        if (flag == "subject_specific") c.ablation.subject_specific = as_bool(fv, name);
        else if (flag == "neural_spectral") c.ablation.neural_spectral = as_bool(fv, name);
        else if (flag == "consistency") c.ablation.consistency = as_bool(fv, name);
        else if (flag == "completion") c.ablation.completion = as_bool(fv, name);
        else if (flag == "alignment") c.ablation.alignment = as_bool(fv, name);
        else throw ConfigError("unknown config key '" + name + "'");
      }
    } else if (key == "band_edges") {
      check_type(v, key, v.is_array(), "an array");
      c.band_edges.clear();
      for (const auto& b : v) {
        check_type(b, key, b.is_object(), "an array of {name, low_hz, high_hz}");
        BandEdge e;
        for (const auto& [bk, bv] : b.items()) {
          if (bk == "name") {
            check_type(bv, key, bv.is_string(), "a string band name");
            e.name = bv.get<std::string>();
          } else if (bk == "low_hz") e.low_hz = as_real(bv, key);
          else if (bk == "high_hz") e.high_hz = as_real(bv, key);
          else throw ConfigError("unknown config key 'band_edges." + bk + "'");
        }
        c.band_edges.push_back(e);
      }
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) { return to_json(a) == to_json(b); }

}  // namespace nmcrl
