#include "nmcrl/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "nmcrl/errors.hpp"

namespace nmcrl {

namespace fs = std::filesystem;
using nlohmann::json;

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) return json::object();
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError(path.string() + ": expected a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

void apply_overrides(json& j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      json& next = (*node)[part];
      if (next.is_null()) next = json::object();
      if (!next.is_object()) throw ConfigError("override key '" + key + "': '" + part + "' is not an object");
      node = &next;
      start = dot + 1;
    }
  }
}

TrainConfig parse_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  json j = path ? read_json_file(*path) : json::object();
  apply_overrides(j, overrides);
  return train_config_from_json(j);
}

json to_json(const SynthSpec& s) {
  return {{"n_classes", s.n_classes},
          {"n_unseen_classes", s.n_unseen_classes},
          {"n_subjects", s.n_subjects},
          {"trials_per_class_per_subject", s.trials_per_class_per_subject},
          {"exemplars_per_class", s.exemplars_per_class},
          {"channels", s.channels},
          {"length", s.length},
          {"sampling_rate_hz", s.sampling_rate_hz},
          {"embed_dim", s.embed_dim},
          {"text_per_class", s.text_per_class},
          {"class_separation", s.class_separation},
          {"orthogonal_prototypes", s.orthogonal_prototypes},
          {"subject_perturbation", s.subject_perturbation},
          {"noise_sigma", s.noise_sigma},
          {"text_noise", s.text_noise},
          {"seed", s.seed}};
}

namespace {

void expect(bool ok, const std::string& key, const json& v, const char* what) {
  if (!ok) throw ConfigError("spec key '" + key + "': expected " + what + ", got " + v.type_name());
}

int as_int(const std::string& key, const json& v) {
  expect(v.is_number_integer(), key, v, "an integer");
  return v.get<int>();
}

double as_real(const std::string& key, const json& v) {
  expect(v.is_number(), key, v, "a number");
  return v.get<double>();
}

}  // namespace

SynthSpec synth_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("synth spec must be a JSON object");
  SynthSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "n_classes") s.n_classes = as_int(key, v);
    else if (key == "n_unseen_classes") s.n_unseen_classes = as_int(key, v);
    else if (key == "n_subjects") s.n_subjects = as_int(key, v);
    else if (key == "trials_per_class_per_subject") s.trials_per_class_per_subject = as_int(key, v);
    else if (key == "exemplars_per_class") s.exemplars_per_class = as_int(key, v);
    else if (key == "channels") s.channels = as_int(key, v);
    else if (key == "length") s.length = as_int(key, v);
    else if (key == "sampling_rate_hz") s.sampling_rate_hz = as_real(key, v);
    else if (key == "embed_dim") s.embed_dim = as_int(key, v);
    else if (key == "text_per_class") s.text_per_class = as_int(key, v);
    else if (key == "class_separation") s.class_separation = as_real(key, v);
    else if (key == "subject_perturbation") s.subject_perturbation = as_real(key, v);
    else if (key == "noise_sigma") s.noise_sigma = as_real(key, v);
    else if (key == "text_noise") s.text_noise = as_real(key, v);
    else if (key == "orthogonal_prototypes") {
      expect(v.is_boolean(), key, v, "a boolean");
      s.orthogonal_prototypes = v.get<bool>();
    } else if (key == "seed") {
      expect(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), key, v,
             "a nonnegative integer");
      s.seed = v.get<std::uint64_t>();
    } else {
      throw ConfigError("unknown spec key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

SynthSpec parse_synth_spec(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  json j = path ? read_json_file(*path) : json::object();
  apply_overrides(j, overrides);
  return synth_spec_from_json(j);
}

// --- digests ------------------------------------------------------------------------

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256 initialisation failed");
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  void update_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

bool is_manifest_name(const fs::path& p) {
  const auto name = p.filename().string();
  return name == "run_manifest.json" || name.ends_with(".manifest.json");
}

}  // namespace

std::string digest_path(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("input " + path.string() + " does not exist");
  Sha256 h;
  if (!fs::is_directory(path)) {
    h.update_file(path);
    return h.hex();
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file() && !is_manifest_name(e.path())) files.push_back(fs::relative(e.path(), path));
  std::sort(files.begin(), files.end());
  for (const auto& rel : files) {
    const std::string name = rel.generic_string();
    h.update(name.data(), name.size() + 1);
    h.update_file(path / rel);
  }
  return h.hex();
}

// --- manifest ------------------------------------------------------------------------

void RunManifest::add_input(const std::string& role, const fs::path& path) {
  inputs[role] = {fs::absolute(path).lexically_normal().string(), digest_path(path)};
  // Embedding tables keep their values in a sibling .f32 file.
  if (!fs::is_directory(path) && path.extension() == ".json") {
    fs::path raw = path;
    raw.replace_extension(".f32");
    if (fs::exists(raw)) inputs[role + ".f32"] = {fs::absolute(raw).lexically_normal().string(), digest_path(raw)};
  }
}

void RunManifest::verify_inputs() const {
  for (const auto& [role, in] : inputs) {
    const std::string now = digest_path(in.path);
    if (now != in.sha256)
      throw DataError("input '" + role + "' (" + in.path + ") changed since the manifest was written");
  }
}

const std::string& RunManifest::input_path(const std::string& role) const {
  auto it = inputs.find(role);
  if (it == inputs.end()) throw DataError("manifest has no input '" + role + "'");
  return it->second.path;
}

json RunManifest::to_json() const {
  json in = json::object();
  for (const auto& [role, i] : inputs) in[role] = {{"path", i.path}, {"sha256", i.sha256}};
  return {{"subcommand", subcommand},
          {"config", config},
          {"seed", seed},
          {"inputs", in},
          {"tool_version", tool_version}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [role, i] : j.at("inputs").items())
      m.inputs[role] = {i.at("path").get<std::string>(), i.at("sha256").get<std::string>()};
    m.tool_version = j.at("tool_version").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run manifest: ") + e.what());
  }
}

void RunManifest::write(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

RunManifest RunManifest::load(const fs::path& path) { return from_json(read_json_file(path)); }

fs::path manifest_path_for_dir(const fs::path& dir) { return dir / "run_manifest.json"; }

fs::path manifest_path_for_file(const fs::path& file) {
  fs::path p = file;
  p += ".manifest.json";
  return p;
}

}  // namespace nmcrl
