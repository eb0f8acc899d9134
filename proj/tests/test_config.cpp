#include <gtest/gtest.h>

#include <fstream>

#include "nmcrl/config.hpp"
#include "nmcrl/errors.hpp"
#include "test_util.hpp"

using namespace nmcrl;
using namespace nmcrl::testing_util;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::trunc) << text;
  return p;
}

}  // namespace

TEST(ParseConfig, EmptyFileGivesDefaults) {
  auto dir = temp_dir("cfg_empty");
  for (const std::string text : {"", "  \n", "{}"}) {
    TrainConfig c = parse_config(write_file(dir / "c.json", text));
    EXPECT_EQ(c.learning_rate, 3e-4);
    EXPECT_EQ(c.batch_size, 128u);
    EXPECT_TRUE(c == TrainConfig{});
  }
  EXPECT_TRUE(parse_config(std::nullopt) == TrainConfig{});
}

TEST(ParseConfig, ConstraintViolations) {
  EXPECT_THROW(parse_config(std::nullopt, {"eta=1.5"}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"temperature=0"}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"noise_sigma=-0.1"}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"eval_n_way=1"}), ConfigError);
}

TEST(ParseConfig, UnknownKeysAndTypes) {
  EXPECT_THROW(parse_config(std::nullopt, {"learning_rat=0.1"}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"ablation.spectral=false"}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"batch_size=\"big\""}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"batch_size=1.5"}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"encoder=\"cnn\""}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {"novalue"}), ConfigError);
  auto dir = temp_dir("cfg_bad");
  EXPECT_THROW(parse_config(write_file(dir / "c.json", "{ not json")), ConfigError);
  EXPECT_THROW(parse_config(write_file(dir / "c.json", "[1, 2]")), ConfigError);
  EXPECT_THROW(parse_config(dir / "missing.json"), ConfigError);
}

TEST(ParseConfig, OverridesApplyLast) {
  auto dir = temp_dir("cfg_over");
  auto path = write_file(dir / "c.json", R"({"eta": 0.2, "epochs": 3, "ablation": {"completion": false}})");
  TrainConfig c = parse_config(path, {"eta=0.9", "ablation.alignment=false", "encoder=mlp", "eval_k=[1,3]"});
  EXPECT_EQ(c.eta, 0.9);
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_FALSE(c.ablation.completion);
  EXPECT_FALSE(c.ablation.alignment);
  EXPECT_TRUE(c.ablation.subject_specific);
  EXPECT_EQ(c.encoder, EncoderKind::mlp);
  EXPECT_EQ(c.eval_k, (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(parse_config(path, {"eta=0.9"}) == parse_config(path, {"eta=0.9"}));
}

TEST(ParseConfig, RoundTrip) {
  TrainConfig c = parse_config(std::nullopt, {"seed=17", "symmetric_loss=true", "noise_sigma=0.1", "heads=2",
                                              "ablation.consistency=false", "band_edges=[{\"name\":\"x\",\"low_hz\":1,\"high_hz\":9}]"});
  const json j = to_json(c);
  TrainConfig back = train_config_from_json(j);
  EXPECT_TRUE(back == c);
  EXPECT_EQ(to_json(back), j);
  auto dir = temp_dir("cfg_rt");
  write_file(dir / "c.json", j.dump(2));
  EXPECT_TRUE(parse_config(dir / "c.json") == c);
}

TEST(SynthSpec, StrictParsingAndRoundTrip) {
  SynthSpec s = parse_synth_spec(std::nullopt, {"n_classes=20", "n_unseen_classes=5", "seed=3"});
  EXPECT_EQ(s.n_classes, 20);
  SynthSpec back = synth_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_THROW(parse_synth_spec(std::nullopt, {"n_class=20"}), ConfigError);
  EXPECT_THROW(parse_synth_spec(std::nullopt, {"seed=-1"}), ConfigError);
  EXPECT_THROW(parse_synth_spec(std::nullopt, {"orthogonal_prototypes=1"}), ConfigError);
  EXPECT_THROW(parse_synth_spec(std::nullopt, {"n_unseen_classes=200"}), ConfigError);
}

TEST(Digests, FilesAndDirectories) {
  auto dir = temp_dir("digest");
  write_file(dir / "a.txt", "abc");
  // SHA-256("abc")
  EXPECT_EQ(digest_path(dir / "a.txt"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  fs::create_directories(dir / "d");
  write_file(dir / "d" / "x", "1");
  write_file(dir / "d" / "y", "2");
  const auto before = digest_path(dir / "d");
  RunManifest{}.write(manifest_path_for_dir(dir / "d"));
  write_file(dir / "d" / "out.json.manifest.json", "{}");
  EXPECT_EQ(digest_path(dir / "d"), before);
  write_file(dir / "d" / "y", "3");
  EXPECT_NE(digest_path(dir / "d"), before);
  EXPECT_THROW(digest_path(dir / "nope"), DataError);
}

TEST(RunManifest, RoundTripAndVerification) {
  auto dir = temp_dir("manifest");
  auto bundle = generate_synthetic_dataset(small_spec());
  save_dataset(bundle.dataset, dir / "data");
  save_embedding_table(bundle.image, dir / "image.json");
  RunManifest m;
  m.subcommand = "train";
  m.config = to_json(TrainConfig{});
  m.seed = 9;
  m.add_input("data", dir / "data");
  m.add_input("image_emb", dir / "image.json");
  EXPECT_TRUE(m.inputs.count("image_emb.f32"));
  EXPECT_EQ(m.tool_version, std::string(kToolVersion));
  m.write(manifest_path_for_dir(dir / "run"));
  RunManifest back = RunManifest::load(dir / "run" / "run_manifest.json");
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_NO_THROW(back.verify_inputs());
  EXPECT_EQ(back.input_path("data"), fs::absolute(dir / "data").lexically_normal().string());
  EXPECT_THROW(back.input_path("text_emb"), DataError);

  std::ofstream(dir / "image.f32", std::ios::binary | std::ios::app) << 'x';
  EXPECT_THROW(back.verify_inputs(), DataError);
  EXPECT_EQ(manifest_path_for_file(dir / "r.json"), dir / "r.json.manifest.json");
  EXPECT_THROW(RunManifest::from_json(json{{"subcommand", "x"}}), ConfigError);
}
