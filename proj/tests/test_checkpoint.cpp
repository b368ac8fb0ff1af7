#include <gtest/gtest.h>

#include "droppatch/checkpoint.hpp"
#include "droppatch/error.hpp"
#include "test_util.hpp"

using namespace droppatch;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny(std::size_t layers = 2) {
  model::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.patch_len = 4;
  c.max_patches = 6;
  return c;
}

bool same_params(const std::vector<model::NamedTensor>& a, const std::vector<model::NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) return false;
    if (!std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin())) return false;
  }
  return true;
}

}  // namespace

TEST(Checkpoint, EncoderRoundTripIsExact) {
  auto dir = testutil::temp_dir("ckpt_rt");
  model::PatchTransformer m(tiny(), 11);
  ckpt::save_encoder(m, dir / "a", {{"note", 1}});
  auto back = ckpt::load_encoder(dir / "a");
  EXPECT_TRUE(same_params(m.parameters(), back.parameters()));
  EXPECT_EQ(back.config().n_layers, 2u);
  ckpt::save_encoder(back, dir / "b", {{"note", 1}});
  for (auto suffix : {".bin", ".manifest.json", ".config.json"}) {
    EXPECT_EQ(testutil::slurp(dir / (std::string("a") + suffix)), testutil::slurp(dir / (std::string("b") + suffix)))
        << suffix;
  }
  EXPECT_EQ(ckpt::read_config(dir / "a")["run"]["note"], 1);
}

TEST(Checkpoint, ForecasterRoundTrip) {
  auto dir = testutil::temp_dir("ckpt_fc");
  model::PatchTransformer enc(tiny(), 3);
  model::ForecastModel fm(enc, 6, 10, 5);
  ckpt::save_forecaster(fm, dir / "f");
  auto back = ckpt::load_forecaster(dir / "f");
  EXPECT_EQ(back.horizon(), 10u);
  EXPECT_EQ(back.n_patches(), 6u);
  EXPECT_TRUE(same_params(fm.parameters(), back.parameters()));
  auto enc_back = ckpt::load_encoder(dir / "f");
  EXPECT_TRUE(same_params(enc.parameters(), enc_back.parameters()));
  EXPECT_THROW(ckpt::load_forecaster(dir / "missing"), DataError);
}

TEST(Checkpoint, TruncatedPayloadIsRejected) {
  auto dir = testutil::temp_dir("ckpt_trunc");
  model::PatchTransformer m(tiny(), 1);
  ckpt::save_encoder(m, dir / "a");
  const auto bin = ckpt::payload_path(dir / "a");
  fs::resize_file(bin, fs::file_size(bin) - 8);
  EXPECT_THROW(ckpt::load_encoder(dir / "a"), DataError);
}

TEST(Checkpoint, ReorderedManifestIsRejected) {
  auto dir = testutil::temp_dir("ckpt_order");
  model::PatchTransformer m(tiny(), 1);
  ckpt::save_encoder(m, dir / "a");
  const auto mp = ckpt::manifest_path(dir / "a");
  auto j = ckpt::Json::parse(testutil::slurp(mp));
  std::swap(j["entries"][0], j["entries"][1]);
  ckpt::write_text(mp, j.dump());
  try {
    ckpt::load_encoder(dir / "a");
    FAIL() << "expected a mismatch";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("entry 0"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ArchitectureMismatchNamesEntry) {
  auto dir = testutil::temp_dir("ckpt_arch");
  model::PatchTransformer m(tiny(2), 1);
  ckpt::save_encoder(m, dir / "a");
  model::PatchTransformer deeper(tiny(3), 1);
  try {
    ckpt::load_parameters(deeper.parameters(), dir / "a");
    FAIL() << "expected a mismatch";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.2."), std::string::npos) << e.what();
  }
  auto wide = tiny();
  wide.d_model = 16;
  model::PatchTransformer w(wide, 1);
  try {
    ckpt::load_parameters(w.parameters(), dir / "a");
    FAIL() << "expected a mismatch";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("patch_embed"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptFilesAreDataErrors) {
  auto dir = testutil::temp_dir("ckpt_bad");
  model::PatchTransformer m(tiny(), 1);
  ckpt::save_encoder(m, dir / "a");
  ckpt::write_text(ckpt::manifest_path(dir / "a"), "{not json");
  EXPECT_THROW(ckpt::load_encoder(dir / "a"), DataError);
  ckpt::write_text(ckpt::manifest_path(dir / "a"), R"({"format":"other","entries":[]})");
  EXPECT_THROW(ckpt::load_encoder(dir / "a"), DataError);
}

TEST(ConfigJson, RoundTripsAndRejectsUnknownKeys) {
  auto c = tiny();
  c.pe_kind = model::PeKind::kSinusoidal;
  auto back = ckpt::model_config_from_json(ckpt::to_json(c));
  EXPECT_EQ(back, c);

  pretrain::PretrainConfig p;
  p.drop_ratio = 0.3;
  p.epochs = 7;
  auto pb = ckpt::pretrain_config_from_json(ckpt::to_json(p));
  EXPECT_EQ(pb.drop_ratio, 0.3);
  EXPECT_EQ(pb.epochs, 7u);

  finetune::FinetuneConfig f;
  f.horizon = 192;
  EXPECT_EQ(ckpt::finetune_config_from_json(ckpt::to_json(f)).horizon, 192u);

  auto j = ckpt::to_json(p);
  j["drop_rate"] = 0.5;
  try {
    ckpt::pretrain_config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("drop_rate"), std::string::npos);
  }
  // absent keys keep defaults
  auto partial = ckpt::pretrain_config_from_json(ckpt::Json{{"epochs", 2}});
  EXPECT_EQ(partial.drop_ratio, pretrain::PretrainConfig{}.drop_ratio);
  EXPECT_THROW(ckpt::pretrain_config_from_json(ckpt::Json{{"epochs", "two"}}), ConfigError);
}
