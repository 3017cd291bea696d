#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lmliqa/checkpoint.hpp"
#include "lmliqa/config.hpp"
#include "lmliqa/errors.hpp"

using namespace lmliqa;
using nlohmann::json;
namespace fs = std::filesystem;

TEST_CASE("run config round trips through json") {
  RunConfig c;
  c.loss.tau = 0.07;
  c.ablation.positive_source = PositiveSource::random;
  c.optimizer.kind = OptimizerKind::adam;
  c.seeds = {4, 9};
  c.model.mlp_head_dims = {16, 4, 1};
  c.model.init = InitScheme::trunc_normal;
  c.model.pixel_std = 0.5;
  const json j = c;
  const RunConfig back = run_config_from_json(j);
  CHECK(json(back) == j);
  CHECK(back.model == c.model);
  CHECK(back.seeds == c.seeds);
}

TEST_CASE("partial configs overlay defaults and reject unknown keys") {
  const auto c = run_config_from_json(json::parse(R"({"loss": {"alpha": 0.25}, "batch_size": 4})"));
  CHECK(c.loss.alpha == 0.25);
  CHECK(c.loss.tau == RunConfig{}.loss.tau);
  CHECK(c.batch_size == 4);
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"loss": {"alhpa": 0.25}})")), ValidationError);
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"bogus": 1})")), ValidationError);
}

TEST_CASE("overrides") {
  json j = RunConfig{};
  apply_override(j, "loss.tau", "0.2");
  apply_override(j, "ablation.positive_source", "random");
  apply_override(j, "seeds", "[7]");
  const auto c = run_config_from_json(j);
  CHECK(c.loss.tau == 0.2);
  CHECK(c.ablation.positive_source == PositiveSource::random);
  CHECK(c.seeds == std::vector<std::uint64_t>{7});
  CHECK_THROWS_AS(apply_override(j, "loss.nope", "1"), ValidationError);
  apply_override(j, "model.init", "xavier");
  CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
}

TEST_CASE("config validation") {
  RunConfig c;
  c.loss.alpha = 1.2;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = RunConfig{};
  c.sampling.crop_size = 48;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = RunConfig{};
  c.loss.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = RunConfig{};
  c.ema.beta = -0.1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = RunConfig{};
  c.model.pixel_std = 0.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK_NOTHROW(RunConfig{}.validate());
}

TEST_CASE("checkpoint round trip and corruption") {
  ModelConfig mc;
  mc.embed_dim = 16;
  mc.num_layers = 2;
  mc.num_heads = 2;
  mc.seed = 12;
  auto state = init_state(mc);
  state.version = 41;
  const auto dir = fs::temp_directory_path() / "lmliqa_test_ckpt";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(path, state);
  const auto back = load_checkpoint(path);
  CHECK(back.values == state.values);
  CHECK(back.entries == state.entries);
  CHECK(back.config == state.config);
  CHECK(back.version == 41);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "trunc.ckpt").string()), ValidationError);
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream out(dir / "magic.ckpt", std::ios::binary);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "magic.ckpt").string()), ValidationError);
  CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), ValidationError);

  auto nan_state = state;
  nan_state.values[3] = NAN;
  save_checkpoint((dir / "nan.ckpt").string(), nan_state);
  CHECK_THROWS(load_checkpoint((dir / "nan.ckpt").string()));
}
