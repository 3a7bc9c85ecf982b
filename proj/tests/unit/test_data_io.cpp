#include "doctest.h"

#include "cmdm/data/toy_motion.hpp"
#include "cmdm/errors.hpp"
#include "cmdm/io/config.hpp"
#include "cmdm/io/tensor_io.hpp"
#include "cmdm/pipeline/train.hpp"
#include "test_util.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace cmdm;
using cmdm::nn::Mat;
using cmdm::test::random_mat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cmdm_unit";
  fs::create_directories(dir);
  return dir / name;
}

std::string error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    io::deserialize(bytes);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("generate_trajectory: circle radius, speed ratio, determinism") {
  const auto slow = data::ToyCaption{data::Shape::circle, data::Speed::slow};
  const auto fast = data::ToyCaption{data::Shape::circle, data::Speed::fast};
  const auto x = data::generate_trajectory(slow, 64, 20, 0.0, 3);
  Eigen::RowVector2d center = Eigen::RowVector2d::Zero();
  // Circumcenter of three samples.
  const auto p = [&](int t) { return Eigen::Vector2d(x.frames(t, 0), x.frames(t, 1)); };
  const Eigen::Vector2d a = p(0), b = p(20), c = p(40);
  const double d = 2 * (a.x() * (b.y() - c.y()) + b.x() * (c.y() - a.y()) + c.x() * (a.y() - b.y()));
  center << (a.squaredNorm() * (b.y() - c.y()) + b.squaredNorm() * (c.y() - a.y()) + c.squaredNorm() * (a.y() - b.y())) / d,
      (a.squaredNorm() * (c.x() - b.x()) + b.squaredNorm() * (a.x() - c.x()) + c.squaredNorm() * (b.x() - a.x())) / d;
  const double r0 = (x.frames.row(0).head<2>() - center).norm();
  for (int t = 0; t < 64; ++t) CHECK(std::abs((x.frames.row(t).head<2>() - center).norm() - r0) <= 1e-6);

  const auto speed = [](const MotionSequence& m) {
    double s = 0;
    for (int t = 1; t < m.length(); ++t) s += (m.frames.row(t).head<2>() - m.frames.row(t - 1).head<2>()).norm();
    return s;
  };
  const auto y = data::generate_trajectory(fast, 64, 20, 0.0, 3);
  CHECK(std::abs(speed(y) / speed(x) - data::kFastSpeed / data::kSlowSpeed) <= 0.05 * data::kFastSpeed / data::kSlowSpeed);
  CHECK(data::generate_trajectory(slow, 64, 20, 0.02, 9).frames == data::generate_trajectory(slow, 64, 20, 0.02, 9).frames);
}

TEST_CASE("caption_oracle: templates, noisy calibration, degenerate motion") {
  for (const auto& cap : data::all_captions()) {
    const auto pred = data::caption_oracle(data::generate_trajectory(cap, 64, 20, 0.0, 1));
    REQUIRE(pred);
    CHECK(*pred == cap);
  }
  int correct = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto cap = data::ToyCaption::from_index(i % 8);
    const auto pred = data::caption_oracle(data::generate_trajectory(cap, 64, 20, 0.05, 1000 + static_cast<std::uint64_t>(i)));
    correct += pred && *pred == cap;
  }
  CHECK(correct >= 990);
  CHECK_FALSE(data::caption_oracle({Mat::Zero(64, 4), 20}).has_value());
}

TEST_CASE("captions: token round trip and parsing") {
  for (int i = 0; i < data::kNumCaptions; ++i) {
    const auto c = data::ToyCaption::from_index(i);
    CHECK(c.index() == i);
    const auto t = c.tokens();
    CHECK(data::ToyCaption::from_tokens(t) == c);
    CHECK(data::ToyCaption::parse(c.name()) == c);
  }
  const int bad[] = {4, 0};
  CHECK_THROWS_AS(data::ToyCaption::from_tokens(bad), InputError);
  CHECK_FALSE(data::ToyCaption::parse("triangle fast").has_value());
}

TEST_CASE("build_dataset is reproducible") {
  data::DatasetSpec spec;
  spec.samples_per_caption = 2;
  const auto a = data::build_dataset(spec), b = data::build_dataset(spec);
  REQUIRE(a.size() == 16);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].caption == b[i].caption);
    CHECK(a[i].motion.frames == b[i].motion.frames);
  }
}

TEST_CASE("tensor container: round trips are bit-exact") {
  CHECK(io::deserialize(io::serialize({})).empty());

  Mat m(2, 3);
  m << 1.5, -0.0, 3.25, 1e-300, -7, std::numeric_limits<double>::denorm_min();
  const io::TensorList entries{
      {"f32", io::Tensor::from_f32(random_mat(1, 2, 3))},
      {"f64", io::Tensor::from_mat(m)},
      {"i64", io::Tensor::from_i64({-1, 0, 1LL << 62}, {3})},
      {"scalar", io::Tensor::scalar_f64(std::nan(""))},
  };
  const auto bytes = io::serialize(entries);
  const auto back = io::deserialize(bytes);
  CHECK(back == entries);
  CHECK(io::serialize(back) == bytes);
  CHECK(back[1].tensor.to_mat() == m);
  CHECK(std::signbit(back[1].tensor.to_mat()(0, 1)));

  const fs::path path = scratch("roundtrip.cmdt");
  io::write_tensors(path, entries);
  CHECK(io::read_tensors(path) == entries);

  nn::ParamTree tree;
  tree.add("a.w", random_mat(2, 3, 4));
  tree.add("b", random_mat(3, 1, 1));
  const auto restored = io::to_param_tree(io::to_tensors(tree, "p."), "p.");
  CHECK(restored.at("a.w") == tree.at("a.w"));
  CHECK(restored.size() == 2);
}

TEST_CASE("tensor container: header layout") {
  const auto bytes = io::serialize({{"x", io::Tensor::from_f32(Mat::Ones(2, 3))}});
  CHECK(std::memcmp(bytes.data(), "CMDT", 4) == 0);
  CHECK(bytes[4] == 1);  // version u16 LE
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 1);  // count u32 LE
  CHECK(bytes[10] == 1);  // name length
  CHECK(bytes[12] == 'x');
  CHECK(bytes[13] == 0);  // f32
  CHECK(bytes[14] == 2);  // rank
  CHECK(bytes.size() == 15 + 16 + 6 * 4);
}

TEST_CASE("tensor container: corruption is reported with offsets") {
  const auto good = io::serialize({{"w", io::Tensor::from_mat(Mat::Ones(2, 2))}});

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(error_of(bad_magic).find("bad magic") != std::string::npos);
  CHECK(error_of(bad_magic).find("offset 0") != std::string::npos);

  auto bad_version = good;
  bad_version[4] = 9;
  CHECK(error_of(bad_version).find("unsupported version 9") != std::string::npos);
  CHECK(error_of(bad_version).find("offset 4") != std::string::npos);

  auto truncated = good;
  truncated.resize(truncated.size() - 5);
  CHECK(error_of(truncated).find("expected 32 bytes, got 27") != std::string::npos);

  auto bad_dtype = good;
  bad_dtype[13] = 7;
  CHECK(error_of(bad_dtype).find("unknown dtype tag 7") != std::string::npos);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(error_of(trailing).find("trailing bytes") != std::string::npos);

  CHECK(error_of({'C', 'M'}).find("truncated magic") != std::string::npos);
  CHECK_THROWS_AS(io::read_tensors(scratch("missing.cmdt")), InputError);
}

TEST_CASE("config: defaults round trip and saved copy reloads identically") {
  const io::RunConfig def;
  CHECK(io::from_json(io::to_json(def)) == def);
  CHECK(io::from_json(nlohmann::json::object()) == def);

  io::RunConfig c;
  c.vae.beta = 0.123456789012345678;
  c.dit.layers = 3;
  c.sampler.mode = "ar";
  c.seed = 99;
  const fs::path path = scratch("config.json");
  io::save_config(path, c);
  const auto back = io::load_config(path);
  CHECK(back == c);
  CHECK(back.vae.beta == c.vae.beta);
  io::save_config(path, back);
  CHECK(io::load_config(path) == c);
}

TEST_CASE("config: unknown keys, wrong types and bad ranges name the key") {
  const auto msg = [](const nlohmann::json& j) {
    try {
      io::from_json(j);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(msg({{"vae", {{"betta", 1}}}}).find("vae.betta") != std::string::npos);
  CHECK(msg({{"optimizer", nlohmann::json::object()}}).find("optimizer") != std::string::npos);
  CHECK(msg({{"dit", {{"layers", "four"}}}}).find("dit.layers") != std::string::npos);
  CHECK(msg({{"sampler", {{"L", 80}}}}).find("sampler.L") != std::string::npos);
  CHECK(msg({{"data", {{"frames", 62}}}}).find("data.frames") != std::string::npos);

  nlohmann::json doc = nlohmann::json::object();
  io::apply_override(doc, "sampler.mode=ar");
  io::apply_override(doc, "train.vae_lr=0.002");
  const auto cfg = io::from_json(doc);
  CHECK(cfg.sampler.mode == "ar");
  CHECK(cfg.train.vae_lr == 0.002);
  CHECK_THROWS_AS(io::apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(io::load_config(scratch("absent.json")), ConfigError);
}

TEST_CASE("config: derived module configs and hashes") {
  io::RunConfig c;
  CHECK(c.dit_config().latent_dim == c.vae.latent_dim);
  CHECK(c.inference_schedule().K == c.sampler.K);
  CHECK(c.train_schedule().K == c.diffusion.K);
  io::RunConfig d = c;
  d.sampler.L = 5;
  CHECK(io::dit_hash(c) == io::dit_hash(d));
  d.dit.hidden = 64;
  CHECK(io::dit_hash(c) != io::dit_hash(d));
  CHECK(io::vae_hash(c) == io::vae_hash(d));

  setenv("CMDM_CONFIG_DIR", "/tmp/somewhere", 1);
  CHECK(io::default_config_dir() == fs::path("/tmp/somewhere"));
  unsetenv("CMDM_CONFIG_DIR");
  CHECK(io::default_config_dir() == fs::path("configs"));
}

TEST_CASE("pipeline: checkpoints and datasets round trip, mismatches are rejected") {
  io::RunConfig cfg;
  cfg.data.samples_per_caption = 1;
  cfg.data.frames = 16;
  cfg.vae.channels = 8;
  cfg.vae.latent_dim = 4;
  cfg.dit.layers = 1;
  cfg.dit.hidden = 16;
  cfg.dit.heads = 2;
  cfg.train.vae_steps = 3;
  cfg.train.vae_batch = 2;
  cfg.train.dit_steps = 3;
  cfg.train.dit_batch = 2;
  const auto samples = data::build_dataset(cfg.dataset_spec());

  const fs::path ds = scratch("ds.cmdt");
  pipeline::save_dataset(ds, samples, cfg.dataset_spec());
  const auto loaded = pipeline::load_dataset(ds, cfg.data.fps);
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].caption == samples[i].caption);
    CHECK(loaded[i].motion.frames == samples[i].motion.frames);
  }
  CHECK(fs::exists(scratch("ds.json")));

  auto vae = pipeline::init_vae_model(cfg);
  pipeline::train_vae(vae, cfg, samples);
  auto again = pipeline::init_vae_model(cfg);
  pipeline::train_vae(again, cfg, samples);
  CHECK(again.params.at("enc.head.w") == vae.params.at("enc.head.w"));

  auto dit = pipeline::init_dit_model(cfg, vae);
  pipeline::train_dit(dit, cfg, vae, samples);
  const fs::path vp = scratch("vae.cmdt"), dp = scratch("dit.cmdt");
  pipeline::save_vae(vp, vae, cfg);
  pipeline::save_dit(dp, dit, cfg);
  const auto v2 = pipeline::load_vae(vp, cfg);
  const auto d2 = pipeline::load_dit(dp, cfg);
  CHECK(v2.params.at("dec.out.w") == vae.params.at("dec.out.w"));
  CHECK(d2.norm.mean == dit.norm.mean);
  CHECK(d2.norm.std == dit.norm.std);
  CHECK(d2.params.at("dit.out.w") == dit.params.at("dit.out.w"));

  io::RunConfig other = cfg;
  other.vae.latent_dim = 5;
  CHECK_THROWS_AS(pipeline::load_vae(vp, other), ConfigError);
  CHECK_THROWS_AS(pipeline::load_dit(dp, other), ConfigError);
  CHECK_THROWS_AS(pipeline::load_vae(scratch("nothing.cmdt"), cfg), InputError);
}
