#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "lmliqa/data.hpp"
#include "lmliqa/errors.hpp"
#include "test_util.hpp"

using namespace lmliqa;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lmliqa_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("gaussian kernel") {
  for (double s : {0.3, 0.6, 1.0, 2.2, 3.2}) {
    const auto k = gaussian_kernel(s);
    CHECK(k.size() == 2 * static_cast<std::size_t>(std::ceil(3 * s)) + 1);
    CHECK(std::fabs(std::accumulate(k.begin(), k.end(), 0.0) - 1.0) <= 1e-12);
  }
  CHECK(gaussian_kernel(0.0) == std::vector<double>{1.0});
  CHECK_THROWS_AS(gaussian_kernel(-1.0), ValidationError);
}

TEST_CASE("distortion identities") {
  const auto img = testutil::random_image(20, 16, 3, 4);
  std::mt19937_64 rng(1);
  CHECK(apply_distortion(img, {DistortionKind::gaussian_blur, 1, 0.0}, rng) == img);
  CHECK(apply_distortion(img, {DistortionKind::gaussian_noise, 1, 0.0}, rng) == img);

  Image flat(17, 13, 3);
  for (auto& p : flat.pixels) p = 0.3712;
  CHECK(apply_distortion(flat, {DistortionKind::gaussian_blur, 5, 3.2}, rng) == flat);

  std::mt19937_64 a(5), b(5);
  const DistortionSpec noise{DistortionKind::gaussian_noise, 3, 0.07};
  const auto na = apply_distortion(img, noise, a), nb = apply_distortion(img, noise, b);
  CHECK(na == nb);
  CHECK(na != img);
  for (double v : na.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("blur reduces variation") {
  const auto img = testutil::random_image(32, 32, 1, 2);
  std::mt19937_64 rng(0);
  auto tv = [](const Image& im) {
    double s = 0.0;
    for (int y = 0; y < im.height; ++y) {
      for (int x = 1; x < im.width; ++x) s += std::fabs(im.at(y, x, 0) - im.at(y, x - 1, 0));
    }
    return s;
  };
  double prev = tv(img);
  const DistortionLevels levels;
  for (int l = 1; l <= levels.level_count(); ++l) {
    const double cur = tv(apply_distortion(img, levels.spec(DistortionKind::gaussian_blur, l), rng));
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("levels and mos") {
  const DistortionLevels levels;
  for (auto kind : {DistortionKind::gaussian_blur, DistortionKind::gaussian_noise}) {
    for (int l = 1; l < levels.level_count(); ++l) {
      CHECK(levels.spec(kind, l).sigma < levels.spec(kind, l + 1).sigma);
    }
  }
  CHECK(synth_mos(0, 5) == 100.0);
  CHECK(std::fabs(synth_mos(5, 5) - 100.0 / 6.0) <= 1e-12);
  for (int k = 0; k < 5; ++k) CHECK(synth_mos(k, 5) > synth_mos(k + 1, 5));
  CHECK(distortion_kind_from_string(to_string(DistortionKind::gaussian_noise)) ==
        DistortionKind::gaussian_noise);
}

TEST_CASE("pristine generation") {
  CHECK(generate_pristine(0, 32, 1).empty());
  const auto a = generate_pristine(6, 32, 3), b = generate_pristine(6, 32, 3);
  CHECK(a == b);
  for (const auto& img : a) {
    for (double v : img.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(generate_pristine(6, 32, 4) != a);
}

TEST_CASE("image files round trip") {
  const auto dir = temp_dir("img");
  const auto img = testutil::random_image(9, 7, 3, 1);
  write_image((dir / "a.f64").string(), img);
  CHECK(read_image((dir / "a.f64").string()) == img);

  write_image((dir / "a.ppm").string(), img);
  const auto q = read_image((dir / "a.ppm").string());
  CHECK(q.width == 9);
  CHECK(q.channels == 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(std::fabs(q.pixels[i] - img.pixels[i]) <= 0.5 / 255 + 1e-12);

  const auto g = testutil::random_image(5, 4, 1, 2);
  write_image((dir / "g.pgm").string(), g);
  CHECK(read_image((dir / "g.pgm").string()).channels == 1);
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
  CHECK_THROWS_AS(read_image((dir / "bad.pgm").string()), ValidationError);
  CHECK_THROWS_AS(read_image((dir / "missing.ppm").string()), ValidationError);
}

TEST_CASE("manifest parsing and errors") {
  const auto dir = temp_dir("manifest");
  std::ofstream(dir / "m.csv") << "path,mos\na.ppm,50\nb.ppm,60.5\n";
  const auto m = load_manifest((dir / "m.csv").string());
  REQUIRE(m.entries.size() == 2);
  CHECK(m.entries[1].mos == 60.5);
  CHECK(fs::path(m.entries[0].path).is_absolute());
  CHECK_FALSE(m.entries[0].kind.has_value());

  std::ofstream(dir / "bad.csv") << "path,mos\na.ppm,50\nb.ppm,xx\n";
  try {
    load_manifest((dir / "bad.csv").string());
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::ofstream(dir / "nohdr.csv") << "file,score\na,1\n";
  CHECK_THROWS_AS(load_manifest((dir / "nohdr.csv").string()), ValidationError);
  CHECK_THROWS_AS(load_manifest((dir / "nope.csv").string()), ValidationError);
}

TEST_CASE("split sizes and content grouping") {
  DatasetManifest m;
  for (int i = 0; i < 10; ++i) m.entries.push_back({"x" + std::to_string(i), double(i), {}, {}, {}});
  const auto s = split(m, 0.8, 3);
  CHECK(s.train.size() == 8);
  CHECK(s.test.size() == 2);
  const auto again = split(m, 0.8, 3);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 10);

  SyntheticConfig sc;
  sc.pristine_count = 20;
  sc.image_size = 32;
  const auto ds = build_synthetic_dataset(sc);
  CHECK(ds.images.size() == 200);
  const auto sp = split(ds.manifest, 0.8, 11);
  std::set<int> train_src, test_src;
  for (auto i : sp.train) train_src.insert(*ds.manifest.entries[i].source);
  for (auto i : sp.test) test_src.insert(*ds.manifest.entries[i].source);
  for (int src : test_src) CHECK(train_src.count(src) == 0);
  CHECK(train_src.size() == 16);
  CHECK(sp.train.size() + sp.test.size() == 200);
}

TEST_CASE("default synthetic dataset and write/load round trip") {
  const auto ds = build_synthetic_dataset({});
  CHECK(ds.images.size() == 600);
  CHECK(ds.images[0].width == 64);
  int blur = 0;
  for (const auto& e : ds.manifest.entries) {
    blur += *e.kind == DistortionKind::gaussian_blur;
    CHECK(e.mos == synth_mos(*e.level, 5));
  }
  CHECK(blur == 300);

  SyntheticConfig sc;
  sc.pristine_count = 2;
  sc.image_size = 16;
  const auto small = build_synthetic_dataset(sc);
  const auto dir = temp_dir("dataset");
  write_dataset(dir.string(), small, ".f64");
  const auto back = load_dataset((dir / "manifest.csv").string());
  CHECK(back.images == small.images);
  for (std::size_t i = 0; i < small.images.size(); ++i) {
    CHECK(back.manifest.entries[i].mos == small.manifest.entries[i].mos);
    CHECK(back.manifest.entries[i].source == small.manifest.entries[i].source);
  }
}
