#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "skillloop/volume.hpp"

using namespace skillloop;
using namespace skillloop::volume;

namespace {

Volume constant_volume(Dims d, float v) { return Volume{"c", d, {}, std::vector<float>(d.voxels(), v)}; }

SceneCase small_case() {
  CorpusConfig cfg;
  cfg.cases = 1;
  return synth_corpus(cfg, 11).front();
}

}  // namespace

TEST_CASE("render_views on a constant volume") {
  const auto views = render_views(constant_volume({4, 4, 4}, 0.5f));
  REQUIRE(views.size() == 6);
  for (const auto& v : views) {
    CHECK(v.pixels.size() == static_cast<std::size_t>(v.rows * v.cols));
    for (float p : v.pixels) CHECK(p == 0.5f);
  }
  CHECK(standard_captions().size() == 6);
  CHECK(views[1].caption == "axial MIP");
}

TEST_CASE("single bright voxel lands at (row=y, col=x) in the axial MIP") {
  auto vol = constant_volume({4, 4, 4}, 0.0f);
  vol.intensities[vol.dims.index(1, 2, 3)] = 1.0f;
  const auto views = render_views(vol);
  const View* axial_mip = nullptr;
  for (const auto& v : views)
    if (v.plane == Plane::axial && v.kind == ViewKind::mip) axial_mip = &v;
  REQUIRE(axial_mip);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(axial_mip->at(r, c) == ((r == 2 && c == 3) ? 1.0f : 0.0f));
}

TEST_CASE("MIP views equal brute-force projections") {
  std::mt19937_64 eng(5);
  std::uniform_int_distribution<int> side(1, 7);
  std::uniform_real_distribution<float> val(0.0f, 1.0f);
  for (int trial = 0; trial < 40; ++trial) {
    const Dims d{side(eng), side(eng), side(eng)};
    Volume v{"r", d, {}, std::vector<float>(d.voxels())};
    for (auto& x : v.intensities) x = val(eng);
    ViewConfig cfg;
    cfg.kinds = {ViewKind::mip};
    const auto views = render_views(v, cfg);
    REQUIRE(views.size() == 3);
    for (const auto& view : views) {
      const auto ref = oracle::mip(v, view.plane);
      REQUIRE(static_cast<std::size_t>(view.rows) == ref.size());
      for (int r = 0; r < view.rows; ++r)
        for (int c = 0; c < view.cols; ++c) CHECK(view.at(r, c) == ref[r][c]);
    }
  }
}

TEST_CASE("render_views is a pure function") {
  const auto sc = small_case();
  const auto a = render_views(sc.volume);
  const auto b = render_views(sc.volume);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].pixels == b[i].pixels);
}

TEST_CASE("dice examples") {
  const Dims d{2, 2, 2};
  auto a = Mask::empty(d), b = Mask::empty(d);
  CHECK(dice(a, b) == 1.0);
  a.set(0, 0, 0);
  a.set(0, 0, 1);
  CHECK(dice(a, a) == 1.0);
  b.set(1, 1, 1);
  CHECK(dice(a, b) == 0.0);

  auto p = Mask::empty(d), g = Mask::empty(d);
  for (int x : {0, 1, 2, 3}) p.voxels[static_cast<std::size_t>(x)] = 1;
  for (int x : {2, 3, 4, 5}) g.voxels[static_cast<std::size_t>(x)] = 1;
  CHECK(dice(p, g) == 0.5);
}

TEST_CASE("dice rejects mismatched dims naming both") {
  const auto a = Mask::empty({2, 2, 2});
  const auto b = Mask::empty({2, 2, 3});
  try {
    (void)dice(a, b);
    FAIL("expected throw");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(a.dims.str()) != std::string::npos);
    CHECK(msg.find(b.dims.str()) != std::string::npos);
  }
}

TEST_CASE("dice is symmetric and matches voxel counting") {
  std::mt19937_64 eng(17);
  std::uniform_int_distribution<int> side(1, 8);
  std::uniform_real_distribution<double> dens(0.0, 1.0);
  for (int i = 0; i < 300; ++i) {
    const Dims d{side(eng), side(eng), side(eng)};
    const auto a = oracle::random_mask(eng, d, dens(eng));
    const auto b = oracle::random_mask(eng, d, dens(eng));
    CHECK(dice(a, b) == oracle::dice(a, b));
    CHECK(dice(a, b) == dice(b, a));
  }
}

TEST_CASE("executor without noise returns ground truth") {
  const auto sc = small_case();
  for (const auto& [id, t] : sc.targets) {
    const auto ex = execute_segmentation(sc, {id, std::nullopt, std::nullopt}, {}, 1);
    CHECK_FALSE(ex.unresolved);
    CHECK(ex.mask == t.mask);
    CHECK(dice(ex.mask, t.mask) == 1.0);
  }
}

TEST_CASE("executor resolves synonyms, laterality and subregions") {
  const auto sc = small_case();
  CHECK(execute_segmentation(sc, {"left lesion", std::nullopt, std::nullopt}, {}, 0).mask == sc.targets.at("lesion_left").mask);
  CHECK(execute_segmentation(sc, {"lesion", Laterality::right, std::nullopt}, {}, 0).mask == sc.targets.at("lesion_right").mask);
  CHECK(execute_segmentation(sc, {"fragment", std::nullopt, std::string("superior")}, {}, 0).mask ==
        sc.targets.at("fragment_superior").mask);

  const auto bad_side = execute_segmentation(sc, {"fragment", Laterality::left, std::nullopt}, {}, 0);
  CHECK(bad_side.unresolved);
  CHECK(bad_side.mask.count() == 0);
  CHECK(bad_side.issues == std::vector<std::string>{"LATERALITY_UNSUPPORTED"});

  const auto bad_sub = execute_segmentation(sc, {"fragment", std::nullopt, std::string("medial")}, {}, 0);
  CHECK(bad_sub.issues == std::vector<std::string>{"UNKNOWN_SUBREGION"});
}

TEST_CASE("unresolvable target yields an empty flagged mask") {
  const auto sc = small_case();
  const auto ex = execute_segmentation(sc, {"nonexistent", std::nullopt, std::nullopt}, {}, 3);
  CHECK(ex.unresolved);
  CHECK(ex.mask.count() == 0);
  CHECK(ex.mask.dims == sc.volume.dims);
}

TEST_CASE("seeded boundary noise matches an independent replay") {
  const auto sc = small_case();
  const auto& gt = sc.targets.at("lesion_left").mask;
  const double g = static_cast<double>(gt.count());
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto ex = execute_segmentation(sc, {"lesion_left", std::nullopt, std::nullopt}, {3}, seed);
    const auto ref = oracle::replay_boundary(gt, 3, seed);
    CHECK(ex.mask == ref.mask);
    const double k = static_cast<double>(ref.flipped);
    const double floor = ref.dilate ? 2.0 * g / (2.0 * g + k) : 2.0 * (g - k) / (2.0 * g - k);
    const double d = dice(ex.mask, gt);
    CHECK(d < 1.0);
    CHECK(d == doctest::Approx(floor).epsilon(1e-12));
    CHECK(d >= 2.0 * (g - 3.0) / (2.0 * g - 3.0) - 1e-12);
  }
}

TEST_CASE("perturb_boundary with zero budget is the identity") {
  const auto sc = small_case();
  const auto& m = sc.targets.at("fragment").mask;
  CHECK(perturb_boundary(m, 0, 9) == m);
}

TEST_CASE("synth_corpus is deterministic per seed") {
  CorpusConfig cfg;
  cfg.cases = 4;
  CHECK(synth_corpus(cfg, 3) == synth_corpus(cfg, 3));
  CHECK_FALSE(synth_corpus(cfg, 3) == synth_corpus(cfg, 4));
}

TEST_CASE("lateralized masks sit on their declared side") {
  CorpusConfig cfg;
  cfg.cases = 20;
  for (const auto& sc : synth_corpus(cfg, 2)) {
    const double mid = (sc.volume.dims.width - 1) / 2.0;
    for (const auto& [id, t] : sc.targets) {
      if (!t.laterality || *t.laterality == Laterality::bilateral) continue;
      double sx = 0.0;
      long n = 0;
      for (int z = 0; z < t.mask.dims.depth; ++z)
        for (int y = 0; y < t.mask.dims.height; ++y)
          for (int x = 0; x < t.mask.dims.width; ++x)
            if (t.mask.at(z, y, x)) {
              sx += x;
              ++n;
            }
      REQUIRE(n > 0);
      const double cx = sx / static_cast<double>(n);
      if (*t.laterality == Laterality::left) CHECK(cx < mid);
      if (*t.laterality == Laterality::right) CHECK(cx > mid);
    }
  }
}

TEST_CASE("subregion masks are subsets of their parents") {
  CorpusConfig cfg;
  cfg.cases = 10;
  for (const auto& sc : synth_corpus(cfg, 8)) {
    for (const auto& [id, t] : sc.targets)
      for (const auto& sub : t.subregion_ids) CHECK(sc.targets.at(sub).mask.is_subset_of(t.mask));
    CHECK(sc.parent_of("fragment_superior") == &sc.targets.at("fragment"));
  }
}

TEST_CASE("corpus rejects dims too small for the requested structures") {
  CorpusConfig cfg;
  cfg.dims = {3, 4, 4};
  CHECK_THROWS_AS(synth_corpus(cfg, 1), ValidationError);
  cfg = {};
  cfg.cases = 0;
  CHECK_THROWS_AS(synth_corpus(cfg, 1), ValidationError);
}

TEST_CASE("case files round-trip") {
  const auto sc = small_case();
  const auto dir = std::filesystem::temp_directory_path() / "skillloop_case_rt";
  std::filesystem::remove_all(dir);
  save_case(sc, dir);
  CHECK(std::filesystem::file_size(dir / "volume.f32") == sc.volume.dims.voxels() * 4);
  CHECK(load_case(dir) == sc);
  std::filesystem::remove_all(dir);
}

TEST_CASE("PGM encoding has a P5 header and one byte per pixel") {
  const auto views = render_views(constant_volume({2, 3, 5}, 1.0f));
  const auto pgm = encode_pgm(views.front());
  const std::string header = "P5\n5 3\n255\n";
  REQUIRE(pgm.size() == header.size() + 15);
  CHECK(pgm.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(pgm.back()) == 255);
}

TEST_CASE("volume validation") {
  Volume v = constant_volume({2, 2, 2}, 0.5f);
  CHECK_NOTHROW(v.validate());
  v.intensities[0] = 1.5f;
  CHECK_THROWS_AS(v.validate(), ValidationError);
  v.intensities.pop_back();
  CHECK_THROWS_AS(v.validate(), ValidationError);
}
