#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numeric>

#include "cssccnn/synth.hpp"
#include "oracles.hpp"

using namespace cssccnn;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cssccnn_synth_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) { return io::read_file(p); }

}  // namespace

TEST(SceneSpec, BenchmarkGeometry) {
  const auto s = benchmark_spec();
  EXPECT_EQ(s.image_size(), 192u);
  EXPECT_EQ(s.cells_per_image(), 36u);
  EXPECT_NEAR(s.count_prior.c_max_cell, 1200.0 / 36.0, 1e-12);
  EXPECT_NO_THROW(s.validate());
}

TEST(SceneSpec, RejectsBadGeometry) {
  auto s = benchmark_spec();
  s.density_stride = 5;
  EXPECT_THROW(SceneGenerator{s}, InvalidArgument);
  s = benchmark_spec();
  s.clutter_level = 1.5;
  EXPECT_THROW(SceneGenerator{s}, InvalidArgument);
  s = benchmark_spec();
  s.head_radius_max = 30.0;
  EXPECT_THROW(SceneGenerator{s}, GenerationFailure);
  s = benchmark_spec();
  s.crop_size = 12;
  s.grid_m = s.grid_n = 3;
  s.head_radius_min = s.head_radius_max = 2.5;
  EXPECT_THROW(SceneGenerator{s}, GenerationFailure);
}

TEST(GenerateScene, DensityMassEqualsPlacedHeads) {
  const SceneGenerator gen(benchmark_spec());
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto r = gen.generate(seed);
    const int placed = std::accumulate(r.placed_counts.begin(), r.placed_counts.end(), 0);
    ASSERT_EQ(static_cast<std::size_t>(placed), r.heads);
    worst = std::max(worst, std::abs(raster_sum(r.density) - placed));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(GenerateScene, ShapesAndRounding) {
  const SceneGenerator gen(benchmark_spec());
  const auto r = gen.generate(5);
  EXPECT_EQ(r.image.width, 192u);
  EXPECT_EQ(r.image.height, 192u);
  EXPECT_EQ(r.density.width, 48u);
  EXPECT_EQ(r.density.height, 48u);
  ASSERT_EQ(r.target_counts.size(), 36u);
  for (std::size_t i = 0; i < 36; ++i) {
    EXPECT_GE(r.placed_counts[i], std::floor(r.target_counts[i]));
    EXPECT_LE(r.placed_counts[i], std::ceil(r.target_counts[i]));
  }
  EXPECT_EQ(gen.targets(5), r.target_counts);
}

TEST(GenerateScene, HeadsLandInTheirCells) {
  // Gaussians near a cell border spill into the neighbour, so compare in aggregate.
  const SceneGenerator gen(benchmark_spec());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = gen.generate(seed);
    const auto g = cells_from_density(r.density, 6, 6);
    double moved = 0.0;
    for (std::size_t i = 0; i < 36; ++i) moved += std::abs(g.counts[i] - r.placed_counts[i]);
    EXPECT_LE(moved, 0.3 * static_cast<double>(r.heads) + 2.0) << "seed " << seed;
  }
}

TEST(GenerateScene, TargetDrawsFollowThePrior) {
  for (bool bimodal : {false, true}) {
    const auto spec = benchmark_spec(1200.0, 2.0, 300, bimodal);
    const SceneGenerator gen(spec);
    std::vector<double> xs;
    for (std::uint64_t seed = 0; seed < 3000; ++seed) {
      const auto t = gen.targets(seed);
      xs.insert(xs.end(), t.begin(), t.end());
    }
    const auto& p = spec.count_prior;
    oracle::MixtureCdf cdf(p.alpha, p.lambda, p.c_max_cell, p.head_mass_fraction);
    // Draws within an image are correlated, so the effective sample is far below xs.size().
    EXPECT_LT(oracle::ks_statistic(xs, cdf), 0.02) << "bimodal=" << bimodal;
  }
}

TEST(GenerateScene, BimodalSplitsCropsIntoTwoGroups) {
  // Bimodality coefficient (skew^2 + 1) / kurtosis of the crop-level mean rank; values above
  // 5/9 indicate two modes.
  auto coefficient = [](bool bimodal) {
    const auto spec = benchmark_spec(1200.0, 2.0, 300, bimodal);
    const SceneGenerator gen(spec);
    std::vector<double> crop_means;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto t = gen.targets(seed);
      for (std::size_t tr = 0; tr < 2; ++tr) {
        for (std::size_t tc = 0; tc < 2; ++tc) {
          double u = 0.0;
          for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t c = 0; c < 3; ++c) u += gen.table().mixture_cdf(t[(tr * 3 + r) * 6 + tc * 3 + c]);
          }
          crop_means.push_back(u / 9.0);
        }
      }
    }
    const double n = static_cast<double>(crop_means.size());
    const double mean = std::accumulate(crop_means.begin(), crop_means.end(), 0.0) / n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : crop_means) {
      const double d = v - mean;
      m2 += d * d / n;
      m3 += d * d * d / n;
      m4 += d * d * d * d / n;
    }
    const double skew = m3 / std::pow(m2, 1.5), kurt = m4 / (m2 * m2);
    return (skew * skew + 1.0) / kurt;
  };
  const double plain = coefficient(false), split = coefficient(true);
  EXPECT_GT(split, 5.0 / 9.0);
  EXPECT_LT(plain, 5.0 / 9.0);
}

TEST(GenerateScene, NotRotationInvariant) {
  // Upright scenes are lit from above; a quarter turn moves the bright edge off the top.
  const SceneGenerator gen(benchmark_spec());
  int upright_top_brighter = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto img = gen.generate(seed).image;
    double top = 0.0, bottom = 0.0;
    for (std::size_t y = 0; y < 96; ++y) {
      for (std::size_t x = 0; x < 192; ++x) {
        top += img.at(x, y);
        bottom += img.at(x, y + 96);
      }
    }
    upright_top_brighter += top > bottom;
    const auto turned = rotate90(img, 2);
    EXPECT_NE(turned, img);
  }
  EXPECT_GE(upright_top_brighter, 30);
}

TEST(GenerateScene, DeterministicPerSeed) {
  const SceneGenerator gen(benchmark_spec());
  const auto a = gen.generate(42), b = gen.generate(42), c = gen.generate(43);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.density, b.density);
  EXPECT_NE(a.image, c.image);
}

TEST(GenerateDataset, EmptyDatasetHasHeaderOnly) {
  const auto dir = scratch("empty");
  const auto m = generate_dataset(benchmark_spec(), 0, 1, dir);
  EXPECT_TRUE(m.rows.empty());
  const auto back = read_manifest(dir / "manifest.csv");
  EXPECT_TRUE(back.rows.empty());
  EXPECT_EQ(back.grid_m, 6u);
  EXPECT_EQ(back.grid_n, 6u);
  std::filesystem::remove_all(dir);
}

TEST(GenerateDataset, ByteIdenticalRegeneration) {
  const auto d1 = scratch("a"), d2 = scratch("b");
  generate_dataset(benchmark_spec(), 4, 9, d1);
  generate_dataset(benchmark_spec(), 4, 9, d2);
  for (const auto& e : std::filesystem::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), d1);
    EXPECT_EQ(slurp(e.path()), slurp(d2 / rel)) << rel;
  }
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST(GenerateDataset, ManifestAgreesWithDensityFiles) {
  const auto dir = scratch("manifest");
  generate_dataset(benchmark_spec(), 5, 3, dir);
  const auto m = read_manifest(dir / "manifest.csv");
  ASSERT_EQ(m.rows.size(), 5u);
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    const auto d = read_dmap(m.density_path(i));
    EXPECT_NEAR(m.rows[i].count, raster_sum(d), 1e-3);
    const auto g = cells_from_density(d, 6, 6);
    ASSERT_EQ(m.rows[i].cells.size(), 36u);
    for (std::size_t k = 0; k < 36; ++k) EXPECT_NEAR(m.rows[i].cells[k], g.counts[k], 1e-3);
    EXPECT_NEAR(std::accumulate(m.rows[i].cells.begin(), m.rows[i].cells.end(), 0.0), m.rows[i].count, 1e-3);
    const auto img = read_pgm(m.image_path(i));
    EXPECT_EQ(img.width, 192u);
  }
  std::filesystem::remove_all(dir);
}

TEST(ReadManifest, RejectsMalformedFiles) {
  const auto dir = scratch("bad");
  io::write_file(dir / "m1.csv", "img,density,count\n");
  EXPECT_THROW(read_manifest(dir / "m1.csv"), IoError);
  io::write_file(dir / "m2.csv", "image,density,count,c00\na.pgm,a.dmap,1\n");
  EXPECT_THROW(read_manifest(dir / "m2.csv"), IoError);
  io::write_file(dir / "m3.csv", "image,density,count\na.pgm,a.dmap,x\n");
  EXPECT_THROW(read_manifest(dir / "m3.csv"), std::exception);
  std::filesystem::remove_all(dir);
}
