#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cscunet/dataset.hpp"
#include "cscunet/errors.hpp"
#include "cscunet/metrics.hpp"

using namespace cscunet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// n pairs of 16x16 images with masks in [0, classes), all listed as train.
void write_fixture(const fs::path& root, int n, int classes) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ofstream split(root / "split.txt");
  std::mt19937 rng(5);
  for (int i = 0; i < n; ++i) {
    const std::string name = "img" + std::to_string(n - i);  // written out of order
    Image img{16, 16, 3, std::vector<std::uint8_t>(16 * 16 * 3)};
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
    ClassMap mask{16, 16, std::vector<std::uint8_t>(256)};
    for (auto& l : mask.labels) l = static_cast<std::uint8_t>(rng() % classes);
    write_image(img, root / "images" / (name + ".png"));
    write_mask(mask, root / "masks" / (name + ".png"));
    split << name << ' ' << (i % 5 == 0 ? "val" : "train") << '\n';
  }
}

ClassMap random_map(std::mt19937_64& rng, int classes, int size = 16) {
  ClassMap m{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size)};
  std::uniform_int_distribution<int> d(0, classes - 1);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(d(rng));
  return m;
}

}  // namespace

TEST_CASE("dataset loading") {
  TempDir tmp("cscunet_data_test");
  write_fixture(tmp.path, 10, 2);

  SUBCASE("well-formed directory") {
    const SampleSet a = load_dataset(tmp.path, 2);
    REQUIRE(a.records.size() == 10);
    CHECK(std::is_sorted(a.records.begin(), a.records.end(),
                         [](const Record& x, const Record& y) { return x.name < y.name; }));
    CHECK(a.indices(Split::val).size() == 2);
    CHECK(a.indices(Split::train).size() == 8);
    const SampleSet b = load_dataset(tmp.path, 2);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(a.records[i].name == b.records[i].name);
      CHECK(a.records[i].image == b.records[i].image);
      CHECK(a.records[i].mask == b.records[i].mask);
    }
    CHECK(a.records[0].image.height == 16);
  }
  SUBCASE("mask value outside the class range") {
    ClassMap bad{16, 16, std::vector<std::uint8_t>(256, 0)};
    bad.labels[17] = 7;
    write_mask(bad, tmp.path / "masks" / "img3.png");
    try {
      (void)load_dataset(tmp.path, 2);
      FAIL("expected a range error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("img3.png") != std::string::npos);
    }
    // 7 is acceptable once declared as the ignore value.
    CHECK(load_dataset(tmp.path, 2, 7).records.size() == 10);
  }
  SUBCASE("image without a mask") {
    fs::remove(tmp.path / "masks" / "img4.png");
    CHECK_THROWS_AS(load_dataset(tmp.path, 2), DataError);
  }
  SUBCASE("name missing from split.txt") {
    std::ofstream(tmp.path / "split.txt") << "img1 train\n";
    CHECK_THROWS_AS(load_dataset(tmp.path, 2), DataError);
  }
  SUBCASE("bad split label") {
    std::ofstream(tmp.path / "split.txt", std::ios::app) << "img1 holdout\n";
    CHECK_THROWS_AS(load_dataset(tmp.path, 2), DataError);
  }
  SUBCASE("missing root") {
    CHECK_THROWS_AS(load_dataset(tmp.path / "nope", 2), DataError);
  }
}

TEST_CASE("synthetic generation") {
  TempDir a("cscunet_synth_a"), b("cscunet_synth_b");
  SUBCASE("same seed gives byte-identical files") {
    (void)gen_synthetic(SyntheticKind::shapes, 6, 32, 9, a.path);
    (void)gen_synthetic(SyntheticKind::shapes, 6, 32, 9, b.path);
    for (const auto& entry : fs::recursive_directory_iterator(a.path)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), a.path);
      CHECK(read_bytes(entry.path()) == read_bytes(b.path / rel));
    }
    const SampleSet loaded = load_dataset(a.path, 3);
    CHECK(loaded.records.size() == 6);
  }
  SUBCASE("different seeds differ") {
    const Record r1 = synthesize_sample(SyntheticKind::cracks, 32, 1, 0);
    const Record r2 = synthesize_sample(SyntheticKind::cracks, 32, 2, 0);
    CHECK_FALSE(r1.image == r2.image);
  }
  SUBCASE("crack pixel fraction") {
    std::size_t positive = 0, total = 0, out_of_range = 0;
    for (std::size_t i = 0; i < 200; ++i) {
      const Record r = synthesize_sample(SyntheticKind::cracks, 64, 0, i);
      for (auto l : r.mask.labels) {
        positive += l == 1;
        out_of_range += l > 1;
      }
      total += r.mask.labels.size();
    }
    CHECK(out_of_range == 0);
    const double fraction = static_cast<double>(positive) / total;
    CHECK(fraction >= 0.01);
    CHECK(fraction <= 0.10);
  }
  SUBCASE("shapes use all three classes") {
    std::set<int> seen;
    for (std::size_t i = 0; i < 5; ++i) {
      for (auto l : synthesize_sample(SyntheticKind::shapes, 32, 3, i).mask.labels) seen.insert(l);
    }
    CHECK(seen == std::set<int>{0, 1, 2});
  }
  SUBCASE("default split counts") {
    const SplitCounts c = SplitCounts::default_for(300);
    CHECK(c.train == 200);
    CHECK(c.val == 50);
    CHECK(c.test == 50);
  }
  SUBCASE("size must be a multiple of 16") {
    CHECK_THROWS(gen_synthetic(SyntheticKind::cracks, 2, 40, 0, a.path));
  }
}

TEST_CASE("metrics examples") {
  SUBCASE("perfect prediction") {
    std::mt19937_64 rng(1);
    const ClassMap m = random_map(rng, 3);
    const MetricsReport r = compute_metrics(m, m, 3);
    CHECK(r.pixel_acc == 1.0);
    CHECK(r.mean_iou == 1.0);
  }
  SUBCASE("binary confusion [[50,10],[5,35]]") {
    ClassMap truth{10, 10, {}}, pred{10, 10, {}};
    auto put = [&](int t, int p, int count) {
      for (int i = 0; i < count; ++i) {
        truth.labels.push_back(static_cast<std::uint8_t>(t));
        pred.labels.push_back(static_cast<std::uint8_t>(p));
      }
    };
    put(0, 0, 50);
    put(0, 1, 10);
    put(1, 0, 5);
    put(1, 1, 35);
    const MetricsReport r = compute_metrics(pred, truth, 2);
    CHECK(r.confusion.at(0, 1) == 10);
    CHECK(r.confusion.at(1, 0) == 5);
    CHECK(r.pixel_acc == doctest::Approx(0.85));
    CHECK(*r.iou[0] == doctest::Approx(50.0 / 65.0));
    CHECK(*r.iou[1] == doctest::Approx(35.0 / 50.0));
    CHECK(r.mean_iou == doctest::Approx(0.7346).epsilon(1e-4));
    CHECK(r.class_avg == doctest::Approx((50.0 / 60.0 + 35.0 / 40.0) / 2.0));
  }
  SUBCASE("absent class is excluded from the mean") {
    const ClassMap truth{1, 4, {0, 0, 1, 1}};
    const ClassMap pred{1, 4, {0, 1, 1, 1}};
    const MetricsReport r = compute_metrics(pred, truth, 3);
    CHECK_FALSE(r.iou[2].has_value());
    CHECK(r.mean_iou == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0));
    const std::string row = metrics_csv_row("m", "d", r);
    CHECK(row.substr(row.rfind(',') + 1) == "nan");
  }
  SUBCASE("ignored pixels are not counted") {
    const ClassMap truth{1, 4, {0, 255, 1, 255}};
    const ClassMap pred{1, 4, {0, 1, 0, 1}};
    const MetricsReport r = compute_metrics(pred, truth, 2, 255);
    CHECK(r.confusion.total() == 2);
    CHECK(r.pixel_acc == 0.5);
  }
  SUBCASE("out-of-range labels and size mismatch") {
    CHECK_THROWS_AS(compute_metrics(ClassMap{1, 2, {0, 3}}, ClassMap{1, 2, {0, 1}}, 2), DataError);
    CHECK_THROWS_AS(compute_metrics(ClassMap{1, 2, {0, 1}}, ClassMap{1, 1, {0}}, 2), ShapeError);
  }
}

TEST_CASE("metrics properties") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const ClassMap truth = random_map(rng, 4), pred = random_map(rng, 4);
    const MetricsReport r = compute_metrics(pred, truth, 4);
    CHECK(r.confusion.total() == 256);
    // Consistent relabeling of both maps leaves the scalar metrics unchanged.
    const std::uint8_t perm[4] = {2, 0, 3, 1};
    ClassMap pt = truth, pp = pred;
    for (auto& l : pt.labels) l = perm[l];
    for (auto& l : pp.labels) l = perm[l];
    const MetricsReport q = compute_metrics(pp, pt, 4);
    CHECK(q.pixel_acc == r.pixel_acc);
    CHECK(q.mean_iou == doctest::Approx(r.mean_iou).epsilon(1e-15));
    // Merging per-image matrices equals tallying the concatenation.
    ConfusionMatrix merged(4);
    merged.add(pred, truth, std::nullopt);
    merged.merge(r.confusion);
    CHECK(merged.total() == 512);
  }
}

TEST_CASE("metrics csv") {
  CHECK(metrics_csv_header(3) == "model,dataset,pixel_acc,mean_iou,class_avg,iou_0,iou_1,iou_2");
  const ClassMap m{1, 2, {0, 1}};
  const std::string row = metrics_csv_row("U-Net", "cracks", compute_metrics(m, m, 2));
  CHECK(row == "U-Net,cracks,1.000000,1.000000,1.000000,1.000000,1.000000");
}

TEST_CASE("palette") {
  std::mt19937_64 rng(3);
  SUBCASE("two-class map uses at most two colors and round-trips") {
    const ClassMap m = random_map(rng, 2);
    const Image img = colorize(m, default_palette());
    std::set<std::array<std::uint8_t, 3>> colors;
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      colors.insert({img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]});
    }
    CHECK(colors.size() <= 2);
    CHECK(decolorize(img, default_palette()) == m);
  }
  SUBCASE("written file decodes to the same classes") {
    TempDir tmp("cscunet_palette_test");
    const ClassMap m = random_map(rng, 11);
    write_prediction(m, default_palette(), tmp.path / "p.png");
    CHECK(decolorize(read_image(tmp.path / "p.png"), default_palette()) == m);
    const ClassMap bg{8, 8, std::vector<std::uint8_t>(64, 0)};
    write_prediction(bg, default_palette(), tmp.path / "bg.png");
    const Image back = read_image(tmp.path / "bg.png");
    CHECK(std::all_of(back.pixels.begin(), back.pixels.end(), [](std::uint8_t p) { return p == 0; }));
  }
  SUBCASE("palette too small") {
    const ClassMap m{1, 1, {12}};
    CHECK_THROWS_AS(colorize(m, default_palette()), DataError);
  }
}

TEST_CASE("tensor conversion") {
  const Image img{16, 16, 3, std::vector<std::uint8_t>(16 * 16 * 3, 255)};
  const Image* ptr = &img;
  const Tensor<float> t = images_to_tensor(std::span<const Image* const>(&ptr, 1));
  CHECK(t.shape() == Shape{1, 3, 16, 16});
  CHECK(t.at(0, 2, 5, 5) == 1.0f);
  Tensor<float> logits = Tensor<float>::zeros({1, 3, 1, 2});
  logits.at(0, 2, 0, 0) = 1.0f;  // pixel 0 -> class 2, pixel 1 tie -> class 0
  const auto maps = argmax_classes(logits);
  REQUIRE(maps.size() == 1);
  CHECK(maps[0].labels == std::vector<std::uint8_t>{2, 0});
}
