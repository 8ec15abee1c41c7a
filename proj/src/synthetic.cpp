#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "cscunet/dataset.hpp"
#include "cscunet/errors.hpp"

namespace fs = std::filesystem;

namespace cscunet {

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "cracks") return SyntheticKind::cracks;
  if (s == "shapes") return SyntheticKind::shapes;
  throw ConfigError("unknown synthetic kind '" + s + "' (expected cracks or shapes)");
}

int class_count(SyntheticKind kind) { return kind == SyntheticKind::cracks ? 2 : 3; }

SplitCounts SplitCounts::default_for(int n) {
  const int val = n / 6;
  const int test = n / 6;
  return {n - val - test, val, test};
}

namespace {

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Smooth low-frequency field from a few random plane waves plus pixel noise.
std::vector<double> texture(int size, double amplitude, double noise, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, noise);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    const double angle = 2 * std::numbers::pi * unit(rng);
    const double freq = (1.0 + 3.0 * unit(rng)) * 2 * std::numbers::pi / size;
    waves.push_back({freq * std::cos(angle), freq * std::sin(angle),
                     2 * std::numbers::pi * unit(rng), amplitude * (0.5 + 0.5 * unit(rng))});
  }
  std::vector<double> field(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      field[static_cast<std::size_t>(y) * size + x] = v / 2.0 + gauss(rng);
    }
  }
  return field;
}

Record crack_sample(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> turn(0.0, 0.25);
  const double base = 140.0 + 50.0 * unit(rng);
  const std::array<double, 3> tint{unit(rng) * 16 - 8, unit(rng) * 16 - 8, unit(rng) * 16 - 8};
  const auto field = texture(size, 14.0, 6.0, rng);

  ClassMap mask{size, size, std::vector<std::uint8_t>(field.size(), 0)};
  const int cracks = 1 + static_cast<int>(unit(rng) * 2.0);
  const double scale = size / 64.0;
  for (int k = 0; k < cracks; ++k) {
    double x = size * (0.15 + 0.7 * unit(rng));
    double y = size * (0.15 + 0.7 * unit(rng));
    double heading = 2 * std::numbers::pi * unit(rng);
    const int width = 1 + static_cast<int>(unit(rng) * 3.0);
    const int steps = static_cast<int>((30 + 50 * unit(rng)) * scale);
    for (int s = 0; s < steps; ++s) {
      const int cx = static_cast<int>(std::lround(x));
      const int cy = static_cast<int>(std::lround(y));
      for (int dy = 0; dy < width; ++dy) {
        for (int dx = 0; dx < width; ++dx) {
          const int px = cx + dx - width / 2;
          const int py = cy + dy - width / 2;
          if (px >= 0 && px < size && py >= 0 && py < size) {
            mask.labels[static_cast<std::size_t>(py) * size + px] = 1;
          }
        }
      }
      heading += turn(rng);
      x += std::cos(heading);
      y += std::sin(heading);
      if (x < 0 || x >= size || y < 0 || y >= size) break;
    }
  }

  const double depth = 55.0 + 35.0 * unit(rng);
  std::normal_distribution<double> crack_noise(0.0, 6.0);
  Image img{size, size, 3, std::vector<std::uint8_t>(field.size() * 3)};
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double v = base + field[i] - (mask.labels[i] ? depth + crack_noise(rng) : 0.0);
    for (int c = 0; c < 3; ++c) img.pixels[3 * i + c] = clamp_byte(v + tint[c]);
  }
  return {"", std::move(img), std::move(mask), Split::train};
}

Record shapes_sample(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = 60.0 + 80.0 * unit(rng);
  const auto field = texture(size, 18.0, 5.0, rng);
  std::vector<std::array<double, 3>> color(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    for (int c = 0; c < 3; ++c) color[i][c] = bg[c] + field[i];
  }
  ClassMap mask{size, size, std::vector<std::uint8_t>(field.size(), 0)};

  const int disks = 1 + static_cast<int>(unit(rng) * 3.0);
  for (int d = 0; d < disks; ++d) {
    const double r = size * (1.0 / 12.0 + unit(rng) * (1.0 / 5.0 - 1.0 / 12.0));
    const double cx = r + unit(rng) * (size - 2 * r);
    const double cy = r + unit(rng) * (size - 2 * r);
    std::array<double, 3> fill{};
    for (auto& c : fill) c = 150.0 + 100.0 * unit(rng);
    auto inside = [&](int x, int y) {
      const double dx = x - cx;
      const double dy = y - cy;
      return dx * dx + dy * dy <= r * r;
    };
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!inside(x, y)) continue;
        const bool edge = !inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) ||
                          !inside(x, y + 1);
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        mask.labels[i] = edge ? 2 : 1;
        for (int c = 0; c < 3; ++c) color[i][c] = edge ? 20.0 : fill[c] + field[i] * 0.5;
      }
    }
  }
  Image img{size, size, 3, std::vector<std::uint8_t>(field.size() * 3)};
  for (std::size_t i = 0; i < field.size(); ++i) {
    for (int c = 0; c < 3; ++c) img.pixels[3 * i + c] = clamp_byte(color[i][c]);
  }
  return {"", std::move(img), std::move(mask), Split::train};
}

}  // namespace

Record synthesize_sample(SyntheticKind kind, int size, std::uint64_t seed, std::size_t index) {
  if (size < 16 || size % 16 != 0) throw ConfigError("synthetic image size must be a positive multiple of 16");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(kind)};
  std::mt19937_64 rng(seq);
  Record rec = kind == SyntheticKind::cracks ? crack_sample(size, rng) : shapes_sample(size, rng);
  char name[32];
  std::snprintf(name, sizeof name, "synth_%05zu", index);
  rec.name = name;
  return rec;
}

SampleSet gen_synthetic(SyntheticKind kind, int n, int size, std::uint64_t seed,
                        const fs::path& out, std::optional<SplitCounts> splits) {
  if (n < 1) throw ConfigError("sample count must be positive");
  const SplitCounts counts = splits.value_or(SplitCounts::default_for(n));
  if (counts.train < 0 || counts.val < 0 || counts.test < 0 ||
      counts.train + counts.val + counts.test != n) {
    throw ConfigError("split counts must be nonnegative and sum to the sample count");
  }
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  fs::create_directories(out / "masks", ec);
  if (ec) throw DataError("cannot create dataset directories under " + out.string() + ": " + ec.message());

  SampleSet set;
  set.class_count = class_count(kind);
  std::ofstream manifest(out / "split.txt", std::ios::trunc);
  if (!manifest) throw DataError("cannot write " + (out / "split.txt").string());
  for (int i = 0; i < n; ++i) {
    Record rec = synthesize_sample(kind, size, seed, static_cast<std::size_t>(i));
    rec.split = i < counts.train                ? Split::train
                : i < counts.train + counts.val ? Split::val
                                                : Split::test;
    write_image(rec.image, out / "images" / (rec.name + ".png"));
    write_mask(rec.mask, out / "masks" / (rec.name + ".png"));
    manifest << rec.name << ' ' << to_string(rec.split) << '\n';
    set.records.push_back(std::move(rec));
  }
  if (!manifest) throw DataError("failed writing " + (out / "split.txt").string());
  return set;
}

}  // namespace cscunet
