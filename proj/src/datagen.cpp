#include "vmp/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace vmp {

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double band_draw(const std::pair<double, double>& band, Rng& rng) {
  return band.first + (band.second - band.first) * rng.uniform();
}

}  // namespace

Dataset generate(const ShapeTaskConfig& cfg) {
  if (cfg.canvas < 32) throw GeometryError("generate: canvas must be >= 32");
  if (cfg.classes < 2 || cfg.classes > cfg.intensity_bands.size()) {
    throw GeometryError("generate: class count incompatible with bands");
  }
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const auto& b = cfg.intensity_bands[c];
    if (b.first < 0.0 || b.second > 1.0 || b.first > b.second) {
      throw GeometryError("generate: intensity bands must lie within [0,1]");
    }
  }
  if (cfg.texture_sigma < 0.0) {
    throw GeometryError("generate: texture sigma must be >= 0");
  }

  const std::size_t n = cfg.canvas;
  const double nd = static_cast<double>(n);
  Dataset ds;
  ds.h = n;
  ds.w = n;
  ds.c_in = 1;
  ds.classes = cfg.classes;
  ds.samples.resize(cfg.count);

  Rng root(cfg.seed);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng = root.split(i);
    LabeledSample& s = ds.samples[i];
    s.image = Tensor({n, n, 1});
    s.mask.assign(n * n, 0);

    const double bg = band_draw(cfg.intensity_bands[0], rng);
    for (std::size_t px = 0; px < n * n; ++px) {
      s.image.data[px] = bg;
    }

    for (std::size_t sh = 0; sh < cfg.shapes_per_image; ++sh) {
      const std::uint8_t label = static_cast<std::uint8_t>(
          1 + rng.uniform_index(cfg.classes - 1));
      const double fg = band_draw(cfg.intensity_bands[label], rng);
      const bool ellipse = rng.uniform() < 0.5;
      const double cy = nd * (0.2 + 0.6 * rng.uniform());
      const double cx = nd * (0.2 + 0.6 * rng.uniform());
      const double ry = nd * (0.10 + 0.10 * rng.uniform());
      const double rx = nd * (0.10 + 0.10 * rng.uniform());
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = (static_cast<double>(y) - cy) / ry;
          const double dx = (static_cast<double>(x) - cx) / rx;
          const bool inside =
              ellipse ? (dy * dy + dx * dx <= 1.0)
                      : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
          if (inside) {
            s.image.at(y, x, 0) = fg;
            s.mask[y * n + x] = label;
          }
        }
      }
    }

    if (cfg.texture_sigma > 0.0) {
      for (std::size_t px = 0; px < n * n; ++px) {
        s.image.data[px] += cfg.texture_sigma * rng.normal();
      }
    }
    for (std::size_t px = 0; px < n * n; ++px) {
      s.image.data[px] = clamp01(s.image.data[px]);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// "VMPD" binary container
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, std::size_t& offset) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) {
    throw DataError("load_dataset: truncated file at byte offset " +
                    std::to_string(offset));
  }
  offset += 4;
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("save_dataset: cannot open " + path);
  os.write("VMPD", 4);
  put_u32(os, static_cast<std::uint32_t>(ds.samples.size()));
  for (const auto& s : ds.samples) {
    put_u32(os, static_cast<std::uint32_t>(ds.h));
    put_u32(os, static_cast<std::uint32_t>(ds.w));
    put_u32(os, static_cast<std::uint32_t>(ds.c_in));
    put_u32(os, static_cast<std::uint32_t>(ds.classes));
    std::vector<float> buf(s.image.data.begin(), s.image.data.end());
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * 4));
    os.write(reinterpret_cast<const char*>(s.mask.data()),
             static_cast<std::streamsize>(s.mask.size()));
  }
  if (!os) throw DataError("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_dataset: cannot open " + path);
  std::size_t offset = 0;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VMPD", 4) != 0) {
    throw DataError("load_dataset: bad magic at byte offset 0");
  }
  offset = 4;
  const std::uint32_t count = get_u32(is, offset);
  Dataset ds;
  ds.samples.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t h = get_u32(is, offset);
    const std::uint32_t w = get_u32(is, offset);
    const std::uint32_t c_in = get_u32(is, offset);
    const std::uint32_t classes = get_u32(is, offset);
    if (i == 0) {
      ds.h = h;
      ds.w = w;
      ds.c_in = c_in;
      ds.classes = classes;
    } else if (h != ds.h || w != ds.w || c_in != ds.c_in ||
               classes != ds.classes) {
      throw DataError("load_dataset: inconsistent sample header at byte offset " +
                      std::to_string(offset - 16));
    }
    LabeledSample& s = ds.samples[i];
    const std::size_t npix = static_cast<std::size_t>(h) * w;
    std::vector<float> buf(npix * c_in);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
    if (!is) {
      throw DataError("load_dataset: truncated image at byte offset " +
                      std::to_string(offset));
    }
    offset += buf.size() * 4;
    s.image = Tensor({h, w, c_in});
    std::copy(buf.begin(), buf.end(), s.image.data.begin());
    s.mask.resize(npix);
    is.read(reinterpret_cast<char*>(s.mask.data()),
            static_cast<std::streamsize>(npix));
    if (!is) {
      throw DataError("load_dataset: truncated mask at byte offset " +
                      std::to_string(offset));
    }
    offset += npix;
    for (std::uint8_t label : s.mask) {
      if (label >= classes) {
        throw DataError("load_dataset: label out of range in sample " +
                        std::to_string(i));
      }
    }
  }
  return ds;
}

void export_pgm(const Tensor& map, const std::string& path,
                PgmNormalization norm, double v_max) {
  if (map.rank() < 2) throw GeometryError("export_pgm: map must be H x W");
  if (map.rank() > 2 && map.dim(2) != 1) {
    throw GeometryError("export_pgm: map must have a single channel");
  }
  const std::size_t h = map.dim(0), w = map.dim(1);
  double scale_max = v_max;
  if (norm == PgmNormalization::per_image) {
    scale_max = 0.0;
    for (double v : map.data) scale_max = std::max(scale_max, v);
  }
  if (norm == PgmNormalization::fixed_range && v_max <= 0.0) {
    throw GeometryError("export_pgm: fixed range requires v_max > 0");
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("export_pgm: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double v = map.data[y * w + x];
      double q = 0.0;
      if (scale_max > 0.0) {
        q = std::floor(v / scale_max * 255.0 + 0.5);  // round half up
      }
      row[x] = static_cast<unsigned char>(std::min(255.0, std::max(0.0, q)));
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(w));
  }
  if (!os) throw DataError("export_pgm: write failed for " + path);
}

}  // namespace vmp
