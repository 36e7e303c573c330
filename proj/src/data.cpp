#include "ttrd3/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace ttrd3 {

namespace {

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

int reflect(int j, int n) {
  while (j < 0 || j >= n) j = j < 0 ? -j - 1 : 2 * n - j - 1;
  return j;
}

struct Taps {
  std::vector<int> start;  // first tap per output
  int count = 0;
  std::vector<int> index;  // [out, count] reflected source indices
  std::vector<double> weight;
};

Taps make_taps(int in, int out) {
  const double scale = static_cast<double>(out) / in;
  const double support = scale < 1.0 ? 2.0 / scale : 2.0;
  const double kscale = scale < 1.0 ? scale : 1.0;
  Taps t;
  t.count = static_cast<int>(std::ceil(2.0 * support)) + 1;
  t.index.resize(static_cast<std::size_t>(out) * t.count);
  t.weight.resize(t.index.size());
  for (int o = 0; o < out; ++o) {
    const double center = (o + 0.5) / scale - 0.5;
    const int first = static_cast<int>(std::floor(center - support)) + 1;
    double total = 0.0;
    for (int k = 0; k < t.count; ++k) {
      const double w = cubic((center - (first + k)) * kscale);
      t.index[o * t.count + k] = reflect(first + k, in);
      t.weight[o * t.count + k] = w;
      total += w;
    }
    for (int k = 0; k < t.count; ++k) t.weight[o * t.count + k] /= total;
  }
  return t;
}

}  // namespace

ImagePlane resize_bicubic(const ImagePlane& img, int out_height, int out_width) {
  if (out_height < 1 || out_width < 1) throw std::invalid_argument("resize target must be positive");
  const int c = img.channels(), h = img.height(), w = img.width();
  const Taps tx = make_taps(w, out_width);
  const Taps ty = make_taps(h, out_height);
  Tensor mid(Shape{c, h, out_width});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y) {
      const double* src = img.data.ptr() + (static_cast<std::size_t>(ch) * h + y) * w;
      double* dst = mid.ptr() + (static_cast<std::size_t>(ch) * h + y) * out_width;
      for (int o = 0; o < out_width; ++o) {
        double acc = 0.0;
        for (int k = 0; k < tx.count; ++k) acc += tx.weight[o * tx.count + k] * src[tx.index[o * tx.count + k]];
        dst[o] = acc;
      }
    }
  ImagePlane out(c, out_height, out_width, img.role);
  for (int ch = 0; ch < c; ++ch)
    for (int o = 0; o < out_height; ++o) {
      double* dst = out.data.ptr() + (static_cast<std::size_t>(ch) * out_height + o) * out_width;
      for (int k = 0; k < ty.count; ++k) {
        const double wgt = ty.weight[o * ty.count + k];
        const double* src = mid.ptr() + (static_cast<std::size_t>(ch) * h + ty.index[o * ty.count + k]) * out_width;
        for (int x = 0; x < out_width; ++x) dst[x] += wgt * src[x];
      }
    }
  out.range_lo = img.range_lo;
  out.range_hi = img.range_hi;
  return out;
}

ImagePlane degrade_bicubic(const ImagePlane& img, int factor) {
  if (factor < 1) throw std::invalid_argument("degrade factor must be >= 1");
  if (img.height() % factor != 0 || img.width() % factor != 0) {
    throw std::invalid_argument("image " + shape_str(img.data.shape()) + " not divisible by factor " +
                                std::to_string(factor));
  }
  return resize_bicubic(img, img.height() / factor, img.width() / factor);
}

ImagePlane upsample_bicubic(const ImagePlane& img, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  ImagePlane out = resize_bicubic(img, img.height() * factor, img.width() * factor);
  out.role = PlaneRole::LRup;
  return out;
}

ImagePlane make_ref_pair(const ImagePlane& ref, int factor) {
  ImagePlane out = upsample_bicubic(degrade_bicubic(ref, factor), factor);
  out.role = ref.role;
  return out;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Reference:
      return "reference";
    case Split::Validation:
      return "validation";
  }
  return "unknown";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "reference") return Split::Reference;
  if (s == "validation") return Split::Validation;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::vector<ManifestEntry> DatasetManifest::in_split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(e);
  return out;
}

DatasetManifest split_dataset(const std::vector<std::pair<std::string, std::string>>& items, std::uint64_t seed,
                              int sr_factor) {
  if (items.empty()) throw std::invalid_argument("split_dataset: no items");
  std::map<std::string, std::vector<std::string>> by_cat;
  for (const auto& [path, cat] : items) {
    if (cat.empty()) throw std::invalid_argument("split_dataset: empty category for " + path);
    by_cat[cat].push_back(path);
  }
  DatasetManifest m;
  m.seed = seed;
  m.sr_factor = sr_factor;
  std::mt19937_64 engine(seed);
  for (auto& [cat, paths] : by_cat) {
    std::shuffle(paths.begin(), paths.end(), engine);
    const auto n = static_cast<double>(paths.size());
    const auto n_train = static_cast<std::size_t>(std::lround(0.6 * n));
    const auto n_ref = std::min(paths.size() - n_train, static_cast<std::size_t>(std::lround(0.3 * n)));
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const Split s = i < n_train ? Split::Train : (i < n_train + n_ref ? Split::Reference : Split::Validation);
      m.entries.push_back({paths[i], cat, s});
    }
  }
  return m;
}

PairingPolicy parse_pairing(const std::string& s) {
  if (s == "same-category") return PairingPolicy::SameCategory;
  if (s == "random") return PairingPolicy::Random;
  if (s == "noise") return PairingPolicy::Noise;
  throw std::invalid_argument("unknown pairing policy '" + s + "'");
}

std::string to_string(PairingPolicy p) {
  switch (p) {
    case PairingPolicy::SameCategory:
      return "same-category";
    case PairingPolicy::Random:
      return "random";
    case PairingPolicy::Noise:
      return "noise";
  }
  return "unknown";
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string pair_reference(const ManifestEntry& item, const DatasetManifest& manifest, PairingPolicy policy,
                           std::uint64_t seed) {
  const std::uint64_t h = splitmix(seed ^ fnv1a(item.path));
  if (policy == PairingPolicy::Noise) return kNoiseRefPrefix + std::to_string(h);
  std::vector<const ManifestEntry*> pool;
  for (const auto& e : manifest.entries) {
    if (e.split != Split::Reference || e.path == item.path) continue;
    if (policy == PairingPolicy::SameCategory && e.category != item.category) continue;
    pool.push_back(&e);
  }
  if (pool.empty()) {
    throw std::invalid_argument("no reference candidates for '" + item.path + "' under policy " + to_string(policy));
  }
  return pool[h % pool.size()]->path;
}

ImagePlane make_noise_reference(int channels, int height, int width, std::uint64_t seed) {
  Rng rng(seed);
  return ImagePlane(rng.normal_tensor(Shape{channels, height, width}), PlaneRole::HR);
}

bool parse_noise_token(const std::string& path, std::uint64_t* seed) {
  const std::string prefix = kNoiseRefPrefix;
  if (path.rfind(prefix, 0) != 0) return false;
  try {
    std::size_t used = 0;
    const std::string digits = path.substr(prefix.size());
    const auto v = std::stoull(digits, &used);
    if (used != digits.size()) return false;
    if (seed) *seed = v;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  out << "# seed=" << m.seed << " sr_factor=" << m.sr_factor << "\n";
  for (const auto& e : m.entries) {
    if (e.path.find('\t') != std::string::npos || e.category.find('\t') != std::string::npos) {
      throw std::invalid_argument("manifest fields may not contain tabs: " + e.path);
    }
    out << e.path << '\t' << e.category << '\t' << to_string(e.split) << '\n';
  }
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path);
  DatasetManifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string kv;
      while (hs >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        if (k == "seed") m.seed = std::stoull(v);
        if (k == "sr_factor") m.sr_factor = std::stoi(v);
      }
      continue;
    }
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, '\t')) fields.push_back(f);
    if (fields.size() != 3) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected path<TAB>category<TAB>split");
    }
    m.entries.push_back({fields[0], fields[1], parse_split(fields[2])});
  }
  return m;
}

ImagePlane load_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("cannot read PNG " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG " + path + ": " + image.message);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  ImagePlane out(3, h, w, PlaneRole::HR);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return out;
}

void save_png(const ImagePlane& img, const std::string& path) {
  const int c = img.channels(), h = img.height(), w = img.width();
  if (c != 1 && c != 3) throw std::invalid_argument("save_png supports 1 or 3 channels");
  std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double v = std::clamp(img.at(ch, y, x), 0.0, 1.0) * 255.0;
        buf[(static_cast<std::size_t>(y) * w + x) * c + ch] = static_cast<png_byte>(std::nearbyint(v));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + path + ": " + image.message);
  }
}

ImagePlane crop(const ImagePlane& img, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > img.height() || left + width > img.width()) {
    throw std::out_of_range("crop window outside image");
  }
  ImagePlane out(img.channels(), height, width, img.role);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
  return out;
}

std::array<ImagePlane, 4> corner_crops(const ImagePlane& img, int size) {
  const int b = img.height() - size, r = img.width() - size;
  if (b < 0 || r < 0) throw std::invalid_argument("crop size exceeds image");
  return {crop(img, 0, 0, size, size), crop(img, 0, r, size, size), crop(img, b, 0, size, size),
          crop(img, b, r, size, size)};
}

ImagePlane pick_corner_crop(const ImagePlane& img, int size, Rng& rng) {
  auto crops = corner_crops(img, size);
  return std::move(crops[static_cast<std::size_t>(rng.uniform_int(0, 3))]);
}

namespace {

struct Shape2D {
  int kind;  // 0 rect, 1 disc, 2 stripes rect, 3 checker rect
  double x0, y0, x1, y1;
  std::array<double, 3> color, color2;
  double period, angle;
};

}  // namespace

ImagePlane render_toy_scene(int height, int width, std::uint64_t seed, double dx, double dy) {
  Rng rng(seed);
  auto color = [&rng] { return std::array<double, 3>{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)}; };
  const auto bg = color();
  const double gx = rng.uniform(-0.2, 0.2) / width, gy = rng.uniform(-0.2, 0.2) / height;
  // Shapes live on a canvas larger than the view so shifted views stay populated.
  const double margin = 16.0;
  std::vector<Shape2D> shapes;
  const int count = rng.uniform_int(5, 8);
  for (int i = 0; i < count; ++i) {
    Shape2D s{};
    s.kind = rng.uniform_int(0, 3);
    const double cx = rng.uniform(-margin, width + margin), cy = rng.uniform(-margin, height + margin);
    const double hw = rng.uniform(0.12, 0.3) * width, hh = rng.uniform(0.12, 0.3) * height;
    s.x0 = cx - hw;
    s.x1 = cx + hw;
    s.y0 = cy - hh;
    s.y1 = cy + hh;
    s.color = color();
    s.color2 = color();
    s.period = rng.uniform(3.0, 6.0);
    s.angle = rng.uniform(0.0, std::numbers::pi);
    shapes.push_back(s);
  }
  ImagePlane out(3, height, width, PlaneRole::HR);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double px = x + 0.5 + dx, py = y + 0.5 + dy;
      std::array<double, 3> v{};
      for (int c = 0; c < 3; ++c) v[c] = std::clamp(bg[c] + gx * px + gy * py, 0.0, 1.0);
      for (const auto& s : shapes) {
        bool inside = false;
        if (s.kind == 1) {
          const double rx = (s.x1 - s.x0) / 2, ry = (s.y1 - s.y0) / 2;
          const double ux = (px - (s.x0 + rx)) / rx, uy = (py - (s.y0 + ry)) / ry;
          inside = ux * ux + uy * uy <= 1.0;
        } else {
          inside = px >= s.x0 && px < s.x1 && py >= s.y0 && py < s.y1;
        }
        if (!inside) continue;
        double mix = 0.0;
        if (s.kind == 2) {
          const double u = px * std::cos(s.angle) + py * std::sin(s.angle);
          mix = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * u / s.period);
        } else if (s.kind == 3) {
          const int cell = static_cast<int>(std::floor(s.period / 1.5));
          const int ix = static_cast<int>(std::floor(px / std::max(1, cell)));
          const int iy = static_cast<int>(std::floor(py / std::max(1, cell)));
          mix = ((ix + iy) & 1) ? 1.0 : 0.0;
        }
        for (int c = 0; c < 3; ++c) v[c] = (1.0 - mix) * s.color[c] + mix * s.color2[c];
      }
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = v[c];
    }
  return out;
}

std::pair<ImagePlane, ImagePlane> toy_pair(int size, std::uint64_t seed) {
  Rng offsets(splitmix(seed));
  const double dx = offsets.uniform_int(-6, 6), dy = offsets.uniform_int(-6, 6);
  return {render_toy_scene(size, size, seed), render_toy_scene(size, size, seed, dx, dy)};
}

}  // namespace ttrd3
