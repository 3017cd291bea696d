#include "lmliqa/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "lmliqa/errors.hpp"
#include "lmliqa/sampling.hpp"

namespace lmliqa {

namespace fs = std::filesystem;

namespace {

std::string lower_extension(const std::string& path) {
  std::string ext = fs::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

void skip_pnm_space(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ValidationError("truncated file: " + path);
  return value;
}

constexpr char kImageMagic[8] = {'L', 'M', 'L', 'Q', 'I', 'M', 'G', '1'};

}  // namespace

Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  int channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw ValidationError("unsupported PNM magic '" + magic + "' in " + path);
  }
  int width = 0, height = 0, maxval = 0;
  skip_pnm_space(in);
  in >> width;
  skip_pnm_space(in);
  in >> height;
  skip_pnm_space(in);
  in >> maxval;
  if (!in || width <= 0 || height <= 0 || maxval != 255) {
    throw ValidationError("malformed PNM header in " + path);
  }
  in.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(width) * height * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw ValidationError("truncated PNM data in " + path);
  Image img(width, height, channels);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
  return img;
}

void write_pnm(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ValidationError("PNM supports 1 or 3 channels");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write image: " + path);
  out << (image.channels == 1 ? "P5" : "P6") << '\n'
      << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

Image read_f64_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kImageMagic, 8) != 0) {
    throw ValidationError("bad float64 image magic in " + path);
  }
  const auto w = get_le<std::uint32_t>(in, path);
  const auto h = get_le<std::uint32_t>(in, path);
  const auto c = get_le<std::uint32_t>(in, path);
  if (w == 0 || h == 0 || c == 0 || w > 65536 || h > 65536 || c > 16) {
    throw ValidationError("implausible image dimensions in " + path);
  }
  Image img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (double& v : img.pixels) v = get_le<double>(in, path);
  return img;
}

void write_f64_image(const std::string& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write image: " + path);
  out.write(kImageMagic, 8);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(image.width));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(image.height));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(image.channels));
  for (double v : image.pixels) put_le<double>(out, v);
}

Image read_image(const std::string& path) {
  const auto ext = lower_extension(path);
  if (ext == ".f64") return read_f64_image(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
  throw ValidationError("unsupported image extension '" + ext + "' for " + path);
}

void write_image(const std::string& path, const Image& image) {
  const auto ext = lower_extension(path);
  if (ext == ".f64") {
    write_f64_image(path, image);
  } else if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    write_pnm(path, image);
  } else {
    throw ValidationError("unsupported image extension '" + ext + "' for " + path);
  }
}

std::string to_string(DistortionKind kind) {
  return kind == DistortionKind::gaussian_blur ? "gaussian_blur" : "gaussian_noise";
}

DistortionKind distortion_kind_from_string(const std::string& name) {
  if (name == "gaussian_blur" || name == "blur") return DistortionKind::gaussian_blur;
  if (name == "gaussian_noise" || name == "noise") return DistortionKind::gaussian_noise;
  throw ValidationError("unknown distortion kind '" + name + "'");
}

DistortionSpec DistortionLevels::spec(DistortionKind kind, int level) const {
  const auto& sigmas = kind == DistortionKind::gaussian_blur ? blur_sigmas : noise_sigmas;
  if (level < 1 || level > static_cast<int>(sigmas.size())) {
    throw ValidationError("distortion level " + std::to_string(level) + " outside 1.." +
                          std::to_string(sigmas.size()));
  }
  return {kind, level, sigmas[level - 1]};
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw ValidationError("distortion sigma must be finite and non-negative");
  }
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= sum;
  return k;
}

namespace {

// Mirror with edge repeat: ... b a | a b c ... c b a | a ...
int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// out = x_c + sum_k w_k (x_k - x_c) keeps constant signals exactly fixed.
Image blur_axis(const Image& in, const std::vector<double>& k, bool horizontal) {
  const int radius = static_cast<int>(k.size() / 2);
  Image out(in.width, in.height, in.channels);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        const double center = in.at(y, x, c);
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const double v = horizontal ? in.at(y, mirror(x + t, in.width), c)
                                      : in.at(mirror(y + t, in.height), x, c);
          acc += k[t + radius] * (v - center);
        }
        out.at(y, x, c) = center + acc;
      }
    }
  }
  return out;
}

}  // namespace

Image apply_distortion(const Image& image, const DistortionSpec& spec, std::mt19937_64& rng) {
  if (!(spec.sigma >= 0.0) || !std::isfinite(spec.sigma)) {
    throw ValidationError("distortion sigma must be finite and non-negative");
  }
  if (spec.sigma == 0.0) return image;
  if (spec.kind == DistortionKind::gaussian_blur) {
    const auto k = gaussian_kernel(spec.sigma);
    return blur_axis(blur_axis(image, k, true), k, false);
  }
  Image out = image;
  std::normal_distribution<double> noise(0.0, spec.sigma);
  for (double& v : out.pixels) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return out;
}

double synth_mos(int level, int level_count) {
  if (level_count < 1 || level < 0 || level > level_count) {
    throw ValidationError("level " + std::to_string(level) + " outside 0.." +
                          std::to_string(level_count));
  }
  return 100.0 * (1.0 - static_cast<double>(level) / (level_count + 1));
}

namespace {

// Bilinear upsampling of a g x g random field to size x size.
std::vector<double> smooth_field(int g, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> grid(static_cast<std::size_t>(g + 1) * (g + 1));
  for (double& v : grid) v = u(rng);
  std::vector<double> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double fy = static_cast<double>(y) / size * g;
    const int y0 = static_cast<int>(fy);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / size * g;
      const int x0 = static_cast<int>(fx);
      const double wx = fx - x0;
      const double a = grid[y0 * (g + 1) + x0] * (1 - wx) + grid[y0 * (g + 1) + x0 + 1] * wx;
      const double b =
          grid[(y0 + 1) * (g + 1) + x0] * (1 - wx) + grid[(y0 + 1) * (g + 1) + x0 + 1] * wx;
      out[y * size + x] = a * (1 - wy) + b * wy;
    }
  }
  return out;
}

}  // namespace

std::vector<Image> generate_pristine(int count, int size, std::uint64_t seed, int channels) {
  if (count < 0) throw ValidationError("count must be non-negative");
  if (size < 2) throw ValidationError("image size must be at least 2");
  if (channels != 1 && channels != 3) throw ValidationError("channels must be 1 or 3");
  std::vector<Image> images;
  images.reserve(count);
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(size, size, channels);

    double c0[3], c1[3], tint[3];
    for (int c = 0; c < 3; ++c) {
      c0[c] = 0.15 + 0.7 * u(rng);
      c1[c] = 0.15 + 0.7 * u(rng);
      tint[c] = 0.6 + 0.8 * u(rng);
    }
    const double angle = 2.0 * std::numbers::pi * u(rng);
    const double gx = std::cos(angle), gy = std::sin(angle);

    const auto low = smooth_field(2 + static_cast<int>(u(rng) * 4), size, rng);
    // Texture stays faint and coarser than the noise levels so that the two
    // are not confused on a single crop.
    const auto fine = smooth_field(std::max(1, size / 8), size, rng);
    const double low_amp = 0.1 + 0.2 * u(rng);
    const double fine_amp = 0.018 + 0.03 * u(rng);

    const double period = 8.0 + 8.0 * u(rng);
    const double stripe_angle = std::numbers::pi * u(rng);
    const double sx = std::cos(stripe_angle), sy = std::sin(stripe_angle);
    const double stripe_amp = 0.08 + 0.2 * u(rng);
    const bool checker = u(rng) < 0.4;

    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double t = 0.5 + ((x - size / 2.0) * gx + (y - size / 2.0) * gy) / size;
        double pattern;
        if (checker) {
          const int cx = static_cast<int>(std::floor(x / period));
          const int cy = static_cast<int>(std::floor(y / period));
          pattern = ((cx + cy) % 2 == 0) ? 1.0 : -1.0;
        } else {
          pattern = std::sin(2.0 * std::numbers::pi * (x * sx + y * sy) / period);
        }
        const double lum = low_amp * low[y * size + x] + fine_amp * fine[y * size + x] +
                           stripe_amp * pattern;
        for (int c = 0; c < channels; ++c) {
          const double base = (1 - t) * c0[c] + t * c1[c];
          img.at(y, x, c) = base + lum * (channels == 3 ? tint[c] : 1.0);
        }
      }
    }

    const int shapes = 2 + static_cast<int>(u(rng) * 4);
    for (int s = 0; s < shapes; ++s) {
      const double cx = u(rng) * size, cy = u(rng) * size;
      const double r = size * (0.06 + 0.16 * u(rng));
      const bool circle = u(rng) < 0.5;
      double color[3];
      for (double& c : color) c = u(rng);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const bool inside =
              circle ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= r * 0.7;
          if (!inside) continue;
          for (int c = 0; c < channels; ++c) {
            img.at(y, x, c) = 0.5 * img.at(y, x, c) + 0.5 * color[channels == 3 ? c : 0];
          }
        }
      }
    }
    for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
    images.push_back(std::move(img));
  }
  return images;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
  return out;
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("manifest is empty: " + path);
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  if (!col.count("path") || !col.count("mos")) {
    throw ValidationError("manifest header must contain path,mos: " + path);
  }
  const fs::path base = fs::path(path).parent_path();

  DatasetManifest m;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    auto where = [&] { return path + " line " + std::to_string(line_no); };
    if (fields.size() != header.size()) {
      throw ValidationError("malformed row at " + where() + ": expected " +
                            std::to_string(header.size()) + " fields, got " +
                            std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.path = fields[col["path"]];
    if (e.path.empty()) throw ValidationError("empty path at " + where());
    if (fs::path(e.path).is_relative()) e.path = (base / e.path).string();
    try {
      std::size_t used = 0;
      e.mos = std::stod(fields[col["mos"]], &used);
      if (used != fields[col["mos"]].size() || !std::isfinite(e.mos)) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ValidationError("non-numeric MOS '" + fields[col["mos"]] + "' at " + where());
    }
    try {
      if (col.count("kind") && !fields[col["kind"]].empty()) {
        e.kind = distortion_kind_from_string(fields[col["kind"]]);
      }
      if (col.count("level") && !fields[col["level"]].empty()) {
        e.level = std::stoi(fields[col["level"]]);
      }
      if (col.count("source") && !fields[col["source"]].empty()) {
        e.source = std::stoi(fields[col["source"]]);
      }
    } catch (const ValidationError& err) {
      throw ValidationError(std::string(err.what()) + " at " + where());
    } catch (const std::exception&) {
      throw ValidationError("malformed row at " + where());
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest: " + path);
  const fs::path base = fs::path(path).parent_path();
  out << "path,mos,kind,level,source\n";
  out.precision(17);
  for (const auto& e : manifest.entries) {
    std::string p = e.path;
    if (!base.empty()) {
      const auto rel = fs::path(p).lexically_relative(base);
      if (!rel.empty() && rel.string().rfind("..", 0) != 0) p = rel.string();
    }
    out << p << ',' << e.mos << ',' << (e.kind ? to_string(*e.kind) : "") << ','
        << (e.level ? std::to_string(*e.level) : "") << ','
        << (e.source ? std::to_string(*e.source) : "") << '\n';
  }
}

DatasetManifest split(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("split ratio must lie in [0, 1]");
  // Groups keyed by source; entries without one get a unique group.
  std::map<long long, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& s = manifest.entries[i].source;
    const long long key = s ? static_cast<long long>(*s) : -1LL - static_cast<long long>(i);
    groups[key].push_back(i);
  }
  std::vector<std::vector<std::size_t>> ordered;
  for (auto& [key, members] : groups) ordered.push_back(std::move(members));
  std::mt19937_64 rng(seed);
  std::shuffle(ordered.begin(), ordered.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * ordered.size()));

  DatasetManifest out = manifest;
  out.train.clear();
  out.test.clear();
  for (std::size_t g = 0; g < ordered.size(); ++g) {
    auto& dst = g < n_train ? out.train : out.test;
    dst.insert(dst.end(), ordered[g].begin(), ordered[g].end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

Dataset build_synthetic_dataset(const SyntheticConfig& config) {
  const int levels = config.levels.level_count();
  if (static_cast<int>(config.levels.noise_sigmas.size()) != levels) {
    throw ValidationError("blur and noise level lists must have equal length");
  }
  const auto pristine =
      generate_pristine(config.pristine_count, config.image_size, config.seed, config.channels);
  Dataset ds;
  const DistortionKind kinds[] = {DistortionKind::gaussian_blur, DistortionKind::gaussian_noise};
  std::uint64_t stream = 0;
  for (int p = 0; p < config.pristine_count; ++p) {
    for (auto kind : kinds) {
      for (int level = 1; level <= levels; ++level) {
        const auto spec = config.levels.spec(kind, level);
        std::mt19937_64 rng(derive_seed(config.seed ^ 0xd15701ULL, stream++));
        ds.images.push_back(apply_distortion(pristine[p], spec, rng));
        ManifestEntry e;
        char name[64];
        std::snprintf(name, sizeof(name), "img_%03d_%s_%d", p,
                      kind == DistortionKind::gaussian_blur ? "blur" : "noise", level);
        e.path = name;
        e.mos = synth_mos(level, levels);
        e.kind = kind;
        e.level = level;
        e.source = p;
        ds.manifest.entries.push_back(std::move(e));
      }
    }
  }
  return ds;
}

Dataset load_dataset(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.images.reserve(ds.manifest.entries.size());
  for (const auto& e : ds.manifest.entries) ds.images.push_back(read_image(e.path));
  return ds;
}

void write_dataset(const std::string& dir, const Dataset& dataset, const std::string& extension) {
  fs::create_directories(fs::path(dir) / "images");
  DatasetManifest m = dataset.manifest;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const std::string stem = fs::path(m.entries[i].path).stem().string();
    const fs::path file = fs::path(dir) / "images" / (stem + extension);
    write_image(file.string(), dataset.images[i]);
    m.entries[i].path = file.string();
  }
  save_manifest((fs::path(dir) / "manifest.csv").string(), m);
}

}  // namespace lmliqa
