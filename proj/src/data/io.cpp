#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "sib/data/dataset.hpp"
#include "sib/errors.hpp"

namespace sib::data {

namespace fs = std::filesystem;
using ad::Tensor;

std::vector<std::uint8_t> encode_pgm(const Tensor& image) {
  std::size_t h = 0, w = 0;
  if (image.rank() == 2) {
    h = image.dim(0);
    w = image.dim(1);
  } else if (image.rank() == 3 && image.dim(0) == 1) {
    h = image.dim(1);
    w = image.dim(2);
  } else {
    throw ShapeError("encode_pgm expects h x w or 1 x h x w, got " + ad::to_string(image.shape()));
  }
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + h * w);
  for (double v : image.data()) {
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

Tensor decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1u << 20)) throw ParseError("PGM header value too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError("expected a number in PGM header", start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError("not a binary PGM (P5)", 0);
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) throw ParseError("PGM with zero dimension", pos);
  if (maxval != 255) throw ParseError("only 8-bit PGM (maxval 255) is supported", pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("missing whitespace after PGM header", pos);
  ++pos;
  if (bytes.size() - pos < w * h) throw ParseError("truncated PGM payload", bytes.size());
  Tensor out({h, w});
  for (std::size_t i = 0; i < w * h; ++i) out[i] = static_cast<double>(bytes[pos + i]) / 255.0;
  return out;
}

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

Tensor read_pgm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_pgm(bytes);
  } catch (const ParseError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_pgm(const fs::path& path, const Tensor& image) { write_bytes(path, encode_pgm(image)); }

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < ds.classes; ++k) fs::create_directories(dir / ("class_" + std::to_string(k)));
  for (const auto& s : ds.samples) {
    const fs::path cls = dir / ("class_" + std::to_string(s.label));
    fs::create_directories(cls);
    write_pgm(cls / (s.id + ".pgm"), s.image);
    write_pgm(cls / (s.id + ".mask.pgm"), s.gt_mask);
  }
  std::string text;
  auto recipe = ds.recipe;
  recipe["classes"] = std::to_string(ds.classes);
  if (!ds.split.empty()) recipe["split"] = ds.split;
  for (const auto& [k, v] : recipe) text += k + "=" + v + "\n";
  write_bytes(dir / "recipe.txt", std::vector<std::uint8_t>(text.begin(), text.end()));
}

Dataset load_folder(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Dataset ds;
  const fs::path recipe_path = dir / "recipe.txt";
  if (fs::exists(recipe_path)) {
    std::ifstream in(recipe_path);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
      ds.recipe[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  if (auto it = ds.recipe.find("split"); it != ds.recipe.end()) {
    ds.split = it->second;
    ds.recipe.erase(it);
  }

  std::vector<std::pair<std::size_t, fs::path>> class_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("class_", 0) != 0) continue;
    const std::string digits = name.substr(6);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) {
      throw IoError("malformed class directory " + entry.path().string());
    }
    class_dirs.emplace_back(std::stoul(digits), entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  std::size_t max_class = 0;
  for (const auto& [k, path] : class_dirs) {
    max_class = std::max(max_class, k + 1);
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(path)) {
      const std::string f = e.path().filename().string();
      if (!e.is_regular_file() || e.path().extension() != ".pgm") continue;
      if (f.size() > 9 && f.compare(f.size() - 9, 9, ".mask.pgm") == 0) continue;
      images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    for (const auto& img : images) {
      const std::string id = img.stem().string();
      const fs::path mask_path = img.parent_path() / (id + ".mask.pgm");
      if (!fs::exists(mask_path)) throw IoError("missing mask for " + img.string() + ": expected " + mask_path.string());
      LabeledSample s;
      s.id = id;
      s.label = k;
      const Tensor im = read_pgm(img);
      Tensor mask = read_pgm(mask_path);
      if (im.shape() != mask.shape()) {
        throw IoError("image/mask size mismatch for " + img.string() + ": " + ad::to_string(im.shape()) + " vs " +
                      ad::to_string(mask.shape()));
      }
      double fg = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = mask[i] > 0.0 ? 1.0 : 0.0;
        fg += mask[i];
      }
      if (fg == 0) throw IoError("empty foreground mask " + mask_path.string());
      s.image = im.reshaped({1, im.dim(0), im.dim(1)});
      s.gt_mask = std::move(mask);
      ds.samples.push_back(std::move(s));
    }
  }
  // Id order keeps a saved synthetic split in generation order.
  std::stable_sort(ds.samples.begin(), ds.samples.end(),
                   [](const LabeledSample& a, const LabeledSample& b) { return a.id < b.id; });
  std::size_t declared = 0;
  if (auto it = ds.recipe.find("classes"); it != ds.recipe.end()) declared = std::stoul(it->second);
  ds.classes = std::max(declared, max_class);
  ds.recipe.erase("classes");
  if (!ds.samples.empty()) {
    const auto& shape = ds.samples.front().image.shape();
    for (const auto& s : ds.samples) {
      if (s.image.shape() != shape) throw IoError("inconsistent image size in " + dir.string() + " at " + s.id);
    }
  }
  return ds;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("empty batch");
  const auto& first = ds.samples.at(indices[0]);
  const std::size_t h = first.gt_mask.dim(0), w = first.gt_mask.dim(1), n = indices.size();
  Batch b;
  std::vector<double> x, m;
  x.reserve(n * h * w);
  m.reserve(n * h * w);
  for (std::size_t i : indices) {
    const auto& s = ds.samples.at(i);
    if (s.image.shape() != first.image.shape()) throw ShapeError("batch mixes image sizes");
    x.insert(x.end(), s.image.data().begin(), s.image.data().end());
    m.insert(m.end(), s.gt_mask.data().begin(), s.gt_mask.data().end());
    b.labels.push_back(s.label);
  }
  b.x = Tensor({n, first.image.dim(0), h, w}, std::move(x));
  b.masks = Tensor({n, h, w}, std::move(m));
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, order.size() - start);
    if (len < 2) break;
    out.push_back(make_batch(ds, std::span(order).subspan(start, len)));
  }
  return out;
}

}  // namespace sib::data
