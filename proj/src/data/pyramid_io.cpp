#include <png.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "msy/pyramid.hpp"

namespace msy {

namespace fs = std::filesystem;

namespace {

void write_png(const fs::path& path, const std::uint8_t* data, int h, int w, png_uint_32 format) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    throw PyramidIoError("cannot write " + path.string() + ": " + image.message);
  }
}

std::vector<std::uint8_t> read_png(const fs::path& path, png_uint_32 format, int& h, int& w) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw PyramidIoError("cannot read " + path.string() + ": " + image.message);
  }
  image.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw PyramidIoError("cannot decode " + path.string() + ": " + image.message);
  }
  h = static_cast<int>(image.height);
  w = static_cast<int>(image.width);
  return buf;
}

void write_f32z(const fs::path& path, const std::vector<float>& data) {
  const uLong raw = static_cast<uLong>(data.size() * sizeof(float));
  uLongf packed = compressBound(raw);
  std::vector<Bytef> buf(packed);
  if (compress2(buf.data(), &packed, reinterpret_cast<const Bytef*>(data.data()), raw, 6) != Z_OK) {
    throw PyramidIoError("zlib compression failed for " + path.string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(packed));
  if (!out) throw PyramidIoError("cannot write " + path.string());
}

std::vector<float> read_f32z(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PyramidIoError("cannot read " + path.string());
  std::vector<char> packed((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<float> out(count);
  uLongf size = static_cast<uLongf>(count * sizeof(float));
  if (uncompress(reinterpret_cast<Bytef*>(out.data()), &size, reinterpret_cast<const Bytef*>(packed.data()),
                 static_cast<uLong>(packed.size())) != Z_OK ||
      size != count * sizeof(float)) {
    throw PyramidIoError("corrupt float raster " + path.string());
  }
  return out;
}

}  // namespace

void write_png_rgb(const fs::path& path, const RgbImage& img) {
  if (img.c != 3) throw PyramidIoError("write_png_rgb needs 3 channels");
  std::vector<std::uint8_t> px(img.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(img.data[i]), 0L, 255L));
  }
  write_png(path, px.data(), img.h, img.w, PNG_FORMAT_RGB);
}

RgbImage read_png_rgb(const fs::path& path) {
  int h = 0, w = 0;
  const auto px = read_png(path, PNG_FORMAT_RGB, h, w);
  RgbImage img(h, w, 3);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = px[i];
  return img;
}

void write_png_gray(const fs::path& path, const Raster<std::uint8_t>& img) {
  write_png(path, img.data.data(), img.h, img.w, PNG_FORMAT_GRAY);
}

Raster<std::uint8_t> read_png_gray(const fs::path& path) {
  int h = 0, w = 0;
  auto px = read_png(path, PNG_FORMAT_GRAY, h, w);
  Raster<std::uint8_t> img(h, w, 1);
  img.data = std::move(px);
  return img;
}

void save_pyramid(const PyramidImage& img, const fs::path& dir) {
  img.validate();
  fs::create_directories(dir);
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : img.levels) {
    const std::string tag = std::to_string(l.scale);
    nlohmann::json e = {{"scale", l.scale}, {"shape", {l.rgb.h, l.rgb.w}}, {"fill", l.fill}};
    if (img.normalized) {
      e["rgb"] = "level_" + tag + ".f32z";
      write_f32z(dir / e["rgb"].get<std::string>(), l.rgb.data);
    } else {
      e["rgb"] = "level_" + tag + ".png";
      write_png_rgb(dir / e["rgb"].get<std::string>(), l.rgb);
    }
    if (l.labels) {
      e["labels"] = "labels_" + tag + ".png";
      write_png_gray(dir / e["labels"].get<std::string>(), *l.labels);
    }
    levels.push_back(e);
  }
  const nlohmann::json manifest = {{"id", img.id},
                                   {"base_size", {img.base_h, img.base_w}},
                                   {"class_count", img.class_count},
                                   {"class_names", img.class_names},
                                   {"normalized", img.normalized},
                                   {"levels", levels}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

PyramidImage load_pyramid(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw PyramidIoError("no manifest.json in " + dir.string());
  const auto m = nlohmann::json::parse(in);
  PyramidImage img;
  img.id = m.at("id").get<std::string>();
  img.base_h = m.at("base_size").at(0).get<int>();
  img.base_w = m.at("base_size").at(1).get<int>();
  img.class_count = m.at("class_count").get<int>();
  img.class_names = m.value("class_names", std::vector<std::string>{});
  img.normalized = m.value("normalized", false);
  for (const auto& e : m.at("levels")) {
    PyramidLevel l;
    l.scale = e.at("scale").get<int>();
    const int h = e.at("shape").at(0).get<int>(), w = e.at("shape").at(1).get<int>();
    const fs::path rgb = dir / e.at("rgb").get<std::string>();
    if (img.normalized) {
      l.rgb = RgbImage(h, w, 3);
      l.rgb.data = read_f32z(rgb, static_cast<std::size_t>(h) * w * 3);
    } else {
      l.rgb = read_png_rgb(rgb);
    }
    if (e.contains("labels")) l.labels = read_png_gray(dir / e.at("labels").get<std::string>());
    l.fill = e.value("fill", std::array<float, 3>{255.f, 255.f, 255.f});
    img.levels.push_back(std::move(l));
  }
  img.validate();
  return img;
}

Dataset open_dataset(const fs::path& root) {
  std::ifstream in(root / "dataset.json");
  if (!in) throw PyramidIoError("no dataset.json in " + root.string());
  const auto j = nlohmann::json::parse(in);
  Dataset d;
  d.root = root;
  d.slide_ids = j.at("slides").get<std::vector<std::string>>();
  d.info = j.value("info", nlohmann::json::object());
  return d;
}

std::vector<PyramidImage> Dataset::load_all() const {
  std::vector<PyramidImage> out;
  for (const auto& id : slide_ids) out.push_back(load_pyramid(slide_dir(id)));
  return out;
}

void write_dataset_index(const fs::path& root, const std::vector<std::string>& ids, const nlohmann::json& info) {
  fs::create_directories(root);
  std::ofstream(root / "dataset.json") << nlohmann::json{{"slides", ids}, {"info", info}}.dump(2) << "\n";
}

}  // namespace msy
