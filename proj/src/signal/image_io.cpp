#include <cstdio>
#include <memory>

#include <png.h>

#include "../ingest/csv.hpp"
#include "melon/signal.hpp"

namespace melon {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const SpectroImage& img) {
  if (img.pixels.size() != 3 * img.height * img.width || img.height == 0 || img.width == 0) {
    throw ShapeError("write_png: image buffer does not match its dimensions");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("write_png: libpng initialisation failed");
  }
  std::vector<png_byte> row(3 * img.width);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("write_png: libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) row[3 * x + c] = img.at(c, y, x);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

SpectroImage read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("read_png: libpng initialisation failed");
  }
  SpectroImage img;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("read_png: libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": expected an 8-bit RGB image");
  }
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.assign(3 * img.width * img.height, 0);
  row.resize(3 * img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.pixels[(c * img.height + y) * img.width + x] = row[3 * x + c];
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_feature_csv(const std::filesystem::path& path, const FeatureSequence& seq) {
  auto out = csv::open_out(path);
  std::string buf = "vm_mean,vm_std,angle_mean,angle_std,dom_freq,mask\n";
  for (std::size_t r = 0; r < kFeatureRows; ++r) {
    for (std::size_t c = 0; c < kFeatureCols; ++c) {
      csv::append_double(buf, seq.at(r, c));
      buf += ',';
    }
    buf += seq.mask[r] ? "1\n" : "0\n";
  }
  out << buf;
}

FeatureSequence read_feature_csv(const std::filesystem::path& path) {
  static constexpr const char* names[] = {"vm_mean", "vm_std", "angle_mean", "angle_std", "dom_freq"};
  csv::Reader reader(path, "vm_mean,vm_std,angle_mean,angle_std,dom_freq,mask");
  FeatureSequence seq;
  std::vector<std::string_view> cells;
  std::size_t r = 0;
  while (reader.next(cells, kFeatureCols + 1)) {
    if (r == kFeatureRows) throw ParseError(path.string() + ": more than 1440 feature rows", reader.row());
    for (std::size_t c = 0; c < kFeatureCols; ++c) {
      seq.values[r * kFeatureCols + c] = csv::parse_double(cells[c], names[c], reader.row());
    }
    const long m = csv::parse_int(cells[kFeatureCols], "mask", reader.row());
    if (m != 0 && m != 1) throw ParseError("mask must be 0 or 1", reader.row());
    seq.mask[r] = static_cast<std::uint8_t>(m);
    ++r;
  }
  if (r != kFeatureRows) {
    throw DataError(path.string() + ": expected 1440 feature rows, got " + std::to_string(r));
  }
  return seq;
}

}  // namespace melon
