#include "artsurf/image.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include <png.h>

#include "artsurf/errors.hpp"

namespace artsurf {

void save_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw RuntimeFailure("save_png: only 1- or 3-channel images supported");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw RuntimeFailure("cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    std::fclose(fp);
    png_destroy_write_struct(&png, &info);
    throw RuntimeFailure("libpng write failure: " + path);
  }
  png_init_io(png, fp);
  // Fixed settings so identical inputs give identical bytes.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, img.width, img.height, 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double v = img.at(x, y, c);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        row[static_cast<size_t>(x) * img.channels + c] =
            static_cast<uint8_t>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw ValidationError("cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    std::fclose(fp);
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("libpng read failure: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w, h;
  int bit_depth, color_type;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image img(static_cast<int>(w), static_cast<int>(h), 3);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(static_cast<int>(x), static_cast<int>(y), c) =
            row[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

void save_depth(const std::string& path, const Image& depth) {
  if (depth.channels != 1) throw RuntimeFailure("save_depth: expected 1-channel image");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw RuntimeFailure("cannot open for write: " + path);
  const char magic[4] = {'R', 'A', 'D', 'P'};
  uint32_t w = depth.width, h = depth.height;
  std::fwrite(magic, 1, 4, fp);
  std::fwrite(&w, 4, 1, fp);
  std::fwrite(&h, 4, 1, fp);
  std::vector<float> buf(depth.data.begin(), depth.data.end());
  std::fwrite(buf.data(), 4, buf.size(), fp);
  std::fclose(fp);
}

Image load_depth(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw ValidationError("cannot open depth file: " + path);
  char magic[4];
  uint32_t w = 0, h = 0;
  if (std::fread(magic, 1, 4, fp) != 4 || std::memcmp(magic, "RADP", 4) != 0 ||
      std::fread(&w, 4, 1, fp) != 1 || std::fread(&h, 4, 1, fp) != 1) {
    std::fclose(fp);
    throw ValidationError("bad depth file header: " + path);
  }
  Image img(static_cast<int>(w), static_cast<int>(h), 1);
  std::vector<float> buf(img.pixel_count());
  if (std::fread(buf.data(), 4, buf.size(), fp) != buf.size()) {
    std::fclose(fp);
    throw ValidationError("truncated depth file: " + path);
  }
  std::fclose(fp);
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i];
  return img;
}

double mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ValidationError("mse: image dimensions differ");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
  double m = mse(a, b);
  if (m <= 0) return 99.0;
  return 10.0 * std::log10(1.0 / m);
}

}  // namespace artsurf
