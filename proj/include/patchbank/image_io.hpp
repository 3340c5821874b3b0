#pragma once

#include <png.h>
// clang-format off
#include <cstdio>
#include <csetjmp>
#include <jpeglib.h>
// clang-format on

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "patchbank/error.hpp"
#include "patchbank/image.hpp"

namespace patchbank {

/// 8-bit single-channel raster (ground-truth masks, debug masks).
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

inline void read_png(const std::filesystem::path& path, std::uint32_t format, int& w, int& h, std::vector<std::uint8_t>& out) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = format;
  out.assign(PNG_IMAGE_SIZE(image), 0);
  if (!png_image_finish_read(&image, nullptr, out.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  w = static_cast<int>(image.width);
  h = static_cast<int>(image.height);
}

inline void write_png(const std::filesystem::path& path, std::uint32_t format, int w, int h,
                      const std::uint8_t* data) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, data, 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

}  // namespace detail

inline Image read_rgb_png(const std::filesystem::path& path) {
  Image img;
  detail::read_png(path, PNG_FORMAT_RGB, img.width, img.height, img.pixels);
  return img;
}

inline GrayImage read_gray_png(const std::filesystem::path& path) {
  GrayImage img;
  detail::read_png(path, PNG_FORMAT_GRAY, img.width, img.height, img.pixels);
  return img;
}

namespace detail {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

inline Image read_rgb_jpeg(const std::filesystem::path& path) {
  FILE* file = std::fopen(path.string().c_str(), "rb");
  if (!file) throw IoError("cannot open '" + path.string() + "'");
  jpeg_decompress_struct cinfo;
  detail::JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw IoError("cannot decode JPEG '" + path.string() + "': " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  return img;
}

inline bool is_jpeg_path(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".jpg" || ext == ".jpeg";
}

/// PNG or JPEG by file extension.
inline Image read_image(const std::filesystem::path& path) {
  return is_jpeg_path(path) ? read_rgb_jpeg(path) : read_rgb_png(path);
}

/// Grayscale view of any readable image (channel 0 after RGB decode for JPEG).
inline GrayImage read_gray_image(const std::filesystem::path& path) {
  if (!is_jpeg_path(path)) return read_gray_png(path);
  const Image rgb = read_rgb_jpeg(path);
  GrayImage g(rgb.width, rgb.height);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) g.at(x, y) = rgb.at(x, y, 0);
  return g;
}

inline void write_rgb_png(const std::filesystem::path& path, const Image& img) {
  detail::write_png(path, PNG_FORMAT_RGB, img.width, img.height, img.pixels.data());
}

inline void write_gray_png(const std::filesystem::path& path, const GrayImage& img) {
  detail::write_png(path, PNG_FORMAT_GRAY, img.width, img.height, img.pixels.data());
}

}  // namespace patchbank
