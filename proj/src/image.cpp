#include "forceworld/image.hpp"

#include <png.h>

#include <cstring>
#include <memory>
#include <vector>

#include "forceworld/errors.hpp"
#include "forceworld/util.hpp"

namespace forceworld::image {

namespace {

// libpng reports errors by longjmp; the message is stashed here first.
void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  *err = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

struct Reader {
  const std::string* bytes;
  size_t pos;
};

}  // namespace

std::string encode_png(const torch::Tensor& frame) {
  if (frame.dim() != 3 || frame.size(0) != 3) throw ShapeError("png encoding needs a (3, H, W) frame");
  const int h = static_cast<int>(frame.size(1)), w = static_cast<int>(frame.size(2));
  auto rgb = (frame.to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("png: " + err);
  }
  {
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
          static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
        },
        nullptr);
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto* base = rgb.data_ptr<uint8_t>();
    for (int i = 0; i < h; ++i) png_write_row(png, base + static_cast<size_t>(i) * w * 3);
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

torch::Tensor decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw FormatError("not a PNG image", 0);
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  Reader reader{&bytes, 0};
  // Decoded into a plain buffer so nothing with a destructor spans the longjmp.
  static thread_local std::vector<uint8_t> pixels;
  static thread_local std::vector<png_bytep> rows;
  static thread_local int dims[2];
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: " + err, static_cast<long long>(reader.pos));
  }
  {
    png_set_read_fn(png, &reader, [](png_structp p, png_bytep data, png_size_t len) {
      auto* r = static_cast<Reader*>(png_get_io_ptr(p));
      if (r->pos + len > r->bytes->size()) png_error(p, "truncated data");
      std::memcpy(data, r->bytes->data() + r->pos, len);
      r->pos += len;
    });
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int w = static_cast<int>(png_get_image_width(png, info));
    if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) png_error(png, "unsupported pixel layout");
    pixels.assign(static_cast<size_t>(h) * w * 3, 0);
    dims[0] = h;
    dims[1] = w;
    rows.resize(h);
    for (int i = 0; i < h; ++i) rows[i] = pixels.data() + static_cast<size_t>(i) * w * 3;
    png_read_image(png, rows.data());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  auto rgb = torch::from_blob(pixels.data(), {dims[0], dims[1], 3}, torch::kUInt8);
  return rgb.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& frame) {
  util::write_text_atomic(path, encode_png(frame));
}

}  // namespace forceworld::image
