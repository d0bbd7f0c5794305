#include "warpvos/imageio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "warpvos/errors.hpp"

namespace warpvos::imageio {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Silent handlers: failures surface as IoError with the path instead.
void png_error_quiet(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void png_warning_quiet(png_structp, png_const_charp) {}

struct PngRead {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngRead() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWrite {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWrite() { png_destroy_write_struct(&png, &info); }
};

// Decodes a PNG. With `keep_index` palette images return raw indices.
Image decode_png(const std::filesystem::path& path, bool keep_index, bool& was_palette) {
  File f = open(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());
  PngRead r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_quiet, png_warning_quiet);
  r.info = png_create_info_struct(r.png);
  if (!r.png || !r.info) throw IoError("libpng init failed for " + path.string());
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(r.png))) throw IoError("corrupt PNG: " + path.string());
  png_init_io(r.png, f.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
  const int color = png_get_color_type(r.png, r.info);
  const int depth = png_get_bit_depth(r.png, r.info);
  was_palette = color == PNG_COLOR_TYPE_PALETTE;
  if (depth == 16) png_set_strip_16(r.png);
  if (depth < 8) png_set_packing(r.png);
  if (was_palette && !keep_index) png_set_palette_to_rgb(r.png);
  if (!keep_index && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
    png_set_gray_to_rgb(r.png);
  if (!keep_index && depth < 8 && color == PNG_COLOR_TYPE_GRAY) png_set_expand_gray_1_2_4_to_8(r.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
  png_read_update_info(r.png, r.info);
  img.width = png_get_image_width(r.png, r.info);
  img.height = png_get_image_height(r.png, r.info);
  img.channels = png_get_channels(r.png, r.info);
  const auto stride = png_get_rowbytes(r.png, r.info);
  if (stride != static_cast<std::size_t>(img.width * img.channels))
    throw IoError("unsupported PNG layout: " + path.string());
  img.pixels.resize(static_cast<std::size_t>(img.height) * stride);
  rows.resize(static_cast<std::size_t>(img.height));
  for (std::int64_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * stride;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

}  // namespace

Image read_jpeg(const std::filesystem::path& path) {
  File f = open(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("corrupt JPEG " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

void write_jpeg(const Image& image, const std::filesystem::path& path, int quality) {
  if (image.channels != 3) throw UsageError("write_jpeg expects RGB");
  File f = open(path, "wb");
  jpeg_compress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    throw IoError("JPEG encode failed for " + path.string() + ": " + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f.get());
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  // Full-resolution chroma keeps thin object borders intact.
  for (int c = 0; c < 3; ++c) cinfo.comp_info[c].h_samp_factor = cinfo.comp_info[c].v_samp_factor = 1;
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(image.pixels.data() +
                                        static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

Image read_png(const std::filesystem::path& path) {
  bool palette = false;
  return decode_png(path, false, palette);
}

namespace {

void encode_png(const std::filesystem::path& path, std::int64_t width, std::int64_t height,
                int color_type, const std::uint8_t* pixels, int channels, bool with_palette) {
  File f = open(path, "wb");
  PngWrite w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_quiet, png_warning_quiet);
  w.info = png_create_info_struct(w.png);
  if (!w.png || !w.info) throw IoError("libpng init failed for " + path.string());
  std::vector<png_color> palette;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(w.png))) throw IoError("PNG encode failed for " + path.string());
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  if (with_palette) {
    for (int i = 0; i < 256; ++i) {
      auto c = palette_color(i);
      palette.push_back({c[0], c[1], c[2]});
    }
    png_set_PLTE(w.png, w.info, palette.data(), 256);
  }
  png_write_info(w.png, w.info);
  rows.resize(static_cast<std::size_t>(height));
  for (std::int64_t y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(pixels + y * width * channels);
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

}  // namespace

void write_png(const Image& image, const std::filesystem::path& path) {
  const int type = image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  if (image.channels != 1 && image.channels != 3) throw UsageError("write_png expects 1 or 3 channels");
  encode_png(path, image.width, image.height, type, image.pixels.data(), image.channels, false);
}

LabelMap read_label_png(const std::filesystem::path& path) {
  bool palette = false;
  Image img = decode_png(path, true, palette);
  if (img.channels != 1)
    throw IoError("annotation " + path.string() + " is neither indexed nor greyscale");
  LabelMap m;
  m.height = img.height;
  m.width = img.width;
  m.data = std::move(img.pixels);
  return m;
}

void write_label_png(const LabelMap& labels, const std::filesystem::path& path) {
  encode_png(path, labels.width, labels.height, PNG_COLOR_TYPE_PALETTE, labels.data.data(), 1, true);
}

Image read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(c));
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  if (ext == ".png") return read_png(path);
  throw IoError("unsupported image extension: " + path.string());
}

Tensor to_tensor(const Image& image) {
  if (image.channels != 3) throw DimensionError("to_tensor expects an RGB image");
  const std::int64_t hw = image.height * image.width;
  std::vector<float> v(static_cast<std::size_t>(3 * hw));
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      v[static_cast<std::size_t>(c * hw + i)] = image.pixels[static_cast<std::size_t>(i * 3 + c)] / 255.0f;
  return Tensor::from_floats({3, image.height, image.width}, std::move(v));
}

Image from_tensor(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw DimensionError("from_tensor expects [3,H,W]");
  Image img;
  img.height = rgb.dim(1);
  img.width = rgb.dim(2);
  img.channels = 3;
  const std::int64_t hw = img.height * img.width;
  img.pixels.resize(static_cast<std::size_t>(3 * hw));
  auto v = rgb.to_vector();
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      const double x = std::clamp(v[static_cast<std::size_t>(c * hw + i)], 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(i * 3 + c)] = static_cast<std::uint8_t>(std::lround(x * 255.0));
    }
  return img;
}

std::array<std::uint8_t, 3> palette_color(int index) {
  std::array<std::uint8_t, 3> c{0, 0, 0};
  int lab = index;
  for (int shift = 7; shift >= 0 && lab > 0; --shift) {
    for (int ch = 0; ch < 3; ++ch) c[ch] |= static_cast<std::uint8_t>(((lab >> ch) & 1) << shift);
    lab >>= 3;
  }
  return c;
}

}  // namespace warpvos::imageio
