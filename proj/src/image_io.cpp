#include "road/image_io.hpp"

#include "road/errors.hpp"

#include <png.h>

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <mutex>

namespace road {

namespace {

std::mutex observer_mutex;
ReadObserver observer;

void notify(const std::filesystem::path& path) {
  std::lock_guard lock(observer_mutex);
  if (observer) observer(path);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

// libpng reports errors by longjmp back to the setjmp in the caller; the
// message is stashed here so the caller can throw after unwinding C frames.
thread_local std::string png_message;

void png_error_handler(png_structp png, png_const_charp message) {
  png_message = message ? message : "libpng error";
  png_longjmp(png, 1);
}
void png_warning_handler(png_structp, png_const_charp) {}

struct MemoryWriter {
  std::vector<std::uint8_t>* out;
};

void write_to_memory(png_structp png, png_bytep data, png_size_t length) {
  auto* writer = static_cast<MemoryWriter*>(png_get_io_ptr(png));
  writer->out->insert(writer->out->end(), data, data + length);
}

void flush_noop(png_structp) {}

// Writes 8-bit rows with either a FILE or memory sink.
void write_png(std::FILE* file, std::vector<std::uint8_t>* memory, int width, int height, int channels,
               const std::uint8_t* pixels, const std::string& what) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw IoError("png_create_write_struct failed for " + what);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};
  MemoryWriter writer{memory};
  if (setjmp(png_jmpbuf(png))) throw IoError("failed writing " + what + ": " + png_message);
  {
    if (file) {
      png_init_io(png, file);
    } else {
      png_set_write_fn(png, &writer, write_to_memory, flush_noop);
    }
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    for (int y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(pixels + static_cast<std::size_t>(y) * stride));
    }
    png_write_end(png, nullptr);
  }
}

struct MemoryReader {
  const std::vector<std::uint8_t>* in;
  std::size_t offset;
};

void read_from_memory(png_structp png, png_bytep data, png_size_t length) {
  auto* reader = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (reader->offset + length > reader->in->size()) png_error(png, "truncated buffer");
  std::copy_n(reader->in->data() + reader->offset, length, data);
  reader->offset += length;
}

// Reads 8-bit rows from either a FILE or memory source.
std::vector<std::uint8_t> read_png(std::FILE* file, const std::vector<std::uint8_t>* memory, int expected_channels,
                                   int& width, int& height, const std::string& what) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw IoError("png_create_read_struct failed for " + what);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};
  std::vector<std::uint8_t> pixels;
  MemoryReader reader{memory, 0};
  if (setjmp(png_jmpbuf(png))) throw IoError("failed reading " + what + ": " + png_message);
  if (file) {
    png_init_io(png, file);
  } else {
    png_set_read_fn(png, &reader, read_from_memory);
  }
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  const int channels = png_get_channels(png, info);
  const bool ok = bit_depth == 8 &&
                  ((expected_channels == 3 && color == PNG_COLOR_TYPE_RGB && channels == 3) ||
                   (expected_channels == 1 && color == PNG_COLOR_TYPE_GRAY && channels == 1));
  if (!ok) throw IoError("failed reading " + what + ": unexpected PNG format");
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  pixels.resize(stride * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) png_read_row(png, pixels.data() + static_cast<std::size_t>(y) * stride, nullptr);
  png_read_end(png, nullptr);
  return pixels;
}

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int expected_channels, int& width, int& height) {
  notify(path);
  File f = open_file(path, "rb");
  return read_png(f.get(), nullptr, expected_channels, width, height, path.string());
}

}  // namespace

void set_read_observer(ReadObserver fn) {
  std::lock_guard lock(observer_mutex);
  observer = std::move(fn);
}

void write_rgb_png(const std::filesystem::path& path, const RgbImage& image) {
  File f = open_file(path, "wb");
  write_png(f.get(), nullptr, image.width, image.height, 3, image.pixels.data(), path.string());
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  File f = open_file(path, "wb");
  write_png(f.get(), nullptr, labels.width, labels.height, 1, labels.labels.data(), path.string());
}

std::vector<std::uint8_t> encode_label_png(const LabelMap& labels) {
  std::vector<std::uint8_t> bytes;
  write_png(nullptr, &bytes, labels.width, labels.height, 1, labels.labels.data(), "label buffer");
  return bytes;
}

LabelMap decode_label_png(const std::vector<std::uint8_t>& bytes) {
  LabelMap labels;
  labels.labels = read_png(nullptr, &bytes, 1, labels.width, labels.height, "label buffer");
  return labels;
}

RgbImage read_rgb_png(const std::filesystem::path& path) {
  RgbImage image;
  image.pixels = read_png(path, 3, image.width, image.height);
  return image;
}

LabelMap read_label_png(const std::filesystem::path& path) {
  LabelMap labels;
  labels.labels = read_png(path, 1, labels.width, labels.height);
  return labels;
}

}  // namespace road
