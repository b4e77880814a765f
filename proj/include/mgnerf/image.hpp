// In-memory images (row-major, interleaved channels, values in [0,1]) and
// 8-bit PNG I/O through libpng's simplified API. Display conversion is a
// plain clamp-and-round; no gamma.
#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "mgnerf/errors.hpp"

namespace mgnerf {

struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(size_t(w) * h * c, fill) {}

    double& at(int x, int y, int c) { return data[(size_t(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(size_t(y) * width + x) * channels + c]; }
    size_t pixel_count() const { return size_t(width) * height; }
};

inline uint8_t to_byte(double v) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return uint8_t(c * 255.0 + 0.5);
}

inline void write_png(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3 && img.channels != 4)
        throw ArgumentError("write_png: channels must be 1, 3 or 4");
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = png_uint_32(img.width);
    pi.height = png_uint_32(img.height);
    pi.format = img.channels == 1 ? PNG_FORMAT_GRAY
                                  : (img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA);
    std::vector<uint8_t> bytes(img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i) bytes[i] = to_byte(img.data[i]);

    // Write-then-rename so readers never observe partial files.
    std::string tmp = path + ".tmp";
    if (!png_image_write_to_file(&pi, tmp.c_str(), 0, bytes.data(), 0, nullptr))
        throw DataError("write_png: " + path + ": " + pi.message);
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("write_png: cannot rename into place: " + path);
}

// Reads any PNG as the requested channel count (1, 3 or 4).
inline Image read_png(const std::string& path, int channels) {
    if (channels != 1 && channels != 3 && channels != 4)
        throw ArgumentError("read_png: channels must be 1, 3 or 4");
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str()))
        throw DataError("read_png: " + path + ": " + pi.message);
    pi.format = PNG_FORMAT_RGBA;
    std::vector<uint8_t> bytes(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr))
        throw DataError("read_png: " + path + ": " + pi.message);

    Image img(int(pi.width), int(pi.height), channels);
    const size_t n = img.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        const uint8_t* px = &bytes[p * 4];
        if (channels == 1) {
            img.data[p] = px[0] / 255.0;
        } else {
            for (int c = 0; c < channels; ++c) img.data[p * channels + c] = px[c] / 255.0;
        }
    }
    return img;
}

}  // namespace mgnerf
