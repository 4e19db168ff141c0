#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hiper/errors.hpp"

namespace hiper {

// RGB image, row-major HxWx3, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Snap every channel to the 8-bit grid k/255.
inline void quantize(Image& img) {
  for (auto& v : img.pixels) v = to_byte(v) / 255.0;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("ppm: cannot write " + path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> bytes(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Single-channel map in [0, 1], HxW.
inline void write_pgm(const std::string& path, std::size_t height, std::size_t width, const std::vector<double>& gray) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pgm: cannot write " + path);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  std::vector<char> bytes(gray.size());
  std::transform(gray.begin(), gray.end(), bytes.begin(), [](double v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw FormatError("pnm: truncated header");
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("ppm: cannot read " + path);
  if (detail::next_token(in) != "P6") throw FormatError("ppm: " + path + " is not binary P6");
  const auto w = std::stoul(detail::next_token(in));
  const auto h = std::stoul(detail::next_token(in));
  const auto maxval = std::stoul(detail::next_token(in));
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
  in.get();
  std::vector<unsigned char> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw FormatError("ppm: truncated pixel data in " + path);
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("pgm: cannot read " + path);
  if (detail::next_token(in) != "P5") throw FormatError("pgm: " + path + " is not binary P5");
  GrayImage g;
  g.width = std::stoul(detail::next_token(in));
  g.height = std::stoul(detail::next_token(in));
  if (std::stoul(detail::next_token(in)) != 255) throw FormatError("pgm: only maxval 255 is supported");
  in.get();
  g.pixels.resize(g.width * g.height);
  in.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != g.pixels.size()) throw FormatError("pgm: truncated pixel data in " + path);
  return g;
}

}  // namespace hiper
