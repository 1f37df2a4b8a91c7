#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "fedsim/data.hpp"

namespace fedsim {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Big-endian u32 at byte offset.
std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (bytes.size() < offset + 4)
    throw IdxError(IdxError::Kind::truncated, path.string() + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void expect_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": bad magic 0x%08x (expected 0x%08x)", got, want);
    throw IdxError(IdxError::Kind::bad_magic, path.string() + buf);
  }
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, int num_classes) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);

  expect_magic(read_be32(images, 0, images_path), kImageMagic, images_path);
  expect_magic(read_be32(labels, 0, labels_path), kLabelMagic, labels_path);

  const std::size_t n_images = read_be32(images, 4, images_path);
  const std::size_t rows = read_be32(images, 8, images_path);
  const std::size_t cols = read_be32(images, 12, images_path);
  const std::size_t n_labels = read_be32(labels, 4, labels_path);

  if (n_images != n_labels)
    throw IdxError(IdxError::Kind::count_mismatch,
                   "image count " + std::to_string(n_images) + " != label count " +
                       std::to_string(n_labels));
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + n_images * pixels)
    throw IdxError(IdxError::Kind::truncated, images_path.string() + ": truncated pixel data");
  if (labels.size() < 8 + n_labels)
    throw IdxError(IdxError::Kind::truncated, labels_path.string() + ": truncated label data");

  Matrix features(static_cast<Eigen::Index>(n_images), static_cast<Eigen::Index>(pixels));
  const std::uint8_t* px = images.data() + 16;
  for (std::size_t i = 0; i < n_images; ++i)
    for (std::size_t p = 0; p < pixels; ++p)
      features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
          static_cast<double>(px[i * pixels + p]) / 255.0;

  std::vector<Label> ys(labels.begin() + 8, labels.begin() + 8 + static_cast<std::ptrdiff_t>(n_labels));
  if (num_classes == 0 && !ys.empty())
    num_classes = *std::max_element(ys.begin(), ys.end()) + 1;
  return Dataset(std::move(features), std::move(ys), num_classes);
}

}  // namespace fedsim
