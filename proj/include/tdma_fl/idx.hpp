#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tdma_fl/dataset.hpp"
#include "tdma_fl/errors.hpp"

namespace tdma_fl {

inline constexpr std::uint32_t idx_magic_images = 0x00000803;
inline constexpr std::uint32_t idx_magic_labels = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError(path.string() + ": cannot open");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& what)
{
    if (buf.size() < offset + 4)
        throw DataError(what + ": truncated header");
    return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
           (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline void put_be32(std::ostream& os, std::uint32_t v)
{
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                static_cast<char>(v)};
    os.write(b.data(), 4);
}

} // namespace detail

struct IdxImages {
    std::uint32_t count = 0;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<unsigned char> pixels; // count * rows * cols, row-major per image
};

inline IdxImages read_idx_images(const std::filesystem::path& path)
{
    const auto buf = detail::read_file(path);
    const std::string what = path.string();
    if (buf.empty())
        throw DataError(what + ": empty file");
    const auto magic = detail::read_be32(buf, 0, what);
    if (magic != idx_magic_images)
        throw DataError(what + ": magic is " + std::to_string(magic) + ", expected 2051 (images)");
    IdxImages img;
    img.count = detail::read_be32(buf, 4, what + " (count)");
    img.rows = detail::read_be32(buf, 8, what + " (rows)");
    img.cols = detail::read_be32(buf, 12, what + " (cols)");
    const std::size_t bytes = std::size_t{img.count} * img.rows * img.cols;
    if (buf.size() - 16 < bytes)
        throw DataError(what + ": pixel data truncated (count=" + std::to_string(img.count) + ")");
    img.pixels.assign(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(bytes));
    return img;
}

inline std::vector<unsigned char> read_idx_labels(const std::filesystem::path& path)
{
    const auto buf = detail::read_file(path);
    const std::string what = path.string();
    if (buf.empty())
        throw DataError(what + ": empty file");
    const auto magic = detail::read_be32(buf, 0, what);
    if (magic != idx_magic_labels)
        throw DataError(what + ": magic is " + std::to_string(magic) + ", expected 2049 (labels)");
    const auto count = detail::read_be32(buf, 4, what + " (count)");
    if (buf.size() - 8 < count)
        throw DataError(what + ": label data truncated (count=" + std::to_string(count) + ")");
    return {buf.begin() + 8, buf.begin() + 8 + count};
}

inline void write_idx_images(const std::filesystem::path& path, const IdxImages& img)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError(path.string() + ": cannot write");
    detail::put_be32(out, idx_magic_images);
    detail::put_be32(out, img.count);
    detail::put_be32(out, img.rows);
    detail::put_be32(out, img.cols);
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_idx_labels(const std::filesystem::path& path, const std::vector<unsigned char>& labels)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError(path.string() + ": cannot write");
    detail::put_be32(out, idx_magic_labels);
    detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

/// Images scaled to [0, 1] by /255; ten classes.
inline Dataset load_idx_dataset(const std::filesystem::path& images_path, const std::filesystem::path& labels_path)
{
    const auto img = read_idx_images(images_path);
    const auto lab = read_idx_labels(labels_path);
    if (lab.size() != img.count)
        throw DataError("count mismatch: " + images_path.string() + " has " + std::to_string(img.count) +
                        " images, " + labels_path.string() + " has " + std::to_string(lab.size()) + " labels");
    const Eigen::Index dim = static_cast<Eigen::Index>(img.rows) * img.cols;
    Dataset d;
    d.features.resize(dim, img.count);
    d.labels.resize(img.count);
    int max_label = 0;
    for (std::uint32_t i = 0; i < img.count; ++i) {
        for (Eigen::Index p = 0; p < dim; ++p)
            d.features(p, i) = img.pixels[static_cast<std::size_t>(i) * static_cast<std::size_t>(dim) +
                                          static_cast<std::size_t>(p)] /
                               255.0;
        d.labels[i] = lab[i];
        max_label = std::max<int>(max_label, lab[i]);
    }
    d.num_classes = std::max(10, max_label + 1);
    return d;
}

/// CIFAR-10 binary batches: 1 label byte followed by 3072 pixel bytes per record.
inline Dataset load_cifar10_batches(const std::vector<std::filesystem::path>& batch_paths)
{
    constexpr std::size_t record = 1 + 3072;
    std::vector<std::vector<unsigned char>> files;
    std::size_t total = 0;
    for (const auto& p : batch_paths) {
        auto buf = detail::read_file(p);
        if (buf.empty())
            throw DataError(p.string() + ": empty file");
        if (buf.size() % record != 0)
            throw DataError(p.string() + ": size " + std::to_string(buf.size()) +
                            " is not a multiple of the 3073-byte record");
        total += buf.size() / record;
        files.push_back(std::move(buf));
    }
    Dataset d;
    d.num_classes = 10;
    d.features.resize(3072, static_cast<Eigen::Index>(total));
    d.labels.reserve(total);
    Eigen::Index col = 0;
    for (const auto& buf : files) {
        for (std::size_t off = 0; off < buf.size(); off += record, ++col) {
            if (buf[off] > 9)
                throw DataError("cifar10: label byte " + std::to_string(buf[off]) + " out of range");
            d.labels.push_back(buf[off]);
            for (Eigen::Index p = 0; p < 3072; ++p)
                d.features(p, col) = buf[off + 1 + static_cast<std::size_t>(p)] / 255.0;
        }
    }
    return d;
}

} // namespace tdma_fl
