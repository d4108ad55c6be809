#ifndef DOMPAT_DATA_HPP
#define DOMPAT_DATA_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dompat/common.hpp"
#include "dompat/tensor.hpp"

namespace dompat {

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

/// Images are N x C x H x W in raw pixel units [0, 255]; labels, when
/// present, are class indices aligned with the image axis. Immutable after
/// load; safe to share read-only.
template <typename T = float>
struct dataset {
  tensor<T> images;
  std::optional<std::vector<std::size_t>> labels;
  std::string name;

  std::size_t size() const { return images.empty() ? 0 : images.shape()[0]; }
  std::size_t channels() const { return images.shape()[1]; }
  std::size_t height() const { return images.shape()[2]; }
  std::size_t width() const { return images.shape()[3]; }
  bool labeled() const { return labels.has_value(); }
};

namespace detail {

template <typename T>
void check_pixel_range(const tensor<T>& images, const std::string& name) {
  for (T v : images.data()) {
    if (!(v >= T(0) && v <= T(255))) {
      throw io_error(io_errc::bad_payload, "dataset '" + name + "': pixel value outside [0,255]");
    }
  }
}

inline std::uint32_t read_u32be(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw io_error(io_errc::truncated, std::string("truncated file: expected ") + what);
  }
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// IDX loader (big-endian headers, unsigned-byte payload)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t k_idx_images_magic = 0x00000803;
inline constexpr std::uint32_t k_idx_labels_magic = 0x00000801;

/// Load an IDX image file (magic 0x00000803) into an N x 1 x H x W dataset,
/// optionally attaching an IDX label file (magic 0x00000801).
template <typename T = float>
dataset<T> load_idx(const std::string& images_path, const std::string& labels_path = {}) {
  std::ifstream in(images_path, std::ios::binary);
  if (!in) throw io_error(io_errc::open_failed, "cannot open '" + images_path + "'");
  const std::uint32_t magic = detail::read_u32be(in, "IDX magic");
  if (magic != k_idx_images_magic) {
    throw io_error(io_errc::bad_magic, "bad magic in '" + images_path + "': not an IDX image file");
  }
  const std::size_t n = detail::read_u32be(in, "image count");
  const std::size_t h = detail::read_u32be(in, "image height");
  const std::size_t w = detail::read_u32be(in, "image width");
  std::vector<unsigned char> raw(n * h * w);
  if (!raw.empty()) read_exact(in, raw.data(), raw.size(), "image payload");
  char extra;
  if (in.read(&extra, 1)) {
    throw io_error(io_errc::size_mismatch, "size mismatch in '" + images_path + "': payload longer than header declares");
  }

  dataset<T> ds;
  ds.name = images_path;
  ds.images = tensor<T>({n, 1, h, w});
  auto iv = ds.images.data();
  for (std::size_t i = 0; i < raw.size(); ++i) iv[i] = static_cast<T>(raw[i]);

  if (!labels_path.empty()) {
    std::ifstream lin(labels_path, std::ios::binary);
    if (!lin) throw io_error(io_errc::open_failed, "cannot open '" + labels_path + "'");
    const std::uint32_t lmagic = detail::read_u32be(lin, "IDX label magic");
    if (lmagic != k_idx_labels_magic) {
      throw io_error(io_errc::bad_magic, "bad magic in '" + labels_path + "': not an IDX label file");
    }
    const std::size_t ln = detail::read_u32be(lin, "label count");
    if (ln != n) {
      throw io_error(io_errc::count_mismatch, "label count " + std::to_string(ln) + " does not match image count " +
                                                  std::to_string(n));
    }
    std::vector<unsigned char> lraw(ln);
    if (!lraw.empty()) read_exact(lin, lraw.data(), lraw.size(), "label payload");
    ds.labels = std::vector<std::size_t>(lraw.begin(), lraw.end());
  }
  detail::check_pixel_range(ds.images, ds.name);
  return ds;
}

/// Write an N x 1 x H x W dataset as IDX files (images rounded to bytes).
/// Inverse of load_idx; used to stage synthetic datasets for the CLI.
template <typename T>
void save_idx(const dataset<T>& ds, const std::string& images_path, const std::string& labels_path = {}) {
  if (ds.channels() != 1) throw std::invalid_argument("save_idx: IDX holds single-channel images");
  std::ofstream out(images_path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(io_errc::open_failed, "cannot open '" + images_path + "' for writing");
  auto wr_be = [&out](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  wr_be(k_idx_images_magic);
  wr_be(static_cast<std::uint32_t>(ds.size()));
  wr_be(static_cast<std::uint32_t>(ds.height()));
  wr_be(static_cast<std::uint32_t>(ds.width()));
  for (T v : ds.images.data()) {
    const long r = std::lround(static_cast<double>(v));
    out.put(static_cast<char>(std::clamp(r, 0L, 255L)));
  }
  if (!out) throw io_error(io_errc::write_failed, "write failed for '" + images_path + "'");
  if (!labels_path.empty()) {
    if (!ds.labeled()) throw std::invalid_argument("save_idx: dataset has no labels");
    std::ofstream lout(labels_path, std::ios::binary | std::ios::trunc);
    if (!lout) throw io_error(io_errc::open_failed, "cannot open '" + labels_path + "' for writing");
    unsigned char b[4] = {0, 0, 0x08, 0x01};
    lout.write(reinterpret_cast<const char*>(b), 4);
    const std::uint32_t n = static_cast<std::uint32_t>(ds.size());
    unsigned char nb[4] = {static_cast<unsigned char>(n >> 24), static_cast<unsigned char>(n >> 16),
                           static_cast<unsigned char>(n >> 8), static_cast<unsigned char>(n)};
    lout.write(reinterpret_cast<const char*>(nb), 4);
    for (std::size_t l : *ds.labels) lout.put(static_cast<char>(l));
    if (!lout) throw io_error(io_errc::write_failed, "write failed for '" + labels_path + "'");
  }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary loader (3073-byte records: label byte + planar RGB)
// ---------------------------------------------------------------------------

inline constexpr std::size_t k_cifar_record = 3073;

template <typename T = float>
dataset<T> load_cifar_binary(const std::vector<std::string>& paths) {
  std::vector<unsigned char> bytes;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw io_error(io_errc::open_failed, "cannot open '" + path + "'");
    const auto sz = static_cast<std::size_t>(in.tellg());
    if (sz % k_cifar_record != 0) {
      throw io_error(io_errc::size_mismatch,
                     "'" + path + "': length " + std::to_string(sz) + " is not a multiple of 3073");
    }
    in.seekg(0);
    const std::size_t off = bytes.size();
    bytes.resize(off + sz);
    if (sz > 0) read_exact(in, bytes.data() + off, sz, "CIFAR records");
  }
  const std::size_t n = bytes.size() / k_cifar_record;
  dataset<T> ds;
  ds.name = paths.empty() ? "cifar" : paths.front();
  ds.images = tensor<T>({n, 3, 32, 32});
  ds.labels = std::vector<std::size_t>(n);
  auto iv = ds.images.data();
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = &bytes[r * k_cifar_record];
    (*ds.labels)[r] = rec[0];
    for (std::size_t i = 0; i < 3072; ++i) iv[r * 3072 + i] = static_cast<T>(rec[1 + i]);
  }
  detail::check_pixel_range(ds.images, ds.name);
  return ds;
}

template <typename T = float>
dataset<T> load_cifar_binary(const std::string& path) {
  return load_cifar_binary<T>(std::vector<std::string>{path});
}

// ---------------------------------------------------------------------------
// split / gather / batches
// ---------------------------------------------------------------------------

/// Materialize the selected samples (and labels) in the given order.
template <typename T>
dataset<T> subset(const dataset<T>& ds, const std::vector<std::size_t>& indices, std::string name = {}) {
  const std::size_t c = ds.channels(), h = ds.height(), w = ds.width();
  const std::size_t stride = c * h * w;
  dataset<T> out;
  out.name = name.empty() ? ds.name : std::move(name);
  out.images = tensor<T>({indices.size(), c, h, w});
  auto src = ds.images.data();
  auto dst = out.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw std::invalid_argument("subset: index out of range");
    std::copy_n(&src[indices[i] * stride], stride, &dst[i * stride]);
  }
  if (ds.labels) {
    std::vector<std::size_t> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) labels[i] = (*ds.labels)[indices[i]];
    out.labels = std::move(labels);
  }
  return out;
}

/// Images at `indices` as one NCHW batch tensor.
template <typename T>
tensor<T> gather(const dataset<T>& ds, const std::vector<std::size_t>& indices) {
  return subset(ds, indices).images;
}

/// Seeded random partition into train/test. The train side receives
/// round(N * train_fraction) samples; union equals the original set.
template <typename T>
std::pair<dataset<T>, dataset<T>> split(const dataset<T>& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train_fraction must lie strictly between 0 and 1");
  }
  const std::size_t n = ds.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng_stream rng(seed);
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(
      std::clamp<long long>(std::llround(static_cast<double>(n) * train_fraction), 0, static_cast<long long>(n)));
  std::vector<std::size_t> train_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return {subset(ds, train_idx, ds.name + "/train"), subset(ds, test_idx, ds.name + "/test")};
}

/// Index batches for one epoch: a seeded shuffle of [0, n) cut into chunks
/// of b (last chunk may be short). The per-epoch shuffle seed is
/// seed XOR epoch, so any epoch is reproducible without storing
/// permutations.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t b, std::uint64_t seed,
                                                           std::uint64_t epoch) {
  if (b < 1) throw std::invalid_argument("batches: batch size must be >= 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng_stream rng(seed ^ epoch);
  rng.shuffle(idx);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += b) {
    const std::size_t take = std::min(b, n - at);
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                     idx.begin() + static_cast<std::ptrdiff_t>(at + take));
  }
  return out;
}

/// Stateful view over epoch_batches: next() walks the current epoch and
/// reshuffles at each epoch boundary.
class batch_iterator {
 public:
  batch_iterator(std::size_t n, std::size_t b, std::uint64_t seed) : n_(n), b_(b), seed_(seed) {
    if (b < 1) throw std::invalid_argument("batches: batch size must be >= 1");
    current_ = epoch_batches(n_, b_, seed_, epoch_);
  }

  /// Next index batch, rolling over to a freshly shuffled epoch when the
  /// current one is exhausted. Empty only when the dataset is empty.
  std::vector<std::size_t> next() {
    if (n_ == 0) return {};
    if (at_ >= current_.size()) {
      ++epoch_;
      at_ = 0;
      current_ = epoch_batches(n_, b_, seed_, epoch_);
    }
    return current_[at_++];
  }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return current_.size(); }

 private:
  std::size_t n_, b_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t at_ = 0;
  std::vector<std::vector<std::size_t>> current_;
};

template <typename T>
batch_iterator batches(const dataset<T>& ds, std::size_t b, std::uint64_t seed) {
  return batch_iterator(ds.size(), b, seed);
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

enum class proxy_kind { uniform_noise, gaussian_blobs, stripe_textures };

struct image_shape {
  std::size_t c = 1, h = 28, w = 28;
};

namespace detail {

template <typename T>
void clamp_pixels(tensor<T>& images) {
  for (auto& v : images.data()) v = std::min(T(255), std::max(T(0), v));
}

// Grayscale value broadcast across channels at (row, col).
template <typename T>
void put_pixel(std::span<T> img, const image_shape& s, std::size_t row, std::size_t col, double v) {
  for (std::size_t c = 0; c < s.c; ++c) img[(c * s.h + row) * s.w + col] = static_cast<T>(v);
}

}  // namespace detail

/// Unlabeled synthetic proxy images in [0, 255], deterministic per seed.
/// gaussian_blobs and stripe_textures carry spatial structure;
/// uniform_noise carries none.
template <typename T = float>
dataset<T> synth_proxy(proxy_kind kind, std::size_t n, image_shape shape, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("synth_proxy: n must be positive");
  dataset<T> ds;
  ds.images = tensor<T>({n, shape.c, shape.h, shape.w});
  auto iv = ds.images.data();
  rng_stream rng(seed);
  const std::size_t per = shape.c * shape.h * shape.w;

  for (std::size_t i = 0; i < n; ++i) {
    std::span<T> img(&iv[i * per], per);
    switch (kind) {
      case proxy_kind::uniform_noise: {
        for (auto& v : img) v = static_cast<T>(rng.uniform(0.0, 255.0));
        break;
      }
      case proxy_kind::gaussian_blobs: {
        // Mid-gray canvas plus a few bright/dark blobs; generator constants
        // keep the per-image mean inside [64, 192].
        for (auto& v : img) v = T(128);
        const std::size_t blobs = 2 + rng.below(3);
        for (std::size_t bi = 0; bi < blobs; ++bi) {
          const double cy = rng.uniform(0.15, 0.85) * static_cast<double>(shape.h);
          const double cx = rng.uniform(0.15, 0.85) * static_cast<double>(shape.w);
          const double sigma = rng.uniform(1.5, static_cast<double>(std::min(shape.h, shape.w)) / 5.0);
          const double amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(40.0, 100.0);
          for (std::size_t r = 0; r < shape.h; ++r) {
            for (std::size_t c = 0; c < shape.w; ++c) {
              const double dy = (static_cast<double>(r) - cy) / sigma;
              const double dx = (static_cast<double>(c) - cx) / sigma;
              const double g = amp * std::exp(-0.5 * (dx * dx + dy * dy));
              for (std::size_t ch = 0; ch < shape.c; ++ch) {
                img[(ch * shape.h + r) * shape.w + c] += static_cast<T>(g);
              }
            }
          }
        }
        for (auto& v : img) v += static_cast<T>(rng.gaussian(0.0, 6.0));
        break;
      }
      case proxy_kind::stripe_textures: {
        const double theta = rng.uniform(0.0, 3.141592653589793);
        const double freq = rng.uniform(2.0, 6.0);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        const double amp = rng.uniform(35.0, 80.0);
        const double kx = std::cos(theta) * freq * 6.283185307179586 / static_cast<double>(shape.w);
        const double ky = std::sin(theta) * freq * 6.283185307179586 / static_cast<double>(shape.h);
        for (std::size_t r = 0; r < shape.h; ++r) {
          for (std::size_t c = 0; c < shape.w; ++c) {
            const double v = 128.0 + amp * std::sin(kx * static_cast<double>(c) + ky * static_cast<double>(r) + phase) +
                             rng.gaussian(0.0, 10.0);
            detail::put_pixel(img, shape, r, c, v);
          }
        }
        break;
      }
    }
  }
  detail::clamp_pixels(ds.images);
  ds.name = kind == proxy_kind::uniform_noise    ? "proxy/uniform_noise"
            : kind == proxy_kind::gaussian_blobs ? "proxy/gaussian_blobs"
                                                 : "proxy/stripe_textures";
  return ds;
}

enum class labeled_kind { gratings10, gratings10b, rings10 };

/// Labeled 10-class synthetic image sets, the desk-scale stand-ins for real
/// classification data. gratings10 varies stripe orientation by class;
/// gratings10b is a second labeling of the same texture family with class
/// orientations offset by half a class width (the downstream task for
/// transfer experiments); rings10 varies ring radius. All deterministic per
/// seed.
template <typename T = float>
dataset<T> synth_labeled(labeled_kind kind, std::size_t n, image_shape shape, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("synth_labeled: n must be positive");
  dataset<T> ds;
  ds.images = tensor<T>({n, shape.c, shape.h, shape.w});
  ds.labels = std::vector<std::size_t>(n);
  auto iv = ds.images.data();
  rng_stream rng(seed);
  const std::size_t per = shape.c * shape.h * shape.w;

  for (std::size_t i = 0; i < n; ++i) {
    std::span<T> img(&iv[i * per], per);
    const std::size_t label = rng.below(10);
    (*ds.labels)[i] = label;
    switch (kind) {
      case labeled_kind::gratings10:
      case labeled_kind::gratings10b: {
        // Orientation encodes the class; frequency/phase/contrast jitter and
        // pixel noise keep decision margins small enough to attack at the
        // usual perturbation budget of ~10 pixel levels.
        const double offset = kind == labeled_kind::gratings10b ? 0.5 : 0.0;
        const double theta =
            (static_cast<double>(label) + offset + rng.uniform(-0.18, 0.18)) * 3.141592653589793 / 10.0;
        const double freq = rng.uniform(2.5, 4.5);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        const double amp = rng.uniform(4.0, 8.0);
        const double kx = std::cos(theta) * freq * 6.283185307179586 / static_cast<double>(shape.w);
        const double ky = std::sin(theta) * freq * 6.283185307179586 / static_cast<double>(shape.h);
        for (std::size_t r = 0; r < shape.h; ++r) {
          for (std::size_t c = 0; c < shape.w; ++c) {
            const double v = 128.0 + amp * std::sin(kx * static_cast<double>(c) + ky * static_cast<double>(r) + phase) +
                             rng.gaussian(0.0, 10.0);
            detail::put_pixel(img, shape, r, c, v);
          }
        }
        break;
      }
      case labeled_kind::rings10: {
        const double r0 = 3.0 + 0.95 * static_cast<double>(label);
        const double cy = static_cast<double>(shape.h) / 2.0 + rng.uniform(-1.5, 1.5);
        const double cx = static_cast<double>(shape.w) / 2.0 + rng.uniform(-1.5, 1.5);
        const double width = rng.uniform(1.1, 1.7);
        const double amp = rng.uniform(25.0, 50.0);
        for (std::size_t r = 0; r < shape.h; ++r) {
          for (std::size_t c = 0; c < shape.w; ++c) {
            const double dy = static_cast<double>(r) - cy;
            const double dx = static_cast<double>(c) - cx;
            const double d = std::sqrt(dx * dx + dy * dy) - r0;
            const double v = 110.0 + amp * std::exp(-0.5 * (d / width) * (d / width)) + rng.gaussian(0.0, 14.0);
            detail::put_pixel(img, shape, r, c, v);
          }
        }
        break;
      }
    }
  }
  detail::clamp_pixels(ds.images);
  ds.name = kind == labeled_kind::gratings10    ? "synth/gratings10"
            : kind == labeled_kind::gratings10b ? "synth/gratings10b"
                                                : "synth/rings10";
  return ds;
}

inline labeled_kind labeled_kind_from_name(const std::string& name) {
  if (name == "gratings10") return labeled_kind::gratings10;
  if (name == "gratings10b") return labeled_kind::gratings10b;
  if (name == "rings10") return labeled_kind::rings10;
  throw std::invalid_argument("unknown labeled dataset kind '" + name + "'");
}

inline proxy_kind proxy_kind_from_name(const std::string& name) {
  if (name == "uniform_noise") return proxy_kind::uniform_noise;
  if (name == "gaussian_blobs") return proxy_kind::gaussian_blobs;
  if (name == "stripe_textures") return proxy_kind::stripe_textures;
  throw std::invalid_argument("unknown proxy dataset kind '" + name + "'");
}

/// Per-channel mean and standard deviation of a dataset, for normalize
/// layers.
template <typename T>
std::pair<std::vector<double>, std::vector<double>> channel_stats(const dataset<T>& ds) {
  const std::size_t c = ds.channels(), hw = ds.height() * ds.width(), n = ds.size();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  auto iv = ds.images.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T* plane = &iv[(i * c + ci) * hw];
      for (std::size_t k = 0; k < hw; ++k) mean[ci] += plane[k];
    }
  for (auto& m : mean) m /= static_cast<double>(n * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T* plane = &iv[(i * c + ci) * hw];
      for (std::size_t k = 0; k < hw; ++k) {
        const double d = static_cast<double>(plane[k]) - mean[ci];
        var[ci] += d * d;
      }
    }
  std::vector<double> stdev(c);
  for (std::size_t ci = 0; ci < c; ++ci) {
    stdev[ci] = std::sqrt(var[ci] / static_cast<double>(n * hw));
    if (stdev[ci] < 1e-6) stdev[ci] = 1.0;
  }
  return {mean, stdev};
}

}  // namespace dompat

#endif  // DOMPAT_DATA_HPP
