#pragma once

// Clip extraction, frame I/O, preprocessing, dataset manifests and splits.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "meranet/parallel.hpp"
#include "meranet/random.hpp"
#include "meranet/tensor.hpp"
#include "meranet/tensor_io.hpp"

namespace meranet {

namespace fs = std::filesystem;

inline constexpr std::size_t clip_size = 112;

// ---------------------------------------------------------------------------
// clip window

/// Frame indices of a T-frame window around `apex`: floor(T/2) frames
/// before, the apex, then ceil(T/2)-1 after, clamped to [0, L-1].
inline std::vector<std::size_t> extract_clip(std::size_t length, std::size_t apex,
                                             std::size_t t) {
  require(length >= 1, Errc::invalid_argument, "extract_clip: empty frame sequence");
  require(t >= 1, Errc::invalid_argument, "extract_clip: T must be >= 1");
  require(apex < length, Errc::out_of_range,
          "extract_clip: apex " + std::to_string(apex) + " outside [0, " +
              std::to_string(length) + ")");
  std::vector<std::size_t> idx(t);
  const auto first = static_cast<std::int64_t>(apex) - static_cast<std::int64_t>(t / 2);
  for (std::size_t i = 0; i < t; ++i)
    idx[i] = static_cast<std::size_t>(std::clamp<std::int64_t>(
        first + static_cast<std::int64_t>(i), 0, static_cast<std::int64_t>(length) - 1));
  return idx;
}

// ---------------------------------------------------------------------------
// PPM / PGM

namespace detail {

// Next whitespace-delimited header token, skipping '#' comments.
inline std::string netpbm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

inline std::size_t netpbm_int(std::istream& in, const std::string& what,
                              const std::string& path) {
  const auto tok = netpbm_token(in);
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(!tok.empty() && pos == tok.size(), Errc::parse,
          path + ": bad " + what + " '" + tok + "'");
  return v;
}

// Reads a P5/P6 header, returns {width, height, maxval}. The single
// whitespace byte after maxval has been consumed.
inline std::array<std::size_t, 3> netpbm_header(std::istream& in, const char* magic,
                                                const std::string& path) {
  require(netpbm_token(in) == magic, Errc::bad_magic,
          path + ": not a binary " + std::string(magic) + " file");
  const auto w = netpbm_int(in, "width", path);
  const auto h = netpbm_int(in, "height", path);
  const auto maxval = netpbm_int(in, "maxval", path);
  require(w >= 1 && h >= 1, Errc::parse, path + ": zero image extent");
  require(maxval >= 1 && maxval <= 255, Errc::parse,
          path + ": only 8-bit images (maxval <= 255) are supported");
  return {w, h, maxval};
}

inline unsigned char quantize_unit(double v) {
  const double q = std::floor(255.0 * std::clamp(v, 0.0, 1.0) + 0.5);
  return static_cast<unsigned char>(q);
}

}  // namespace detail

/// Binary PPM (P6) as a [3,H,W] tensor with values in [0,1].
inline Tensor<float> read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  const auto [w, h, maxval] = detail::netpbm_header(in, "P6", path.string());
  std::vector<unsigned char> px(3 * w * h);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  require(in.gcount() == static_cast<std::streamsize>(px.size()), Errc::truncated,
          path.string() + ": truncated pixel data");
  Tensor<float> img({3, h, w});
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img[(c * h + y) * w + x] = static_cast<float>(px[(y * w + x) * 3 + c]) * scale;
  return img;
}

/// Writes a [3,H,W] tensor in [0,1] as 8-bit P6 (round half up, clamped).
inline void write_ppm(const fs::path& path, const Tensor<float>& img) {
  require(img.rank() == 3 && img.extent(0) == 3, Errc::shape_mismatch,
          "write_ppm expects [3,H,W]");
  const std::size_t h = img.extent(1), w = img.extent(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> px(3 * w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        px[(y * w + x) * 3 + c] = detail::quantize_unit(img[(c * h + y) * w + x]);
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  require(static_cast<bool>(out), Errc::io, "write failed: " + path.string());
}

/// Binary PGM (P5) as an [H,W] tensor in [0,1].
inline Tensor<float> read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  const auto [w, h, maxval] = detail::netpbm_header(in, "P5", path.string());
  std::vector<unsigned char> px(w * h);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  require(in.gcount() == static_cast<std::streamsize>(px.size()), Errc::truncated,
          path.string() + ": truncated pixel data");
  Tensor<float> img({h, w});
  for (std::size_t i = 0; i < px.size(); ++i)
    img[i] = static_cast<float>(px[i]) / static_cast<float>(maxval);
  return img;
}

// ---------------------------------------------------------------------------
// per-frame and per-clip transforms

/// Bilinear resize of [C,H,W] with half-pixel centres; source coordinates
/// are clamped to the image, so edges replicate.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& img, std::size_t oh, std::size_t ow) {
  require(img.rank() == 3, Errc::shape_mismatch, "resize_bilinear expects [C,H,W]");
  require(oh >= 1 && ow >= 1, Errc::invalid_argument, "resize target must be >= 1");
  const std::size_t c = img.extent(0), h = img.extent(1), w = img.extent(2);
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::clamp((double(o) + 0.5) * scale - 0.5, 0.0, double(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - double(i0)};
    }
    return t;
  };
  const auto ty = taps(h, oh), tx = taps(w, ow);
  Tensor<T> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* p = img.ptr() + ch * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = tx[x];
        const double top = (1 - b.f) * p[a.i0 * w + b.i0] + b.f * p[a.i0 * w + b.i1];
        const double bot = (1 - b.f) * p[a.i1 * w + b.i0] + b.f * p[a.i1 * w + b.i1];
        out[(ch * oh + y) * ow + x] = static_cast<T>((1 - a.f) * top + a.f * bot);
      }
    }
  }
  return out;
}

/// (x[c] - mean[c]) / std[c] along the leading channel axis.
template <class T>
Tensor<T> normalize_sample(const Tensor<T>& clip, const std::vector<double>& mean,
                           const std::vector<double>& stdev) {
  const std::size_t c = clip.extent(0);
  require(mean.size() == c && stdev.size() == c, Errc::shape_mismatch,
          "normalize_sample: statistics must have one entry per channel");
  for (double s : stdev)
    require(s > 0 && std::isfinite(s), Errc::invalid_argument,
            "normalize_sample: std entries must be positive");
  Tensor<T> out = clip;
  const std::size_t inner = clip.numel() / c;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* p = out.ptr() + ch * inner;
    for (std::size_t i = 0; i < inner; ++i)
      p[i] = static_cast<T>((double(p[i]) - mean[ch]) / stdev[ch]);
  }
  return out;
}

/// Reverses the last (width) axis.
template <class T>
Tensor<T> hflip(const Tensor<T>& x) {
  Tensor<T> out = x;
  const std::size_t w = x.shape().back();
  for (std::size_t r = 0; r < x.numel() / w; ++r)
    std::reverse(out.ptr() + r * w, out.ptr() + (r + 1) * w);
  return out;
}

inline bool draw_flip(Rng& rng) { return rng.uniform() < 0.5; }

/// Horizontal flip with probability 0.5.
template <class T>
Tensor<T> augment_hflip(const Tensor<T>& clip, Rng& rng) {
  return draw_flip(rng) ? hflip(clip) : clip;
}

/// Augmentation stream of one clip in one epoch, independent of batch order
/// and worker assignment.
inline Rng augment_rng(std::uint64_t seed, std::size_t epoch, const std::string& clip_id) {
  return Rng(mix_seed(mix_seed(seed, epoch), path_hash(clip_id)));
}

// ---------------------------------------------------------------------------
// manifest

struct ClipEntry {
  std::string id;
  std::string frames_dir;           // relative to the manifest directory
  std::vector<std::string> frames;  // ordered file names; empty = all *.ppm
  std::optional<std::size_t> apex;
  std::size_t label = 0;
  std::string split;   // train | val | test | "" (unassigned)
  std::string tensor;  // preprocessed clip, relative to the manifest directory
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<ClipEntry> clips;
  std::optional<std::vector<double>> mean, stdev;
  fs::path base_dir;  // directory of the manifest file

  std::size_t count(const std::string& split) const {
    return std::count_if(clips.begin(), clips.end(),
                         [&](const ClipEntry& c) { return c.split == split; });
  }

  void validate() const {
    require(!classes.empty(), Errc::invalid_argument, "manifest: no classes");
    for (const auto& c : clips) {
      require(!c.id.empty(), Errc::invalid_argument, "manifest: clip without id");
      require(c.label < classes.size(), Errc::out_of_range,
              "manifest: clip " + c.id + " label " + std::to_string(c.label) +
                  " >= number of classes");
      require(c.split.empty() || c.split == "train" || c.split == "val" ||
                  c.split == "test",
              Errc::invalid_argument,
              "manifest: clip " + c.id + " has split '" + c.split +
                  "' (expected train, val or test)");
      if (c.apex && !c.frames.empty())
        require(*c.apex < c.frames.size(), Errc::out_of_range,
                "manifest: clip " + c.id + " apex outside its frames");
    }
    if (mean || stdev)
      require(mean && stdev && mean->size() == 3 && stdev->size() == 3,
              Errc::invalid_argument, "manifest: mean and std need 3 entries each");
  }
};

namespace detail {

template <class V>
V json_field(const nlohmann::json& j, const char* key, const std::string& where) {
  require(j.contains(key), Errc::missing_key, where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::parse, where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline DatasetManifest manifest_from_json(const nlohmann::json& j, fs::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  require(j.is_object(), Errc::parse, "manifest: top level must be an object");
  m.classes = detail::json_field<std::vector<std::string>>(j, "classes", "manifest");
  const auto clips = detail::json_field<nlohmann::json>(j, "clips", "manifest");
  require(clips.is_array(), Errc::parse, "manifest: 'clips' must be an array");
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& c = clips[i];
    const std::string where = "manifest clip " + std::to_string(i);
    ClipEntry e;
    e.id = detail::json_field<std::string>(c, "id", where);
    e.label = detail::json_field<std::size_t>(c, "label", where);
    if (c.contains("frames_dir")) e.frames_dir = detail::json_field<std::string>(c, "frames_dir", where);
    if (c.contains("frames")) e.frames = detail::json_field<std::vector<std::string>>(c, "frames", where);
    if (c.contains("apex") && !c["apex"].is_null())
      e.apex = detail::json_field<std::size_t>(c, "apex", where);
    if (c.contains("split")) e.split = detail::json_field<std::string>(c, "split", where);
    if (c.contains("tensor")) e.tensor = detail::json_field<std::string>(c, "tensor", where);
    m.clips.push_back(std::move(e));
  }
  if (j.contains("mean")) m.mean = detail::json_field<std::vector<double>>(j, "mean", "manifest");
  if (j.contains("std")) m.stdev = detail::json_field<std::vector<double>>(j, "std", "manifest");
  m.validate();
  return m;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["classes"] = m.classes;
  auto clips = nlohmann::json::array();
  for (const auto& c : m.clips) {
    nlohmann::json e{{"id", c.id}, {"label", c.label}};
    if (!c.frames_dir.empty()) e["frames_dir"] = c.frames_dir;
    if (!c.frames.empty()) e["frames"] = c.frames;
    if (c.apex) e["apex"] = *c.apex;
    if (!c.split.empty()) e["split"] = c.split;
    if (!c.tensor.empty()) e["tensor"] = c.tensor;
    clips.push_back(std::move(e));
  }
  j["clips"] = std::move(clips);
  if (m.mean) j["mean"] = *m.mean;
  if (m.stdev) j["std"] = *m.stdev;
  return j;
}

inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

inline void save_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out << manifest_to_json(m).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// stratified split

namespace detail {

// Splits `total` units across groups proportionally to `exact` shares using
// largest remainders (ties to the lower group index).
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& exact,
                                                  std::size_t total) {
  std::vector<std::size_t> out(exact.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::floor(exact[i]));
    assigned += out[i];
  }
  std::vector<std::size_t> order(exact.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
  });
  for (std::size_t k = 0; assigned < total && k < order.size(); ++k, ++assigned)
    ++out[order[k]];
  return out;
}

// Chooses how many members of each class go to the held-out side so the
// overall count is round(frac * n) and every class is within one sample of
// its exact share.
inline std::vector<std::size_t> stratified_counts(const std::vector<std::size_t>& sizes,
                                                  double frac) {
  std::vector<double> exact(sizes.size());
  double sum = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    exact[i] = frac * double(sizes[i]);
    sum += exact[i];
  }
  return largest_remainder(exact, static_cast<std::size_t>(std::floor(sum + 0.5)));
}

}  // namespace detail

/// Assigns split tags per class: a (1 - train_frac) share goes to test, and
/// val_frac_of_train of the remaining pool goes to val.
inline DatasetManifest split_dataset(DatasetManifest m, double train_frac,
                                     double val_frac_of_train, std::uint64_t seed) {
  require(train_frac > 0 && train_frac < 1, Errc::invalid_argument,
          "split_dataset: train fraction must lie in (0,1)");
  require(val_frac_of_train >= 0 && val_frac_of_train < 1, Errc::invalid_argument,
          "split_dataset: validation fraction must lie in [0,1)");
  const std::size_t k = m.classes.size();
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < m.clips.size(); ++i) members.at(m.clips[i].label).push_back(i);
  std::vector<std::size_t> sizes(k);
  for (std::size_t c = 0; c < k; ++c) {
    require(members[c].size() >= 3, Errc::invalid_argument,
            "split_dataset: class '" + m.classes[c] + "' has " +
                std::to_string(members[c].size()) + " samples; at least 3 are needed");
    sizes[c] = members[c].size();
  }
  const auto n_test = detail::stratified_counts(sizes, 1.0 - train_frac);
  std::vector<std::size_t> pool(k);
  for (std::size_t c = 0; c < k; ++c) pool[c] = sizes[c] - n_test[c];
  const auto n_val = detail::stratified_counts(pool, val_frac_of_train);
  for (std::size_t c = 0; c < k; ++c) {
    auto idx = members[c];
    Rng rng(mix_seed(seed, c));
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      auto& split = m.clips[idx[j]].split;
      split = j < n_test[c] ? "test" : j < n_test[c] + n_val[c] ? "val" : "train";
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// preprocessing

inline std::vector<std::string> list_frames(const fs::path& dir) {
  require(fs::is_directory(dir), Errc::io, "frame directory not found: " + dir.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  require(!names.empty(), Errc::io, "no .ppm frames in " + dir.string());
  return names;
}

/// Raw [3,T,size,size] clip in [0,1]: apex-centred window, each frame
/// resized bilinearly. The apex defaults to the middle frame.
inline Tensor<float> load_raw_clip(const DatasetManifest& m, const ClipEntry& c,
                                   std::size_t t, std::size_t size = clip_size) {
  const fs::path dir = m.base_dir / c.frames_dir;
  const auto frames = c.frames.empty() ? list_frames(dir) : c.frames;
  const std::size_t apex = c.apex.value_or(frames.size() / 2);
  const auto idx = extract_clip(frames.size(), apex, t);
  Tensor<float> clip({3, t, size, size});
  const std::size_t plane = size * size;
  std::optional<std::size_t> last;
  Tensor<float> frame;
  for (std::size_t i = 0; i < t; ++i) {
    if (last != idx[i]) {
      frame = resize_bilinear(read_ppm(dir / frames[idx[i]]), size, size);
      last = idx[i];
    }
    for (std::size_t ch = 0; ch < 3; ++ch)
      std::copy_n(frame.ptr() + ch * plane, plane, clip.ptr() + (ch * t + i) * plane);
  }
  return clip;
}

struct ChannelStats {
  std::vector<double> mean, stdev;
};

/// Per-channel mean and (population) standard deviation over every voxel
/// of the given clips.
inline ChannelStats channel_statistics(const std::vector<const Tensor<float>*>& clips) {
  require(!clips.empty(), Errc::invalid_argument, "channel_statistics: no clips");
  const std::size_t c = clips.front()->extent(0);
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  double count = 0;
  for (const auto* clip : clips) {
    const std::size_t inner = clip->numel() / c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = clip->ptr() + ch * inner;
      for (std::size_t i = 0; i < inner; ++i) sum[ch] += p[i];
    }
    count += double(inner);
  }
  ChannelStats s;
  for (std::size_t ch = 0; ch < c; ++ch) s.mean.push_back(sum[ch] / count);
  for (const auto* clip : clips) {
    const std::size_t inner = clip->numel() / c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = clip->ptr() + ch * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = p[i] - s.mean[ch];
        sq[ch] += d * d;
      }
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sd = std::sqrt(sq[ch] / count);
    if (!(sd > 0)) {
      diagnostic("channel " + std::to_string(ch) + " is constant over the training split; std set to 1");
      sd = 1.0;
    }
    s.stdev.push_back(sd);
  }
  return s;
}

struct PreprocessOptions {
  std::size_t t = 16;
  std::size_t size = clip_size;
  // used only when some clip has no split tag
  double train_frac = 0.8;
  double val_frac_of_train = 0.2;
  std::uint64_t seed = 0;
};

/// Builds normalized clip tensors for every manifest entry and writes
/// `out_dir/manifest.json` plus `out_dir/clips/<id>.mera`. Statistics come
/// from the training split only.
inline DatasetManifest preprocess(const DatasetManifest& in, const fs::path& out_dir,
                                  const PreprocessOptions& opt = {}) {
  in.validate();
  DatasetManifest m = in;
  const bool unassigned = std::any_of(m.clips.begin(), m.clips.end(),
                                      [](const ClipEntry& c) { return c.split.empty(); });
  if (unassigned) m = split_dataset(std::move(m), opt.train_frac, opt.val_frac_of_train, opt.seed);
  require(m.count("train") > 0, Errc::invalid_argument, "preprocess: empty training split");

  std::vector<Tensor<float>> raw(m.clips.size());
  parallel_for(0, m.clips.size(), [&](std::size_t i) {
    raw[i] = load_raw_clip(m, m.clips[i], opt.t, opt.size);
  });
  std::vector<const Tensor<float>*> train;
  for (std::size_t i = 0; i < m.clips.size(); ++i)
    if (m.clips[i].split == "train") train.push_back(&raw[i]);
  const auto stats = channel_statistics(train);

  fs::create_directories(out_dir / "clips");
  for (std::size_t i = 0; i < m.clips.size(); ++i) {
    auto& c = m.clips[i];
    const auto clip = normalize_sample(raw[i], stats.mean, stats.stdev);
    require(clip.all_finite(), Errc::non_finite, "preprocess: clip " + c.id + " is not finite");
    c.tensor = "clips/" + c.id + ".mera";
    write_tensor(out_dir / c.tensor, clip);
    // frame paths stay valid relative to the new manifest location
    const fs::path frames = in.base_dir / c.frames_dir;
    if (!c.frames_dir.empty())
      c.frames_dir = fs::relative(fs::absolute(frames), fs::absolute(out_dir)).generic_string();
  }
  m.mean = stats.mean;
  m.stdev = stats.stdev;
  m.base_dir = out_dir;
  save_manifest(out_dir / "manifest.json", m);
  return m;
}

// ---------------------------------------------------------------------------
// loading preprocessed samples

struct ClipSample {
  Tensor<float> tensor;  // [3,T,112,112]
  std::size_t label = 0;
  std::string id;
};

inline std::vector<ClipSample> load_split(const DatasetManifest& m, const std::string& split) {
  std::vector<ClipSample> out;
  for (const auto& c : m.clips) {
    if (c.split != split) continue;
    require(!c.tensor.empty(), Errc::missing_key,
            "clip " + c.id + " has no preprocessed tensor (run preprocess first)");
    ClipSample s{read_tensor(m.base_dir / c.tensor), c.label, c.id};
    require(s.tensor.rank() == 4 && s.tensor.extent(0) == 3, Errc::shape_mismatch,
            "clip " + c.id + " tensor must be [3,T,H,W], got " + shape_str(s.tensor.shape()));
    require(s.tensor.all_finite(), Errc::non_finite, "clip " + c.id + " holds non-finite values");
    out.push_back(std::move(s));
  }
  return out;
}

/// Stacks samples[idx[i]] into [B,3,T,H,W]; flip[i] mirrors sample i.
inline Tensor<float> stack_batch(const std::vector<ClipSample>& samples,
                                 const std::vector<std::size_t>& idx,
                                 const std::vector<bool>& flip = {}) {
  require(!idx.empty(), Errc::invalid_argument, "stack_batch: empty batch");
  const Shape& s = samples.at(idx[0]).tensor.shape();
  Shape bs{idx.size()};
  bs.insert(bs.end(), s.begin(), s.end());
  Tensor<float> batch(bs);
  const std::size_t per = shape_numel(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& t = samples.at(idx[i]).tensor;
    require(t.shape() == s, Errc::shape_mismatch, "stack_batch: clips differ in shape");
    if (!flip.empty() && flip[i]) {
      const auto f = hflip(t);
      std::copy_n(f.ptr(), per, batch.ptr() + i * per);
    } else {
      std::copy_n(t.ptr(), per, batch.ptr() + i * per);
    }
  }
  return batch;
}

}  // namespace meranet
