#include "warpvos/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "warpvos/imageio.hpp"
#include "warpvos/ops.hpp"

namespace warpvos::dataset {

namespace fs = std::filesystem;

namespace {

std::string frame_stem(int t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", t);
  return buf;
}

std::string flow_file(int t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "flow_%05d.bin", t);
  return buf;
}

// Planar float image with clamped bilinear lookup.
struct Planes {
  std::int64_t c = 0, h = 0, w = 0;
  std::vector<double> v;

  static Planes of(const Tensor& t) { return {t.dim(0), t.dim(1), t.dim(2), t.to_vector()}; }
  double at(std::int64_t ch, std::int64_t y, std::int64_t x) const {
    return v[static_cast<std::size_t>((ch * h + y) * w + x)];
  }
  double bilinear(std::int64_t ch, double y, double x) const {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<std::int64_t>(std::floor(y)), x0 = static_cast<std::int64_t>(std::floor(x));
    const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double ay = y - static_cast<double>(y0), ax = x - static_cast<double>(x0);
    return (1 - ay) * ((1 - ax) * at(ch, y0, x0) + ax * at(ch, y0, x1)) +
           ay * ((1 - ax) * at(ch, y1, x0) + ax * at(ch, y1, x1));
  }
};

Tensor from_planes(const Planes& p) {
  std::vector<float> f(p.v.begin(), p.v.end());
  return Tensor::from_floats({p.c, p.h, p.w}, std::move(f));
}

}  // namespace

std::vector<int> Sequence::objects() const {
  std::vector<int> ids;
  for (const auto& [id, t] : first_frame) ids.push_back(id);
  return ids;
}

std::int64_t padded_extent(std::int64_t n) { return (n + 15) / 16 * 16; }

Tensor pad_image(const Tensor& image, std::int64_t height, std::int64_t width) {
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  if (height < h || width < w) throw DimensionError("pad_image cannot shrink");
  auto src = image.to_vector();
  std::vector<float> out(static_cast<std::size_t>(c * height * width));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x)
        out[static_cast<std::size_t>((ch * height + y) * width + x)] = static_cast<float>(
            src[static_cast<std::size_t>((ch * h + std::min(y, h - 1)) * w + std::min(x, w - 1))]);
  return Tensor::from_floats({c, height, width}, std::move(out));
}

LabelMap pad_labels(const LabelMap& labels, std::int64_t height, std::int64_t width) {
  if (labels.height == height && labels.width == width) return labels;
  LabelMap out = LabelMap::zeros(height, width);
  for (std::int64_t y = 0; y < labels.height; ++y)
    for (std::int64_t x = 0; x < labels.width; ++x) out.at(y, x) = labels.at(y, x);
  return out;
}

LabelMap crop_labels(const LabelMap& labels, std::int64_t height, std::int64_t width) {
  if (labels.height == height && labels.width == width) return labels;
  LabelMap out = LabelMap::zeros(height, width);
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) out.at(y, x) = labels.at(y, x);
  return out;
}

geometry::FlowField pad_flow(const geometry::FlowField& flow, std::int64_t height, std::int64_t width) {
  const std::int64_t h = flow.height(), w = flow.width();
  if (h == height && w == width) return flow;
  auto src = flow.uv.to_vector();
  std::vector<float> out(static_cast<std::size_t>(2 * height * width), 0.0f);
  for (std::int64_t ch = 0; ch < 2; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[static_cast<std::size_t>((ch * height + y) * width + x)] =
            static_cast<float>(src[static_cast<std::size_t>((ch * h + y) * w + x)]);
  geometry::FlowField f;
  f.uv = Tensor::from_floats({2, height, width}, std::move(out));
  return f;
}

std::vector<std::string> list_sequences(const fs::path& root) {
  const fs::path images = root / "JPEGImages";
  if (!fs::is_directory(images)) throw IoError("no JPEGImages directory under " + root.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

Sequence load_sequence(const fs::path& root, const std::string& name) {
  Sequence seq;
  seq.name = name;
  const fs::path img_dir = root / "JPEGImages" / name;
  if (!fs::is_directory(img_dir)) throw IoError("missing sequence directory " + img_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("sequence " + img_dir.string() + " has no frames");
  for (std::size_t t = 0; t < files.size(); ++t)
    if (files[t].stem().string() != frame_stem(static_cast<int>(t)))
      throw IoError("missing frame " + (img_dir / frame_stem(static_cast<int>(t))).string() +
                    ".* (found " + files[t].filename().string() + ")");

  const fs::path ann_dir = root / "Annotations" / name;
  const fs::path flow_dir = root / "Flow" / name;
  const bool with_flow = fs::is_directory(flow_dir);
  for (std::size_t t = 0; t < files.size(); ++t) {
    const auto img = imageio::read_image(files[t]);
    if (t == 0) {
      seq.orig_height = img.height;
      seq.orig_width = img.width;
      seq.height = padded_extent(img.height);
      seq.width = padded_extent(img.width);
    } else if (img.height != seq.orig_height || img.width != seq.orig_width) {
      throw IoError("frame " + files[t].string() + " has extents " + std::to_string(img.height) +
                    "x" + std::to_string(img.width) + ", expected " +
                    std::to_string(seq.orig_height) + "x" + std::to_string(seq.orig_width));
    }
    seq.frames.push_back(pad_image(imageio::to_tensor(img), seq.height, seq.width));

    const fs::path ann = ann_dir / (frame_stem(static_cast<int>(t)) + ".png");
    LabelMap labels;
    if (fs::exists(ann)) {
      labels = imageio::read_label_png(ann);
      if (labels.height != seq.orig_height || labels.width != seq.orig_width)
        throw IoError("annotation " + ann.string() + " extents do not match its frame");
      labels = pad_labels(labels, seq.height, seq.width);
    }
    seq.labels.push_back(std::move(labels));

    if (with_flow) {
      geometry::FlowField f;
      if (t == 0) {
        f = geometry::FlowField::zeros(seq.height, seq.width);
      } else {
        const fs::path fp = flow_dir / flow_file(static_cast<int>(t));
        if (!fs::exists(fp)) throw IoError("missing flow file " + fp.string());
        f.uv = ops::load_blob(fp);
        f.validate();
        if (f.height() != seq.orig_height || f.width() != seq.orig_width)
          throw IoError("flow " + fp.string() + " extents do not match the frames");
        f = pad_flow(f, seq.height, seq.width);
      }
      seq.flows.push_back(std::move(f));
    }
  }

  const fs::path meta = root / "Meta" / (name + ".json");
  if (fs::exists(meta)) {
    std::ifstream is(meta);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
      for (const auto& [id, t] : j.at("first_frame").items()) seq.first_frame[std::stoi(id)] = t.get<int>();
    } catch (const std::exception& e) {
      throw IoError("malformed meta file " + meta.string() + ": " + e.what());
    }
    for (const auto& [id, t] : seq.first_frame) {
      if (t < 0 || t >= seq.length() || seq.labels[static_cast<std::size_t>(t)].empty())
        throw IoError("meta " + meta.string() + " points object " + std::to_string(id) +
                      " at unannotated frame " + std::to_string(t));
    }
  } else {
    for (int t = 0; t < seq.length(); ++t)
      for (int id : seq.labels[static_cast<std::size_t>(t)].objects())
        if (!seq.first_frame.contains(id)) seq.first_frame[id] = t;
  }
  if (seq.labels[0].empty()) throw IoError("sequence " + name + " has no annotation for frame 0");
  return seq;
}

Clip make_clip(const Sequence& seq, int start, int length) {
  if (start < 0 || length < 1 || start + length > seq.length())
    throw UsageError("clip [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside sequence " + seq.name);
  Clip c;
  for (int t = start; t < start + length; ++t) {
    if (seq.labels[static_cast<std::size_t>(t)].empty())
      throw UsageError("training clips need annotations on every frame (" + seq.name + ")");
    c.frames.push_back(seq.frames[static_cast<std::size_t>(t)]);
    c.labels.push_back(seq.labels[static_cast<std::size_t>(t)]);
    c.flows.push_back(seq.has_flow() ? seq.flows[static_cast<std::size_t>(t)]
                                     : geometry::FlowField::zeros(seq.height, seq.width));
  }
  c.object_ids = c.labels[0].objects();
  return c;
}

Clip dynamic_merge(const Clip& a, const Clip& b) {
  if (a.frames.size() != b.frames.size()) throw DimensionError("dynamic_merge: clip lengths differ");
  if (a.frames[0].shape() != b.frames[0].shape())
    throw DimensionError("dynamic_merge: extents " + shape_str(a.frames[0].shape()) + " vs " +
                         shape_str(b.frames[0].shape()));
  int shift = 0;
  for (const auto& l : a.labels)
    for (int id : l.objects()) shift = std::max(shift, id);
  Clip out;
  const std::int64_t h = a.frames[0].dim(1), w = a.frames[0].dim(2), hw = h * w;
  for (std::size_t t = 0; t < a.frames.size(); ++t) {
    auto fa = a.frames[t].to_vector(), fb = b.frames[t].to_vector();
    auto ua = a.flows[t].uv.to_vector(), ub = b.flows[t].uv.to_vector();
    LabelMap labels = a.labels[t];
    std::vector<float> img(fa.size()), uv(ua.size());
    for (std::int64_t i = 0; i < hw; ++i) {
      const int lb = b.labels[t].data[static_cast<std::size_t>(i)];
      const bool take_b = lb != 0;
      if (take_b) {
        if (lb + shift > 255) throw ConfigError("dynamic_merge: merged object ids exceed 255");
        labels.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(lb + shift);
      }
      for (std::int64_t c = 0; c < 3; ++c)
        img[static_cast<std::size_t>(c * hw + i)] =
            static_cast<float>((take_b ? fb : fa)[static_cast<std::size_t>(c * hw + i)]);
      for (std::int64_t c = 0; c < 2; ++c)
        uv[static_cast<std::size_t>(c * hw + i)] =
            static_cast<float>((take_b ? ub : ua)[static_cast<std::size_t>(c * hw + i)]);
    }
    out.frames.push_back(Tensor::from_floats({3, h, w}, std::move(img)));
    out.labels.push_back(std::move(labels));
    geometry::FlowField f;
    f.uv = Tensor::from_floats({2, h, w}, std::move(uv));
    out.flows.push_back(std::move(f));
  }
  out.object_ids = out.labels[0].objects();
  return out;
}

namespace {

// Output pixel -> source coordinate under scale s and crop offset.
double source_coord(std::int64_t out, std::int64_t offset, double s) {
  return (static_cast<double>(out + offset) + 0.5) / s - 0.5;
}

bool crop_has_foreground(const LabelMap& labels, double s, std::int64_t oy, std::int64_t ox,
                         std::int64_t ch, std::int64_t cw) {
  for (std::int64_t y = 0; y < ch; ++y) {
    const double sy = source_coord(y, oy, s);
    const auto iy = static_cast<std::int64_t>(std::lround(sy));
    if (iy < 0 || iy >= labels.height) continue;
    for (std::int64_t x = 0; x < cw; ++x) {
      const auto ix = static_cast<std::int64_t>(std::lround(source_coord(x, ox, s)));
      if (ix >= 0 && ix < labels.width && labels.at(iy, ix) != 0) return true;
    }
  }
  return false;
}

void gaussian_blur(Planes& p, double sigma) {
  const int r = 2;
  std::vector<double> k(2 * r + 1);
  double z = 0;
  for (int i = -r; i <= r; ++i) z += (k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& x : k) x /= z;
  std::vector<double> tmp(p.v.size());
  for (int axis = 0; axis < 2; ++axis) {
    for (std::int64_t c = 0; c < p.c; ++c)
      for (std::int64_t y = 0; y < p.h; ++y)
        for (std::int64_t x = 0; x < p.w; ++x) {
          double s = 0;
          for (int i = -r; i <= r; ++i) {
            const auto yy = axis == 1 ? std::clamp<std::int64_t>(y + i, 0, p.h - 1) : y;
            const auto xx = axis == 0 ? std::clamp<std::int64_t>(x + i, 0, p.w - 1) : x;
            s += k[i + r] * p.at(c, yy, xx);
          }
          tmp[static_cast<std::size_t>((c * p.h + y) * p.w + x)] = s;
        }
    p.v.swap(tmp);
  }
}

}  // namespace

Clip augment(const Clip& clip, const AugmentConfig& cfg, std::mt19937_64& rng, CropInfo* info) {
  if (!cfg.enabled) {
    if (info) *info = CropInfo{1.0, 0, 0, true};
    return clip;
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::int64_t h = clip.frames[0].dim(1), w = clip.frames[0].dim(2);
  const std::int64_t ch = cfg.crop_height > 0 ? cfg.crop_height : h;
  const std::int64_t cw = cfg.crop_width > 0 ? cfg.crop_width : w;
  const double s = cfg.min_scale + (cfg.max_scale - cfg.min_scale) * unit(rng);
  const auto sh = static_cast<std::int64_t>(std::lround(static_cast<double>(h) * s));
  const auto sw = static_cast<std::int64_t>(std::lround(static_cast<double>(w) * s));
  auto pick = [&](std::int64_t scaled, std::int64_t crop) {
    const std::int64_t lo = std::min<std::int64_t>(0, scaled - crop), hi = std::max<std::int64_t>(0, scaled - crop);
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
  };
  CropInfo ci;
  ci.scale = s;
  for (int attempt = 0; attempt < cfg.crop_tries && !ci.found_foreground; ++attempt) {
    ci.offset_y = pick(sh, ch);
    ci.offset_x = pick(sw, cw);
    ci.found_foreground = crop_has_foreground(clip.labels[0], s, ci.offset_y, ci.offset_x, ch, cw);
  }
  if (!ci.found_foreground) {
    ci.offset_y = (sh - ch) / 2;
    ci.offset_x = (sw - cw) / 2;
  }
  if (info) *info = ci;

  // Photometric parameters shared by the whole clip.
  const double brightness = cfg.jitter * (2 * unit(rng) - 1);
  const double contrast = 1 + cfg.jitter * (2 * unit(rng) - 1);
  const double saturation = 1 + cfg.jitter * (2 * unit(rng) - 1);
  const bool blur = unit(rng) < cfg.blur_probability;
  const double sigma = 0.3 + 0.7 * unit(rng);
  const bool grey = unit(rng) < cfg.grey_probability;

  Clip out;
  for (std::size_t t = 0; t < clip.frames.size(); ++t) {
    const Planes src = Planes::of(clip.frames[t]);
    const Planes flow = Planes::of(clip.flows[t].uv);
    Planes img{3, ch, cw, std::vector<double>(static_cast<std::size_t>(3 * ch * cw))};
    Planes uv{2, ch, cw, std::vector<double>(static_cast<std::size_t>(2 * ch * cw), 0.0)};
    LabelMap labels = LabelMap::zeros(ch, cw);
    for (std::int64_t y = 0; y < ch; ++y) {
      const double sy = source_coord(y, ci.offset_y, s);
      const auto iy = static_cast<std::int64_t>(std::lround(sy));
      for (std::int64_t x = 0; x < cw; ++x) {
        const double sx = source_coord(x, ci.offset_x, s);
        const auto ix = static_cast<std::int64_t>(std::lround(sx));
        for (std::int64_t c = 0; c < 3; ++c)
          img.v[static_cast<std::size_t>((c * ch + y) * cw + x)] = src.bilinear(c, sy, sx);
        const bool inside = sy > -0.5 && sx > -0.5 && sy < static_cast<double>(h) - 0.5 &&
                            sx < static_cast<double>(w) - 0.5;
        if (!inside) continue;
        labels.at(y, x) = clip.labels[t].at(std::clamp<std::int64_t>(iy, 0, h - 1), std::clamp<std::int64_t>(ix, 0, w - 1));
        for (std::int64_t c = 0; c < 2; ++c)
          uv.v[static_cast<std::size_t>((c * ch + y) * cw + x)] = s * flow.bilinear(c, sy, sx);
      }
    }
    if (blur) gaussian_blur(img, sigma);
    const std::int64_t hw = ch * cw;
    for (std::int64_t i = 0; i < hw; ++i) {
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = img.v[static_cast<std::size_t>(c * hw + i)];
      const double lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      for (int c = 0; c < 3; ++c) {
        double v = grey ? lum : lum + saturation * (px[c] - lum);
        v = (v - 0.5) * contrast + 0.5 + brightness;
        img.v[static_cast<std::size_t>(c * hw + i)] = std::clamp(v, 0.0, 1.0);
      }
    }
    out.frames.push_back(from_planes(img));
    out.labels.push_back(std::move(labels));
    geometry::FlowField f;
    f.uv = from_planes(uv);
    out.flows.push_back(std::move(f));
  }
  std::set<int> ids;
  for (int id : out.labels[0].objects()) ids.insert(id);
  out.object_ids.assign(ids.begin(), ids.end());
  return out;
}

}  // namespace warpvos::dataset
