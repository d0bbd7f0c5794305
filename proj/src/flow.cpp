#include "warpvos/flow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "warpvos/ops.hpp"

namespace warpvos::flow {

namespace fs = std::filesystem;

namespace {

void check_pair(const Tensor& target, const Tensor& source) {
  if (target.rank() != 3 || target.shape() != source.shape())
    throw DimensionError("flow estimator needs two images of equal extents, got " +
                         shape_str(target.shape()) + " and " + shape_str(source.shape()));
}

geometry::FlowField from_uv(std::int64_t h, std::int64_t w, std::vector<float> uv) {
  geometry::FlowField f;
  f.uv = Tensor::from_floats({2, h, w}, std::move(uv));
  return f;
}

void check_finite(const geometry::FlowField& f, const std::string& what) {
  for (double v : f.uv.to_vector())
    if (!std::isfinite(v)) throw NumericError(what + " contains non-finite values");
}

}  // namespace

geometry::FlowField ZeroFlow::estimate(const Tensor& target, const Tensor& source, const PairContext&) const {
  check_pair(target, source);
  return geometry::FlowField::zeros(target.dim(1), target.dim(2));
}

geometry::FlowField GroundTruthFlow::estimate(const Tensor& target, const Tensor& source,
                                              const PairContext& ctx) const {
  check_pair(target, source);
  if (!ctx.sequence || !ctx.sequence->has_flow())
    throw UsageError("ground-truth flow requested for a sequence without Flow/ files" +
                     (ctx.sequence ? " (" + ctx.sequence->name + ")" : std::string()));
  if (ctx.target_index < 1 || ctx.target_index >= ctx.sequence->length())
    throw UsageError("ground-truth flow index " + std::to_string(ctx.target_index) + " out of range");
  return ctx.sequence->flows[static_cast<std::size_t>(ctx.target_index)];
}

BlockMatchingFlow::BlockMatchingFlow(BlockMatchingConfig cfg) : cfg_(cfg) {
  if (cfg_.radius < 1) throw ConfigError("block matching radius must be >= 1");
  if (cfg_.block < 1 || cfg_.block % 2 == 0) throw ConfigError("block matching block size must be odd");
}

geometry::FlowField BlockMatchingFlow::estimate(const Tensor& target, const Tensor& source,
                                                const PairContext&) const {
  check_pair(target, source);
  const std::int64_t c = target.dim(0), h = target.dim(1), w = target.dim(2), hw = h * w;
  const auto tv = target.to_vector(), sv = source.to_vector();
  const int r = cfg_.radius, half = cfg_.block / 2;

  std::vector<std::array<int, 2>> order;
  for (int du = -r; du <= r; ++du)
    for (int dv = -r; dv <= r; ++dv) order.push_back({du, dv});
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    const int ma = a[0] * a[0] + a[1] * a[1], mb = b[0] * b[0] + b[1] * b[1];
    if (ma != mb) return ma < mb;
    return a < b;
  });

  std::vector<double> best(static_cast<std::size_t>(hw), INFINITY);
  std::vector<float> uv(static_cast<std::size_t>(2 * hw), 0.0f);
  std::vector<double> cost(static_cast<std::size_t>(hw));
  std::vector<double> rows(static_cast<std::size_t>(hw));
  for (const auto& [du, dv] : order) {
    for (std::int64_t y = 0; y < h; ++y) {
      const std::int64_t sy = std::clamp<std::int64_t>(y + dv, 0, h - 1);
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sx = std::clamp<std::int64_t>(x + du, 0, w - 1);
        double s = 0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double d = tv[static_cast<std::size_t>(ch * hw + y * w + x)] -
                           sv[static_cast<std::size_t>(ch * hw + sy * w + sx)];
          s += d * d;
        }
        cost[static_cast<std::size_t>(y * w + x)] = s;
      }
    }
    // Separable box sums, each summed afresh so equal pixel costs give
    // bit-equal block costs and ties stay exact.
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        double s = 0;
        for (std::int64_t xx = std::max<std::int64_t>(0, x - half); xx < std::min(w, x + half + 1); ++xx)
          s += cost[static_cast<std::size_t>(y * w + xx)];
        rows[static_cast<std::size_t>(y * w + x)] = s;
      }
    for (std::int64_t y = 0; y < h; ++y) {
      const std::int64_t y0 = std::max<std::int64_t>(0, y - half), y1 = std::min(h, y + half + 1);
      for (std::int64_t x = 0; x < w; ++x) {
        double s = 0;
        for (std::int64_t yy = y0; yy < y1; ++yy) s += rows[static_cast<std::size_t>(yy * w + x)];
        const auto i = static_cast<std::size_t>(y * w + x);
        // Strict comparison keeps the earlier, preferred displacement on ties.
        if (s < best[i]) {
          best[i] = s;
          uv[i] = static_cast<float>(du);
          uv[static_cast<std::size_t>(hw) + i] = static_cast<float>(dv);
        }
      }
    }
  }
  auto f = from_uv(h, w, std::move(uv));
  return cfg_.median ? median3x3(f) : f;
}

ExternalFlow::ExternalFlow(fs::path dir) : dir_(std::move(dir)) {
  if (!fs::is_directory(dir_)) throw ConfigError("external flow directory not found: " + dir_.string());
}

geometry::FlowField ExternalFlow::estimate(const Tensor& target, const Tensor& source,
                                           const PairContext& ctx) const {
  check_pair(target, source);
  if (!ctx.sequence) throw UsageError("external flow needs the sequence name");
  char buf[32];
  std::snprintf(buf, sizeof buf, "flow_%05d", ctx.target_index);
  const fs::path base = dir_ / ctx.sequence->name / buf;
  geometry::FlowField f;
  fs::path used;
  if (fs::exists(base.string() + ".bin")) {
    used = base.string() + ".bin";
    f.uv = ops::load_blob(used);
    f.validate();
  } else if (fs::exists(base.string() + ".flo")) {
    used = base.string() + ".flo";
    f = read_flo(used);
  } else {
    throw IoError("missing external flow " + base.string() + ".{bin,flo}");
  }
  const std::int64_t h = target.dim(1), w = target.dim(2);
  if (f.height() > h || f.width() > w)
    throw DimensionError("external flow " + used.string() + " larger than the frames");
  if (f.height() != h || f.width() != w) {
    if (f.height() != ctx.sequence->orig_height || f.width() != ctx.sequence->orig_width)
      throw DimensionError("external flow " + used.string() + " extents do not match the frames");
    f = dataset::pad_flow(f, h, w);
  }
  check_finite(f, used.string());
  return f;
}

std::unique_ptr<FlowEstimator> make_estimator(const std::string& source, const BlockMatchingConfig& block) {
  if (source == "zero") return std::make_unique<ZeroFlow>();
  if (source == "gt") return std::make_unique<GroundTruthFlow>();
  if (source == "block") return std::make_unique<BlockMatchingFlow>(block);
  const std::string prefix = "external:";
  if (source.rfind(prefix, 0) == 0 && source.size() > prefix.size())
    return std::make_unique<ExternalFlow>(source.substr(prefix.size()));
  throw ConfigError("unknown flow source '" + source + "' (zero | gt | block | external:<dir>)");
}

namespace {
constexpr float kFloMagic = 202021.25f;
}

geometry::FlowField read_flo(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  float magic = 0;
  std::int32_t w = 0, h = 0;
  is.read(reinterpret_cast<char*>(&magic), 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  is.read(reinterpret_cast<char*>(&h), 4);
  if (!is || magic != kFloMagic) throw IoError("bad .flo magic in " + path.string());
  if (w <= 0 || h <= 0 || static_cast<std::int64_t>(w) * h > (1LL << 28))
    throw IoError("bad .flo extents in " + path.string());
  std::vector<float> inter(static_cast<std::size_t>(2LL * w * h));
  is.read(reinterpret_cast<char*>(inter.data()), static_cast<std::streamsize>(inter.size() * 4));
  if (!is) throw IoError("truncated .flo file " + path.string());
  const std::int64_t hw = static_cast<std::int64_t>(w) * h;
  std::vector<float> uv(inter.size());
  for (std::int64_t i = 0; i < hw; ++i) {
    uv[static_cast<std::size_t>(i)] = inter[static_cast<std::size_t>(2 * i)];
    uv[static_cast<std::size_t>(hw + i)] = inter[static_cast<std::size_t>(2 * i + 1)];
  }
  return from_uv(h, w, std::move(uv));
}

void write_flo(const geometry::FlowField& flow, const fs::path& path) {
  flow.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  const auto h = static_cast<std::int32_t>(flow.height()), w = static_cast<std::int32_t>(flow.width());
  os.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  const auto uv = flow.uv.to_vector();
  const std::int64_t hw = static_cast<std::int64_t>(w) * h;
  std::vector<float> inter(static_cast<std::size_t>(2 * hw));
  for (std::int64_t i = 0; i < hw; ++i) {
    inter[static_cast<std::size_t>(2 * i)] = static_cast<float>(uv[static_cast<std::size_t>(i)]);
    inter[static_cast<std::size_t>(2 * i + 1)] = static_cast<float>(uv[static_cast<std::size_t>(hw + i)]);
  }
  os.write(reinterpret_cast<const char*>(inter.data()), static_cast<std::streamsize>(inter.size() * 4));
  if (!os) throw IoError("write failed for " + path.string());
}

geometry::FlowField median3x3(const geometry::FlowField& flow) {
  flow.validate();
  const std::int64_t h = flow.height(), w = flow.width(), hw = h * w;
  const auto v = flow.uv.to_vector();
  std::vector<float> out(static_cast<std::size_t>(2 * hw));
  std::array<double, 9> win{};
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        int n = 0;
        for (std::int64_t dy = -1; dy <= 1; ++dy)
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const auto yy = std::clamp<std::int64_t>(y + dy, 0, h - 1);
            const auto xx = std::clamp<std::int64_t>(x + dx, 0, w - 1);
            win[n++] = v[static_cast<std::size_t>(c * hw + yy * w + xx)];
          }
        std::nth_element(win.begin(), win.begin() + 4, win.end());
        out[static_cast<std::size_t>(c * hw + y * w + x)] = static_cast<float>(win[4]);
      }
  return from_uv(h, w, std::move(out));
}

double warp_l1(const Tensor& target, const Tensor& source, const geometry::FlowField& flow,
               const std::vector<std::uint8_t>& mask) {
  check_pair(target, source);
  NoGradGuard guard;
  const auto warped = geometry::warp_image(source, flow).to_vector();
  const auto tv = target.to_vector();
  const std::int64_t c = target.dim(0), hw = target.dim(1) * target.dim(2);
  double sum = 0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < hw; ++i) {
    if (!mask.empty() && mask[static_cast<std::size_t>(i)] == 0) continue;
    for (std::int64_t ch = 0; ch < c; ++ch)
      sum += std::abs(warped[static_cast<std::size_t>(ch * hw + i)] - tv[static_cast<std::size_t>(ch * hw + i)]);
    n += c;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace warpvos::flow
