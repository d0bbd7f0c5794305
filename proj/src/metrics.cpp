#include "warpvos/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "warpvos/errors.hpp"

namespace warpvos::metrics {

namespace {

void check_extents(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw DimensionError("prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
}

std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, std::int64_t h, std::int64_t w, int r) {
  std::vector<std::array<int, 2>> disc;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) disc.push_back({dy, dx});
  std::vector<std::uint8_t> out(m.size(), 0);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (!m[static_cast<std::size_t>(y * w + x)]) continue;
      for (const auto& [dy, dx] : disc) {
        const auto yy = y + dy, xx = x + dx;
        if (yy >= 0 && xx >= 0 && yy < h && xx < w) out[static_cast<std::size_t>(yy * w + xx)] = 1;
      }
    }
  return out;
}

}  // namespace

int boundary_tolerance(std::int64_t height, std::int64_t width, const MetricConfig& cfg) {
  if (cfg.theta > 0) return cfg.theta;
  const double diag = std::hypot(static_cast<double>(height), static_cast<double>(width));
  return static_cast<int>(std::ceil(cfg.boundary_fraction * diag));
}

std::vector<std::uint8_t> object_mask(const LabelMap& labels, int object) {
  std::vector<std::uint8_t> m(labels.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.data[i] == object;
  return m;
}

std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& mask, std::int64_t h, std::int64_t w) {
  std::vector<std::uint8_t> b(mask.size(), 0);
  auto on = [&](std::int64_t y, std::int64_t x) {
    return y >= 0 && x >= 0 && y < h && x < w && mask[static_cast<std::size_t>(y * w + x)];
  };
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)))
        b[static_cast<std::size_t>(y * w + x)] = 1;
  return b;
}

double j_score(const LabelMap& pred, const LabelMap& gt, int object, const MetricConfig& cfg) {
  check_extents(pred, gt);
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const bool p = pred.data[i] == object, g = gt.data[i] == object;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? cfg.empty_score : static_cast<double>(inter) / static_cast<double>(uni);
}

double f_score(const LabelMap& pred, const LabelMap& gt, int object, int theta, const MetricConfig& cfg) {
  check_extents(pred, gt);
  const std::int64_t h = gt.height, w = gt.width;
  const auto bp = boundary(object_mask(pred, object), h, w);
  const auto bg = boundary(object_mask(gt, object), h, w);
  std::int64_t np = 0, ng = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    np += bp[i];
    ng += bg[i];
  }
  if (np == 0 && ng == 0) return cfg.empty_score;
  if (np == 0 || ng == 0) return 0.0;
  const auto dp = dilate(bp, h, w, theta), dg = dilate(bg, h, w, theta);
  std::int64_t mp = 0, mg = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    mp += bp[i] && dg[i];
    mg += bg[i] && dp[i];
  }
  const double precision = static_cast<double>(mp) / static_cast<double>(np);
  const double recall = static_cast<double>(mg) / static_cast<double>(ng);
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

double f_score(const LabelMap& pred, const LabelMap& gt, int object, const MetricConfig& cfg) {
  return f_score(pred, gt, object, boundary_tolerance(gt.height, gt.width, cfg), cfg);
}

std::vector<FrameScore> evaluate_sequence(const std::string& name, const std::vector<LabelMap>& pred,
                                          const std::vector<LabelMap>& gt,
                                          const std::map<int, int>& first_frame, const MetricConfig& cfg) {
  if (pred.size() != gt.size())
    throw DimensionError("sequence " + name + ": " + std::to_string(pred.size()) + " predicted frames vs " +
                         std::to_string(gt.size()) + " ground-truth frames");
  std::vector<FrameScore> out;
  for (const auto& [object, first] : first_frame)
    for (std::size_t t = static_cast<std::size_t>(first) + 1; t < gt.size(); ++t) {
      if (gt[t].empty()) continue;
      if (pred[t].empty()) throw IoError("sequence " + name + ": no prediction for frame " + std::to_string(t));
      FrameScore s{name, object, static_cast<int>(t), j_score(pred[t], gt[t], object, cfg),
                   f_score(pred[t], gt[t], object, cfg)};
      out.push_back(s);
    }
  return out;
}

ScoreReport aggregate(const std::vector<FrameScore>& scores, const std::map<std::string, bool>& seen) {
  ScoreReport r;
  r.frames = scores;
  std::map<std::pair<std::string, int>, ObjectScore> by_object;
  for (const auto& s : scores) {
    auto& o = by_object[{s.sequence, s.object}];
    o.sequence = s.sequence;
    o.object = s.object;
    o.j += s.j;
    o.f += s.f;
    ++o.frames;
  }
  double js = 0, fs = 0, jsn = 0, fsn = 0, jun = 0, fun = 0;
  int ns = 0, nu = 0;
  for (auto& [key, o] : by_object) {
    o.j /= o.frames;
    o.f /= o.frames;
    js += o.j;
    fs += o.f;
    const auto it = seen.find(o.sequence + "/" + std::to_string(o.object));
    if (it != seen.end()) {
      o.seen = it->second;
      if (it->second) {
        jsn += o.j;
        fsn += o.f;
        ++ns;
      } else {
        jun += o.j;
        fun += o.f;
        ++nu;
      }
    }
    r.objects.push_back(o);
  }
  if (!r.objects.empty()) {
    r.j = js / static_cast<double>(r.objects.size());
    r.f = fs / static_cast<double>(r.objects.size());
  }
  r.jf = (r.j + r.f) / 2;
  if (ns) {
    r.j_seen = jsn / ns;
    r.f_seen = fsn / ns;
  }
  if (nu) {
    r.j_unseen = jun / nu;
    r.f_unseen = fun / nu;
  }
  return r;
}

nlohmann::json summary_json(const ScoreReport& r) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : r.objects) {
    nlohmann::json j{{"sequence", o.sequence}, {"object", o.object}, {"frames", o.frames}, {"J", o.j}, {"F", o.f}};
    if (o.seen) j["seen"] = *o.seen;
    objects.push_back(j);
  }
  nlohmann::json out{{"J", r.j}, {"F", r.f}, {"J&F", r.jf}, {"objects", objects},
                     {"frame_count", r.frames.size()}};
  if (r.j_seen) {
    out["J_seen"] = *r.j_seen;
    out["F_seen"] = *r.f_seen;
  }
  if (r.j_unseen) {
    out["J_unseen"] = *r.j_unseen;
    out["F_unseen"] = *r.f_unseen;
  }
  return out;
}

void write_jsonl(const ScoreReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& s : r.frames)
    os << nlohmann::json{{"sequence", s.sequence}, {"object", s.object}, {"frame", s.frame}, {"J", s.j}, {"F", s.f}}
              .dump()
       << "\n";
}

void write_csv(const ScoreReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "sequence,object,frame,J,F\n";
  char buf[64];
  for (const auto& s : r.frames) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", s.j, s.f);
    os << s.sequence << "," << s.object << "," << s.frame << "," << buf << "\n";
  }
}

std::string format_table(const ScoreReport& r) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-24s %6s %7s %7s\n", "sequence", "object", "J", "F");
  os << buf;
  for (const auto& o : r.objects) {
    std::snprintf(buf, sizeof buf, "%-24s %6d %7.4f %7.4f\n", o.sequence.c_str(), o.object, o.j, o.f);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mean  J %.4f  F %.4f  J&F %.4f\n", r.j, r.f, r.jf);
  os << buf;
  return os.str();
}

}  // namespace warpvos::metrics
