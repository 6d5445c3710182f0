#include "ehnet/bench.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace ehnet {

namespace {

constexpr std::size_t kMinCorners = 3;
constexpr std::size_t kMaxCorners = 8;
constexpr double kBandWidth = 2.0;  // texture band width, cycles per image
constexpr double kBandGap = 1.0;
constexpr double kBandStart = 2.0;
constexpr std::size_t kMaxRenderAttempts = 100;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

}  // namespace

const ClassDef& Taxonomy::at(int class_id) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= classes.size()) {
    throw TaxonomyError("unknown class id " + std::to_string(class_id));
  }
  return classes[static_cast<std::size_t>(class_id)];
}

Taxonomy gen_taxonomy(std::uint64_t seed, const TaxonomySpec& spec) {
  if (spec.groups == 0 || spec.classes_per_group == 0) throw TaxonomyError("empty taxonomy");
  if (spec.classes_per_group > kMaxCorners - kMinCorners + 1) {
    throw TaxonomyError("at most " + std::to_string(kMaxCorners - kMinCorners + 1) +
                        " classes per group (one corner count each)");
  }
  if (spec.image_size < 16 || spec.image_size % 4 != 0) {
    throw TaxonomyError("image size must be a multiple of 4 and at least 16");
  }
  const double top = kBandStart + static_cast<double>(spec.groups - 1) * (kBandWidth + kBandGap) + kBandWidth;
  if (top >= static_cast<double>(spec.image_size) / 2.0) {
    throw TaxonomyError("texture bands of " + std::to_string(spec.groups) +
                        " groups exceed the Nyquist limit of a " + std::to_string(spec.image_size) +
                        " pixel image");
  }

  Rng rng(derive_seed(seed, {0x7461786fULL}));
  Taxonomy tax;
  tax.spec = spec;
  const double g_count = static_cast<double>(spec.groups);
  const std::size_t l = spec.classes_per_group;
  for (std::size_t g = 0; g < spec.groups; ++g) {
    GroupDef gd;
    gd.group = static_cast<int>(g);
    gd.hue = (static_cast<double>(g) + 0.5) / g_count;
    gd.hue_halfwidth = 0.3 / g_count;
    gd.freq_lo = kBandStart + static_cast<double>(g) * (kBandWidth + kBandGap);
    gd.freq_hi = gd.freq_lo + kBandWidth;
    tax.groups.push_back(gd);

    std::vector<std::size_t> hue_slot(l), freq_slot(l), corner_slot(l);
    for (std::size_t j = 0; j < l; ++j) hue_slot[j] = freq_slot[j] = corner_slot[j] = j;
    std::shuffle(hue_slot.begin(), hue_slot.end(), rng);
    std::shuffle(freq_slot.begin(), freq_slot.end(), rng);
    std::shuffle(corner_slot.begin(), corner_slot.end(), rng);
    for (std::size_t j = 0; j < l; ++j) {
      ClassDef c;
      c.class_id = static_cast<int>(g * l + j);
      c.group = gd.group;
      const double u_h = l == 1 ? 0.5 : static_cast<double>(hue_slot[j]) / static_cast<double>(l - 1);
      const double u_f = l == 1 ? 0.5 : static_cast<double>(freq_slot[j]) / static_cast<double>(l - 1);
      c.hue = gd.hue + (2.0 * u_h - 1.0) * gd.hue_halfwidth;
      c.freq = gd.freq_lo + u_f * (gd.freq_hi - gd.freq_lo);
      c.corners = kMinCorners + corner_slot[j];
      c.area_lo = uniform(rng, 0.08, 0.14);
      c.area_hi = c.area_lo + 0.08;
      tax.classes.push_back(c);
    }
  }
  return tax;
}

RenderedSample render_sample(const Taxonomy& tax, int class_id, std::uint64_t seed) {
  const ClassDef& c = tax.at(class_id);
  const std::size_t s = tax.spec.image_size;
  const double sd = static_cast<double>(s);
  const double total = sd * sd;
  for (std::size_t attempt = 0; attempt < kMaxRenderAttempts; ++attempt) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(class_id), attempt}));
    const double n = static_cast<double>(c.corners);
    const double span = c.area_hi - c.area_lo;
    const double area = uniform(rng, c.area_lo + 0.15 * span, c.area_hi - 0.15 * span) * total;
    const double r = std::sqrt(2.0 * area / (n * std::sin(2.0 * std::numbers::pi / n)));
    const double margin = 1.1 * r;
    if (2 * margin >= sd) continue;
    const double cx = uniform(rng, margin, sd - margin);
    const double cy = uniform(rng, margin, sd - margin);
    const double rot = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    std::vector<std::array<double, 2>> poly;
    for (std::size_t k = 0; k < c.corners; ++k) {
      const double a = rot + 2.0 * std::numbers::pi * static_cast<double>(k) / n;
      const double rr = r * uniform(rng, 0.94, 1.06);
      poly.push_back({cx + rr * std::cos(a), cy + rr * std::sin(a)});
    }
    BinaryMask mask(s, s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        mask.at(y, x) = inside_polygon(poly, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) ? 1 : 0;
    const double frac = static_cast<double>(mask.count()) / total;
    if (frac < c.area_lo || frac > c.area_hi || downsample_mask(mask, 4).count() == 0) continue;

    Tensor px({3, s, s});
    const double gray = uniform(rng, 0.3, 0.6);
    for (auto& v : px.values()) v = std::clamp(gray + uniform(rng, -0.15, 0.15), 0.0, 1.0);
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double hue = c.hue + uniform(rng, -0.01, 0.01);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        if (!mask.at(y, x)) continue;
        const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / sd;
        const double tex = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * c.freq * u + phase);
        const auto rgb = hsv_to_rgb(hue, 0.85, 0.25 + 0.7 * tex);
        for (std::size_t ch = 0; ch < 3; ++ch) px.at(ch, y, x) = rgb[ch];
      }
    return {RasterImage(std::move(px)), std::move(mask)};
  }
  throw RenderError("class " + std::to_string(class_id) + ": no valid geometry after " +
                    std::to_string(kMaxRenderAttempts) + " attempts (seed " + std::to_string(seed) + ")");
}

// ---------------------------------------------------------------------------

std::vector<int> SessionSchedule::seen_classes(std::size_t i) const {
  std::vector<int> out;
  for (std::size_t j = 0; j <= i && j < sessions.size(); ++j)
    out.insert(out.end(), sessions[j].classes.begin(), sessions[j].classes.end());
  return out;
}

SessionSchedule build_schedule(const Taxonomy& tax, const ProtocolSpec& proto, std::uint64_t seed,
                               std::uint64_t draw) {
  const std::size_t g = tax.groups.size();
  std::size_t demand = proto.base_classes;
  for (auto n : proto.new_per_session) demand += n;
  if (proto.base_classes == 0) throw ScheduleError("at least one base class is required");
  if (demand > tax.classes.size()) {
    throw ScheduleError("protocol needs " + std::to_string(demand) + " classes, taxonomy has " +
                        std::to_string(tax.classes.size()));
  }
  if (proto.shots == 0 || proto.queries_per_class == 0 || proto.base_support_per_class == 0) {
    throw ScheduleError("shots, base support and query counts must be positive");
  }

  Rng rng(derive_seed(seed, {0x73636864ULL}));
  std::vector<std::vector<int>> by_group(g);
  for (const auto& c : tax.classes) by_group[static_cast<std::size_t>(c.group)].push_back(c.class_id);
  for (auto& v : by_group) std::shuffle(v.begin(), v.end(), rng);
  std::vector<std::size_t> group_order(g);
  for (std::size_t i = 0; i < g; ++i) group_order[i] = i;
  std::shuffle(group_order.begin(), group_order.end(), rng);

  std::vector<int> base, rest;
  std::vector<std::size_t> taken(g, 0);
  for (std::size_t k = 0; base.size() < proto.base_classes; ++k) {
    const std::size_t gi = group_order[k % g];
    if (taken[gi] < by_group[gi].size()) base.push_back(by_group[gi][taken[gi]++]);
  }
  for (std::size_t gi = 0; gi < g; ++gi)
    for (std::size_t j = taken[gi]; j < by_group[gi].size(); ++j) rest.push_back(by_group[gi][j]);
  std::sort(rest.begin(), rest.end());
  std::shuffle(rest.begin(), rest.end(), rng);

  SessionSchedule sched;
  sched.shots = proto.shots;
  const std::uint64_t base_seed = derive_seed(seed, {0x73616d70ULL, 0});
  const std::uint64_t sample_seed = derive_seed(seed, {0x73616d70ULL, draw});
  auto ref = [&](int cid, std::uint64_t kind, std::size_t j) {
    const std::uint64_t from = kind == 0 && sched.sessions.empty() ? base_seed : sample_seed;
    return SampleRef{cid, derive_seed(from, {static_cast<std::uint64_t>(cid), kind, j})};
  };
  std::size_t next = 0;
  for (std::size_t i = 0; i <= proto.new_per_session.size(); ++i) {
    Session s;
    if (i == 0) {
      s.classes = base;
    } else {
      for (std::size_t j = 0; j < proto.new_per_session[i - 1]; ++j) s.classes.push_back(rest[next++]);
    }
    const std::size_t per_class = i == 0 ? proto.base_support_per_class : proto.shots;
    for (int cid : s.classes)
      for (std::size_t j = 0; j < per_class; ++j) s.support.push_back(ref(cid, 0, j));
    sched.sessions.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < sched.sessions.size(); ++i)
    for (int cid : sched.seen_classes(i))
      for (std::size_t j = 0; j < proto.queries_per_class; ++j) sched.sessions[i].query.push_back(ref(cid, 1, j));
  validate_schedule(sched);
  return sched;
}

void validate_schedule(const SessionSchedule& s) {
  if (s.sessions.empty()) throw ScheduleError("schedule has no sessions");
  std::set<int> seen;
  for (std::size_t i = 0; i < s.sessions.size(); ++i) {
    const Session& ses = s.sessions[i];
    if (ses.classes.empty()) throw ScheduleError("session " + std::to_string(i) + " has no classes");
    const std::set<int> own(ses.classes.begin(), ses.classes.end());
    if (own.size() != ses.classes.size()) {
      throw ScheduleError("session " + std::to_string(i) + " lists a class twice");
    }
    for (int c : own)
      if (seen.count(c)) {
        throw ScheduleError("class " + std::to_string(c) + " of session " + std::to_string(i) +
                            " already belongs to an earlier session");
      }
    seen.insert(own.begin(), own.end());

    std::map<int, std::size_t> shots;
    for (const auto& r : ses.support) {
      if (!own.count(r.class_id)) {
        throw ScheduleError("session " + std::to_string(i) + " support contains foreign class " +
                            std::to_string(r.class_id));
      }
      ++shots[r.class_id];
    }
    for (int c : own) {
      const std::size_t n = shots.count(c) ? shots[c] : 0;
      if (n == 0 || (i > 0 && n != s.shots)) {
        throw ScheduleError("session " + std::to_string(i) + " class " + std::to_string(c) + " has " +
                            std::to_string(n) + " support samples, expected " +
                            (i > 0 ? std::to_string(s.shots) : std::string("at least 1")));
      }
    }
    std::set<int> qspace;
    for (const auto& r : ses.query) qspace.insert(r.class_id);
    if (qspace != seen) {
      throw ScheduleError("session " + std::to_string(i) +
                          " query label space is not the union of all label spaces so far");
    }
  }
}

// ---------------------------------------------------------------------------

LabelMap label_map(const BinaryMask& mask, int class_id) {
  LabelMap out(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.values.size(); ++i)
    if (mask.values[i]) out.labels[i] = class_id;
  return out;
}

namespace {

void check_extents(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("label map extents differ");
  }
}

}  // namespace

std::optional<double> iou(const LabelMap& pred, const LabelMap& gt, int class_id) {
  check_extents(pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == class_id, g = gt.labels[i] == class_id;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<double> miou(const LabelMap& pred, const LabelMap& gt, std::span<const int> classes) {
  std::vector<std::optional<double>> v;
  for (int c : classes) v.push_back(iou(pred, gt, c));
  return mean_of(v);
}

void IouAccumulator::add(const LabelMap& pred, const LabelMap& gt, std::span<const int> classes) {
  check_extents(pred, gt);
  for (int c : classes) {
    auto& cnt = counts_[c];
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      const bool p = pred.labels[i] == c, g = gt.labels[i] == c;
      cnt[0] += p && g;
      cnt[1] += p || g;
    }
  }
}

std::optional<double> IouAccumulator::iou(int class_id) const {
  const auto it = counts_.find(class_id);
  if (it == counts_.end() || it->second[1] == 0) return std::nullopt;
  return static_cast<double>(it->second[0]) / static_cast<double>(it->second[1]);
}

std::optional<double> IouAccumulator::miou(std::span<const int> classes) const {
  std::vector<std::optional<double>> v;
  for (int c : classes) v.push_back(iou(c));
  return mean_of(v);
}

std::optional<double> mean_of(std::span<const std::optional<double>> values) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      s += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

}  // namespace ehnet
