#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehnet/casm.h"
#include "ehnet/featext.h"

namespace ehnet {

class TaxonomyError : public Error {
 public:
  using Error::Error;
};

class RenderError : public Error {
 public:
  using Error::Error;
};

class ScheduleError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Synthetic taxonomy
// ---------------------------------------------------------------------------

struct TaxonomySpec {
  std::size_t groups = 4;
  std::size_t classes_per_group = 4;
  std::size_t image_size = 32;
};

/// Attributes shared by every class of a group.
struct GroupDef {
  int group = 0;
  double hue = 0.0;           // band centre on the unit colour wheel
  double hue_halfwidth = 0.0;
  double freq_lo = 0.0;       // texture frequency band, cycles per image
  double freq_hi = 0.0;
};

struct ClassDef {
  int class_id = 0;
  int group = 0;
  double hue = 0.0;
  double freq = 0.0;
  std::size_t corners = 3;
  double area_lo = 0.0;  // object area as a fraction of the image
  double area_hi = 0.0;
};

struct Taxonomy {
  TaxonomySpec spec;
  std::vector<GroupDef> groups;
  std::vector<ClassDef> classes;  // indexed by class_id

  const ClassDef& at(int class_id) const;
};

Taxonomy gen_taxonomy(std::uint64_t seed, const TaxonomySpec& spec);

struct RenderedSample {
  RasterImage image;
  BinaryMask mask;
};

/// One textured polygon of the class on a noise background.
RenderedSample render_sample(const Taxonomy& tax, int class_id, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Session protocol
// ---------------------------------------------------------------------------

struct SampleRef {
  int class_id = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const SampleRef&, const SampleRef&) = default;
};

struct Session {
  std::vector<int> classes;       // label space of this session
  std::vector<SampleRef> support;
  std::vector<SampleRef> query;   // drawn from every class seen so far
};

struct SessionSchedule {
  std::size_t shots = 1;
  std::vector<Session> sessions;

  /// Union of the label spaces of sessions 0..i.
  std::vector<int> seen_classes(std::size_t i) const;
};

struct ProtocolSpec {
  std::size_t base_classes = 8;
  std::vector<std::size_t> new_per_session = {3, 3, 2};
  std::size_t shots = 1;
  std::size_t base_support_per_class = 5;
  std::size_t queries_per_class = 2;
};

/// Base classes are spread evenly over the groups; the rest are shuffled into
/// the incremental sessions. Class assignment and base-session supports
/// depend on `seed` only; every other sample seed also on `draw`.
SessionSchedule build_schedule(const Taxonomy& tax, const ProtocolSpec& proto, std::uint64_t seed,
                               std::uint64_t draw = 0);

/// Throws ScheduleError on overlapping label spaces, a query set that is not
/// the union of the label spaces so far, or a shot count other than k.
void validate_schedule(const SessionSchedule& s);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Ground-truth label map of a single-object sample.
LabelMap label_map(const BinaryMask& mask, int class_id);

/// Intersection over union of one class; nullopt if absent from both maps.
std::optional<double> iou(const LabelMap& pred, const LabelMap& gt, int class_id);

/// Unweighted mean IoU over `classes`, skipping classes absent from both.
std::optional<double> miou(const LabelMap& pred, const LabelMap& gt, std::span<const int> classes);

/// Global intersection and union counts accumulated over many frames.
class IouAccumulator {
 public:
  void add(const LabelMap& pred, const LabelMap& gt, std::span<const int> classes);
  std::optional<double> iou(int class_id) const;
  std::optional<double> miou(std::span<const int> classes) const;

 private:
  std::map<int, std::array<std::size_t, 2>> counts_;
};

/// Mean of the present values, nullopt if none.
std::optional<double> mean_of(std::span<const std::optional<double>> values);

}  // namespace ehnet
