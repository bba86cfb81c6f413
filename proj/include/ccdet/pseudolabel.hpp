#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccdet/datamodel.hpp"
#include "ccdet/geometry.hpp"

namespace ccdet {

/// Class-agnostic teacher output on a geometry-cue (or rgb) image.
struct Proposal {
  int image_id = 0;
  Modality modality = Modality::depth;
  BBox bbox{0.0, 0.0, 1.0, 1.0};
  double score = 0.0;

  bool operator==(const Proposal&) const = default;
};

struct PseudoLabelConfig {
  double score_threshold = 0.7;
  double nms_iou = 0.5;
  int max_per_image = 100;
  int first_annotation_id = 1;  // lets callers keep ids disjoint across sets
};

struct ScoredBox {
  BBox bbox{0.0, 0.0, 1.0, 1.0};
  double score = 0.0;

  bool operator==(const ScoredBox&) const = default;
};

struct PseudoGenStats {
  int rejected_rgb = 0;    // proposals on labeled rgb images
  int dropped_empty = 0;   // proposals with no area left after clamping
  int suppressed = 0;      // removed by score filter, NMS or the per-image cap
};

/// Keeps proposals with score >= tau, preserving order.
inline std::vector<Proposal> filter_proposals(const std::vector<Proposal>& props,
                                              double tau) {
  std::vector<Proposal> out;
  for (const auto& p : props)
    if (p.score >= tau) out.push_back(p);
  return out;
}

/// Greedy NMS over input positions: boxes are visited in descending-score
/// order (ties broken by smaller input index) and a box is suppressed when
/// its IoU with an already kept box exceeds iou_thresh. Returns the indices
/// of the kept boxes in visit order.
inline std::vector<int> nms_keep_indices(std::span<const ScoredBox> boxes,
                                         double iou_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[a].score > boxes[b].score;
  });
  std::vector<int> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (int k : kept) {
      if (iou(boxes[idx].bbox, boxes[k].bbox) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& boxes,
                                  double iou_thresh) {
  std::vector<ScoredBox> out;
  for (int idx : nms_keep_indices(boxes, iou_thresh)) out.push_back(boxes[idx]);
  return out;
}

/// Turns teacher proposals on depth/normal images into class-agnostic pseudo
/// annotations: clamp to the image, score filter, per-image NMS, per-image
/// cap. Proposals on labeled rgb images are rejected with a counted warning.
inline std::vector<Annotation> generate_pseudo_records(
    const std::vector<Proposal>& props, const std::vector<ImageRecord>& images,
    const PseudoLabelConfig& cfg, const ClassSplit& split,
    PseudoGenStats* stats = nullptr) {
  PseudoGenStats local;
  PseudoGenStats& st = stats ? *stats : local;

  std::map<int, const ImageRecord*> image_by_id;
  for (const auto& im : images) image_by_id[im.id] = &im;

  // clamp + reject, preserving input order per image
  std::map<int, std::vector<Proposal>> per_image;
  for (const auto& p : props) {
    const auto it = image_by_id.find(p.image_id);
    if (it == image_by_id.end())
      throw std::runtime_error("proposal references missing image id " +
                               std::to_string(p.image_id));
    const ImageRecord& im = *it->second;
    if (p.modality != im.modality)
      throw std::runtime_error("proposal modality " + to_string(p.modality) +
                               " does not match image " + std::to_string(im.id) +
                               " (" + to_string(im.modality) + ")");
    if (im.modality == Modality::rgb) {
      ++st.rejected_rgb;
      continue;
    }
    if (!(p.score >= 0.0 && p.score <= 1.0))
      throw std::runtime_error("proposal score " + std::to_string(p.score) +
                               " outside [0, 1]");
    const double w = static_cast<double>(im.width);
    const double h = static_cast<double>(im.height);
    const double x1 = std::clamp(p.bbox.x1, 0.0, w);
    const double y1 = std::clamp(p.bbox.y1, 0.0, h);
    const double x2 = std::clamp(p.bbox.x2, 0.0, w);
    const double y2 = std::clamp(p.bbox.y2, 0.0, h);
    if (!(x2 > x1) || !(y2 > y1)) {
      ++st.dropped_empty;
      continue;
    }
    Proposal q = p;
    q.bbox = BBox(x1, y1, x2, y2);
    per_image[p.image_id].push_back(q);
  }

  std::vector<Annotation> out;
  int next_id = cfg.first_annotation_id;
  for (auto& [image_id, image_props] : per_image) {
    const auto surviving = filter_proposals(image_props, cfg.score_threshold);
    std::vector<ScoredBox> boxes;
    boxes.reserve(surviving.size());
    for (const auto& p : surviving) boxes.push_back({p.bbox, p.score});
    auto kept = nms_keep_indices(boxes, cfg.nms_iou);
    if (static_cast<int>(kept.size()) > cfg.max_per_image)
      kept.resize(static_cast<std::size_t>(cfg.max_per_image));
    st.suppressed += static_cast<int>(image_props.size() - kept.size());
    for (int idx : kept) {
      out.push_back(Annotation{.id = next_id++,
                               .image_id = image_id,
                               .category_id = split.agnostic_id,
                               .bbox = surviving[static_cast<std::size_t>(idx)].bbox,
                               .is_pseudo = true,
                               .original_category_id = split.agnostic_id});
    }
  }
  return out;
}

/// Copies the base rgb image's annotations onto each geometry-cue image as
/// class-agnostic pseudo labels; the alternative to teacher proposals when
/// the unlabeled images inherit labels from their rgb sources.
inline std::vector<Annotation> pseudo_records_from_rgb_labels(
    const Dataset& ds, const ClassSplit& split, int first_annotation_id = 1) {
  std::map<int, std::vector<const Annotation*>> by_image;
  for (const auto& a : ds.annotations) by_image[a.image_id].push_back(&a);

  std::vector<Annotation> out;
  int next_id = first_annotation_id;
  for (const auto& im : ds.images) {
    if (im.modality == Modality::rgb || im.base_image_id == 0) continue;
    const auto it = by_image.find(im.base_image_id);
    if (it == by_image.end()) continue;
    for (const Annotation* a : it->second) {
      out.push_back(Annotation{.id = next_id++,
                               .image_id = im.id,
                               .category_id = split.agnostic_id,
                               .bbox = a->bbox,
                               .is_pseudo = true,
                               .original_category_id = split.agnostic_id});
    }
  }
  return out;
}

/// One pseudo-labeled image set destined for merging.
struct PseudoSet {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
};

/// Merges the labeled dataset with pseudo-labeled sets into one training
/// dataset. Image and annotation ids must be globally unique; categories are
/// unioned and an agnostic placeholder is added when pseudo annotations need
/// one. Output order: images by id, annotations by (image id, id).
inline Dataset merge_datasets(const Dataset& labeled,
                              const std::vector<PseudoSet>& pseudo_sets) {
  Dataset out = labeled;
  std::set<int> image_ids, annotation_ids;
  for (const auto& im : out.images) image_ids.insert(im.id);
  for (const auto& a : out.annotations) annotation_ids.insert(a.id);

  std::set<int> category_ids;
  for (const auto& c : out.categories) category_ids.insert(c.id);

  for (const auto& set : pseudo_sets) {
    for (const auto& im : set.images) {
      if (!image_ids.insert(im.id).second)
        throw std::runtime_error("merge: duplicate image id " + std::to_string(im.id));
      out.images.push_back(im);
    }
    for (const auto& a : set.annotations) {
      if (!annotation_ids.insert(a.id).second)
        throw std::runtime_error("merge: duplicate annotation id " +
                                 std::to_string(a.id));
      if (!category_ids.count(a.category_id)) {
        out.categories.push_back(Category{a.category_id, "object", Split::unassigned});
        category_ids.insert(a.category_id);
      }
      out.annotations.push_back(a);
    }
  }
  detail::sort_canonical(out);
  validate(out);
  return out;
}

// ---------------------------------------------------------------------------
// Proposal file I/O: newline-delimited JSON records.

inline nlohmann::json to_json(const Proposal& p) {
  return {{"image_id", p.image_id},
          {"modality", to_string(p.modality)},
          {"bbox", {p.bbox.x1, p.bbox.y1, p.bbox.width(), p.bbox.height()}},
          {"score", p.score}};
}

inline std::vector<Proposal> load_proposals(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::vector<Proposal> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const auto& box = j.at("bbox");
      out.push_back(Proposal{
          .image_id = j.at("image_id").get<int>(),
          .modality = modality_from_string(j.at("modality").get<std::string>()),
          .bbox = BBox::from_xywh(box.at(0).get<double>(), box.at(1).get<double>(),
                                  box.at(2).get<double>(), box.at(3).get<double>()),
          .score = j.at("score").get<double>()});
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_proposals(const std::vector<Proposal>& props,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  for (const auto& p : props) out << to_json(p).dump() << '\n';
}

}  // namespace ccdet
