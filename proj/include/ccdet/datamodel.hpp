#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ccdet/geometry.hpp"

namespace ccdet {

enum class Split { unassigned, common, novel };
enum class Modality { rgb, depth, normal };
enum class Source { labeled, pseudo };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::common:
      return "common";
    case Split::novel:
      return "novel";
    default:
      return "unassigned";
  }
}

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::depth:
      return "depth";
    case Modality::normal:
      return "normal";
    default:
      return "rgb";
  }
}

inline std::string to_string(Source s) {
  return s == Source::pseudo ? "pseudo" : "labeled";
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "rgb") return Modality::rgb;
  if (s == "depth") return Modality::depth;
  if (s == "normal") return Modality::normal;
  throw std::runtime_error("unknown modality '" + s + "'");
}

inline Source source_from_string(const std::string& s) {
  if (s == "labeled") return Source::labeled;
  if (s == "pseudo") return Source::pseudo;
  throw std::runtime_error("unknown source '" + s + "'");
}

inline Split split_from_string(const std::string& s) {
  if (s == "common") return Split::common;
  if (s == "novel") return Split::novel;
  if (s == "unassigned") return Split::unassigned;
  throw std::runtime_error("unknown split '" + s + "'");
}

struct Category {
  int id = 0;
  std::string name;
  Split split = Split::unassigned;

  bool operator==(const Category&) const = default;
};

struct ImageRecord {
  int id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
  Modality modality = Modality::rgb;
  Source source = Source::labeled;
  int base_image_id = 0;  // RGB image a geometry-cue image was derived from

  bool operator==(const ImageRecord&) const = default;
};

struct Annotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  BBox bbox{0.0, 0.0, 1.0, 1.0};
  bool is_pseudo = false;
  int original_category_id = 0;  // category before any agnostic remap

  bool operator==(const Annotation&) const = default;
};

/// Returns the category the annotation carried before remapping, falling
/// back to the current id when no provenance was recorded.
inline int original_category(const Annotation& a) {
  return a.original_category_id != 0 ? a.original_category_id : a.category_id;
}

struct ClassSplit {
  std::set<int> common_ids;
  std::set<int> novel_ids;
  int agnostic_id = 0;

  ClassSplit() = default;
  ClassSplit(std::set<int> common, std::set<int> novel, int agnostic)
      : common_ids(std::move(common)),
        novel_ids(std::move(novel)),
        agnostic_id(agnostic) {
    std::vector<int> both;
    std::set_intersection(common_ids.begin(), common_ids.end(),
                          novel_ids.begin(), novel_ids.end(),
                          std::back_inserter(both));
    if (!both.empty()) {
      std::ostringstream os;
      os << "class split: categories listed as both common and novel:";
      for (int id : both) os << ' ' << id;
      throw std::runtime_error(os.str());
    }
    if (common_ids.count(agnostic_id) || novel_ids.count(agnostic_id)) {
      throw std::runtime_error("class split: agnostic_id " +
                               std::to_string(agnostic_id) +
                               " collides with a listed category");
    }
  }

  bool is_novel(int category_id) const { return novel_ids.count(category_id) > 0; }
  bool is_common(int category_id) const { return common_ids.count(category_id) > 0; }
  bool covers(int category_id) const {
    return is_novel(category_id) || is_common(category_id);
  }
};

struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<Category> categories;

  const ImageRecord* find_image(int id) const {
    for (const auto& im : images)
      if (im.id == id) return &im;
    return nullptr;
  }
  const Category* find_category(int id) const {
    for (const auto& c : categories)
      if (c.id == id) return &c;
    return nullptr;
  }

  bool operator==(const Dataset&) const = default;
};

struct LoadStats {
  int clamped = 0;  // boxes partially outside the image, clamped in place
  int dropped = 0;  // boxes with no area left after clamping
};

namespace detail {

// Stabilizes hi so that corner<->size conversion round-trips exactly:
// serialized size hi-lo must reproduce hi as lo + (hi-lo).
inline double stable_extent(double lo, double hi) {
  for (int i = 0; i < 8; ++i) {
    const double next = lo + (hi - lo);
    if (next == hi) break;
    hi = next;
  }
  return hi;
}

inline void sort_canonical(Dataset& ds) {
  std::sort(ds.images.begin(), ds.images.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
  std::sort(ds.categories.begin(), ds.categories.end(),
            [](const Category& a, const Category& b) { return a.id < b.id; });
  std::sort(ds.annotations.begin(), ds.annotations.end(),
            [](const Annotation& a, const Annotation& b) {
              return std::tie(a.image_id, a.id) < std::tie(b.image_id, b.id);
            });
}

}  // namespace detail

/// Referential integrity, id uniqueness, positive extents, boxes inside
/// image bounds. Throws on the first violation found.
inline void validate(const Dataset& ds) {
  std::map<int, const ImageRecord*> images;
  for (const auto& im : ds.images) {
    if (im.id <= 0) throw std::runtime_error("image id must be positive");
    if (im.width <= 0 || im.height <= 0)
      throw std::runtime_error("image " + std::to_string(im.id) +
                               ": non-positive dimensions");
    if (!images.emplace(im.id, &im).second)
      throw std::runtime_error("duplicate image id " + std::to_string(im.id));
    if (im.base_image_id != 0 && im.modality == Modality::rgb)
      throw std::runtime_error("image " + std::to_string(im.id) +
                               ": rgb image cannot reference a base image");
  }
  std::set<int> categories;
  for (const auto& c : ds.categories) {
    if (c.id <= 0) throw std::runtime_error("category id must be positive");
    if (!categories.insert(c.id).second)
      throw std::runtime_error("duplicate category id " + std::to_string(c.id));
  }
  std::set<int> annotation_ids;
  for (const auto& a : ds.annotations) {
    if (a.id <= 0) throw std::runtime_error("annotation id must be positive");
    if (!annotation_ids.insert(a.id).second)
      throw std::runtime_error("duplicate annotation id " + std::to_string(a.id));
    auto im = images.find(a.image_id);
    if (im == images.end())
      throw std::runtime_error("annotation " + std::to_string(a.id) +
                               " references missing image id " +
                               std::to_string(a.image_id));
    if (!categories.count(a.category_id))
      throw std::runtime_error("annotation " + std::to_string(a.id) +
                               " references missing category id " +
                               std::to_string(a.category_id));
    const auto& rec = *im->second;
    const double w = static_cast<double>(rec.width);
    const double h = static_cast<double>(rec.height);
    if (a.bbox.x1 < 0.0 || a.bbox.y1 < 0.0 || a.bbox.x2 > w || a.bbox.y2 > h)
      throw std::runtime_error("annotation " + std::to_string(a.id) +
                               " extends outside image bounds");
  }
}

/// Parses a COCO-format document. Boxes arrive as [x, y, w, h], are converted
/// to corner form, clamped to the image extent, and dropped (with a counted
/// warning) when nothing is left. Unknown keys are ignored.
inline Dataset parse_dataset(const nlohmann::json& doc, LoadStats* stats = nullptr) {
  LoadStats local;
  LoadStats& st = stats ? *stats : local;

  if (!doc.is_object()) throw std::runtime_error("top-level document must be an object");
  Dataset ds;
  for (const auto& j : doc.value("images", nlohmann::json::array())) {
    ImageRecord im;
    im.id = j.at("id").get<int>();
    im.width = j.at("width").get<int>();
    im.height = j.at("height").get<int>();
    im.file_name = j.value("file_name", std::string());
    im.modality = modality_from_string(j.value("modality", std::string("rgb")));
    im.source = source_from_string(j.value("source", std::string("labeled")));
    im.base_image_id = j.value("base_image_id", 0);
    ds.images.push_back(std::move(im));
  }
  for (const auto& j : doc.value("categories", nlohmann::json::array())) {
    Category c;
    c.id = j.at("id").get<int>();
    c.name = j.value("name", std::string());
    c.split = split_from_string(j.value("split", std::string("unassigned")));
    ds.categories.push_back(std::move(c));
  }
  std::map<int, const ImageRecord*> image_by_id;
  for (const auto& rec : ds.images) image_by_id[rec.id] = &rec;
  for (const auto& j : doc.value("annotations", nlohmann::json::array())) {
    const int id = j.at("id").get<int>();
    const int image_id = j.at("image_id").get<int>();
    const auto it = image_by_id.find(image_id);
    const ImageRecord* im = it == image_by_id.end() ? nullptr : it->second;
    if (!im)
      throw std::runtime_error("annotation " + std::to_string(id) +
                               " references missing image id " +
                               std::to_string(image_id));
    const auto& box = j.at("bbox");
    if (!box.is_array() || box.size() != 4)
      throw std::runtime_error("annotation " + std::to_string(id) +
                               ": bbox must be [x, y, w, h]");
    const double x = box[0].get<double>();
    const double y = box[1].get<double>();
    const double w = box[2].get<double>();
    const double h = box[3].get<double>();

    const double W = static_cast<double>(im->width);
    const double H = static_cast<double>(im->height);
    double x1 = std::clamp(x, 0.0, W);
    double y1 = std::clamp(y, 0.0, H);
    double x2 = std::clamp(x + w, 0.0, W);
    double y2 = std::clamp(y + h, 0.0, H);
    if (x1 != x || y1 != y || x2 != x + w || y2 != y + h) ++st.clamped;
    if (!(x2 > x1) || !(y2 > y1)) {
      ++st.dropped;  // nothing left inside the image
      continue;
    }
    x2 = detail::stable_extent(x1, x2);
    y2 = detail::stable_extent(y1, y2);

    Annotation a{.id = id,
                 .image_id = image_id,
                 .category_id = j.at("category_id").get<int>(),
                 .bbox = BBox(x1, y1, x2, y2),
                 .is_pseudo = j.value("is_pseudo", false),
                 .original_category_id = j.value("source_category_id", 0)};
    if (a.original_category_id == 0) a.original_category_id = a.category_id;
    ds.annotations.push_back(std::move(a));
  }
  detail::sort_canonical(ds);
  validate(ds);
  return ds;
}

inline Dataset load_dataset(const std::string& path, LoadStats* stats = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": parse error at byte " +
                             std::to_string(e.byte) + ": " + e.what());
  }
  try {
    return parse_dataset(doc, stats);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

inline nlohmann::json to_json(const Dataset& ds) {
  nlohmann::json doc;
  doc["images"] = nlohmann::json::array();
  for (const auto& im : ds.images) {
    nlohmann::json j{{"id", im.id},
                     {"width", im.width},
                     {"height", im.height},
                     {"modality", to_string(im.modality)},
                     {"source", to_string(im.source)}};
    if (!im.file_name.empty()) j["file_name"] = im.file_name;
    if (im.base_image_id != 0) j["base_image_id"] = im.base_image_id;
    doc["images"].push_back(std::move(j));
  }
  doc["categories"] = nlohmann::json::array();
  for (const auto& c : ds.categories) {
    nlohmann::json j{{"id", c.id}, {"name", c.name}};
    if (c.split != Split::unassigned) j["split"] = to_string(c.split);
    doc["categories"].push_back(std::move(j));
  }
  doc["annotations"] = nlohmann::json::array();
  for (const auto& a : ds.annotations) {
    nlohmann::json j{{"id", a.id},
                     {"image_id", a.image_id},
                     {"category_id", a.category_id},
                     {"bbox", {a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()}},
                     {"is_pseudo", a.is_pseudo}};
    if (a.original_category_id != 0 && a.original_category_id != a.category_id)
      j["source_category_id"] = a.original_category_id;
    doc["annotations"].push_back(std::move(j));
  }
  return doc;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  out << to_json(ds).dump(2) << '\n';
}

/// Resolves a split document ({"common": [...], "novel": [...],
/// "agnostic_id": n}, entries by category id or name) against a category
/// table.
inline ClassSplit resolve_class_split(const nlohmann::json& doc,
                                      const std::vector<Category>& categories) {
  auto resolve = [&](const nlohmann::json& entry) -> int {
    if (entry.is_number_integer()) return entry.get<int>();
    if (entry.is_string()) {
      const auto name = entry.get<std::string>();
      for (const auto& c : categories)
        if (c.name == name) return c.id;
      throw std::runtime_error("class split: unknown category name '" + name + "'");
    }
    throw std::runtime_error("class split: entries must be ids or names");
  };
  std::set<int> common, novel;
  for (const auto& e : doc.value("common", nlohmann::json::array())) {
    if (!common.insert(resolve(e)).second)
      throw std::runtime_error("class split: duplicate entry in common list");
  }
  for (const auto& e : doc.value("novel", nlohmann::json::array())) {
    if (!novel.insert(resolve(e)).second)
      throw std::runtime_error("class split: duplicate entry in novel list");
  }
  if (!doc.contains("agnostic_id"))
    throw std::runtime_error("class split: missing agnostic_id");
  return ClassSplit(std::move(common), std::move(novel), doc["agnostic_id"].get<int>());
}

inline ClassSplit load_class_split(const std::string& path,
                                   const std::vector<Category>& categories) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": parse error at byte " +
                             std::to_string(e.byte) + ": " + e.what());
  }
  try {
    return resolve_class_split(doc, categories);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

/// Marks every category common or novel. Every dataset category must be
/// covered exactly once; offenders are listed in the error.
inline Dataset apply_class_split(Dataset ds, const ClassSplit& split) {
  std::vector<int> uncovered;
  for (auto& c : ds.categories) {
    if (split.is_common(c.id))
      c.split = Split::common;
    else if (split.is_novel(c.id))
      c.split = Split::novel;
    else
      uncovered.push_back(c.id);
  }
  if (!uncovered.empty()) {
    std::ostringstream os;
    os << "class split does not cover category ids:";
    for (int id : uncovered) os << ' ' << id;
    throw std::runtime_error(os.str());
  }
  return ds;
}

enum class RemapMode { all, novel_only };

/// Collapses categories to the split's agnostic id: every annotation
/// (mode=all) or only novel-class annotations (mode=novel_only). The
/// pre-remap category survives in the provenance field, which makes the
/// operation idempotent.
inline Dataset remap_agnostic(Dataset ds, const ClassSplit& split, RemapMode mode) {
  for (auto& a : ds.annotations) {
    const int orig = original_category(a);
    if (orig != split.agnostic_id && !split.covers(orig))
      throw std::runtime_error("remap: annotation " + std::to_string(a.id) +
                               " category " + std::to_string(orig) +
                               " is not covered by the class split");
    if (mode == RemapMode::novel_only && !split.is_novel(orig)) continue;
    a.original_category_id = orig;
    a.category_id = split.agnostic_id;
  }
  const bool used = std::any_of(ds.annotations.begin(), ds.annotations.end(),
                                [&](const Annotation& a) {
                                  return a.category_id == split.agnostic_id;
                                });
  if (used && !ds.find_category(split.agnostic_id)) {
    ds.categories.push_back(Category{split.agnostic_id, "object", Split::unassigned});
    detail::sort_canonical(ds);
  }
  return ds;
}

}  // namespace ccdet
