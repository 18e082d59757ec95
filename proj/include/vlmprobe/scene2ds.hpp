#pragma once

// 2DS: synthetic scenes of colored shapes with geometric question answering.
//
// Coordinates live in the unit square with the origin at the top-left corner
// and y growing downward, so "bottom" is the largest y.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmprobe/rng.hpp"

namespace vlmprobe {

enum class Color { Red, Green, Blue, Yellow, Purple, Orange, Cyan, Brown };
enum class Shape { Circle, Square, Triangle, Diamond, Cross };

inline constexpr std::size_t kColorCount = 8;
inline constexpr std::size_t kShapeCount = 5;
/// Minimum coordinate separation, as a fraction of the canvas, on both axes.
inline constexpr double kAmbiguityBand = 0.1;
inline constexpr double kMinObjectSize = 0.06;
inline constexpr double kMaxObjectSize = 0.1;
inline constexpr std::size_t kMinObjects = 2;
inline constexpr std::size_t kMaxObjects = 6;
inline constexpr std::size_t kDefaultResolution = 128;
inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kTemplateVersion = 1;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};
inline constexpr Rgb kBackground{255, 255, 255};

std::string_view color_name(Color c);
std::string_view shape_name(Shape s);
Rgb color_rgb(Color c);
Color parse_color(std::string_view name);
Shape parse_shape(std::string_view name);

struct SceneObject {
  Shape shape = Shape::Circle;
  Color color = Color::Red;
  double x = 0.5;
  double y = 0.5;
  double size = 0.1;  // side / diameter as a fraction of the canvas

  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::string id;
  std::size_t meta_category = 0;  // object count
  std::vector<SceneObject> objects;

  bool operator==(const Scene&) const = default;
};

/// Throws unless every object lies inside the canvas and every pair is
/// separated by at least the ambiguity band on both axes.
void validate_scene(const Scene& scene);

/// Distinct colors; distinct shapes while the shape set lasts.
std::vector<SceneObject> draw_object_set(std::size_t n_objects, Rng& rng);
/// New random positions for the same objects. Retries a bounded number of
/// times and then throws with `seed` in the message.
std::vector<SceneObject> place_objects(std::vector<SceneObject> objects, Rng& rng,
                                       std::uint64_t seed);
std::vector<SceneObject> generate_scene(std::size_t n_objects, Rng& rng, std::uint64_t seed);

/// 6x6 grid variant: objects sit at cell centers in distinct rows and columns.
inline constexpr std::size_t kLiteGrid = 6;
std::vector<SceneObject> place_objects_on_grid(std::vector<SceneObject> objects, Rng& rng);
/// (row, col) of the grid cell containing the point.
std::pair<std::size_t, std::size_t> grid_cell(double x, double y);

// ---------------------------------------------------------------------------
// Questions

enum class SemanticAxis { Color, Shape, ColorShape };
enum class SpatialAxis { Absolute, Relative };
enum class Direction { Left, Right, Top, Bottom };

std::string_view to_string(SemanticAxis a);
std::string_view to_string(SpatialAxis a);
std::string_view to_string(Direction d);
SemanticAxis parse_semantic_axis(std::string_view s);
SpatialAxis parse_spatial_axis(std::string_view s);
Direction parse_direction(std::string_view s);

/// Identifies an object by color, shape, or both.
struct ObjectRef {
  std::optional<Color> color;
  std::optional<Shape> shape;

  bool matches(const SceneObject& o) const;
  std::string describe() const;  // "red", "circle", or "red circle"
  bool operator==(const ObjectRef&) const = default;
};

struct Question {
  std::string id;
  std::string scene_id;
  std::size_t meta_category = 0;
  SemanticAxis semantic = SemanticAxis::Color;
  SpatialAxis spatial = SpatialAxis::Absolute;
  Direction direction = Direction::Left;  // absolute side, or relation of subject to reference
  ObjectRef subject;                      // relative questions only
  ObjectRef reference;
  std::string text;
  std::string gold;
  std::vector<std::string> choices;

  /// "Color_abs.", "Shape_color_rel.", ...
  std::string category() const;
  bool operator==(const Question&) const = default;
};

/// Six questions, one per (semantic, spatial) cell, gold from oracle_answer.
std::vector<Question> generate_questions(const Scene& scene, Rng& rng);

/// Geometric answer. Throws "non-identifying query" when a reference matches
/// zero or several objects, and rejects self-reference and ties.
std::string oracle_answer(const Scene& scene, const Question& question);

/// Rebuilds the question text from its structured fields.
std::string question_text(const Question& q);

enum class MirrorAxis { Horizontal, Vertical };
Scene mirror_scene(const Scene& scene, MirrorAxis axis);
/// Same question with directions reflected across the axis.
Question mirror_question(const Question& q, MirrorAxis axis);

/// The same objects with the subject and reference coordinates swapped along
/// the relation axis, which flips the answer of a relative question.
Scene flipped_twin(const Scene& scene, const Question& question);

// ---------------------------------------------------------------------------
// Rendering

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Rgb at(std::size_t x, std::size_t y) const;
  bool operator==(const Image&) const = default;
};

/// Pixel-center sampling, later objects drawn over earlier ones.
Image render(const Scene& scene, std::size_t resolution = kDefaultResolution);
std::string encode_ppm(const Image& image);
void write_ppm(const Image& image, const std::filesystem::path& path);
bool png_supported();
void write_png(const Image& image, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Datasets

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t scenes_per_category = 100;
  std::size_t min_objects = kMinObjects;
  std::size_t max_objects = kMaxObjects;
  bool grid = false;  // 6x6 cell-center placement
  bool validate_twins = false;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Scene> scenes;
  std::vector<Question> questions;
  std::vector<std::vector<SceneObject>> object_sets;  // per meta-category

  const Scene& scene(const std::string& id) const;
};

/// One fixed object set per meta-category, positions re-drawn per scene from
/// a per-scene derived seed.
Dataset generate_dataset(const DatasetConfig& cfg);

/// images/, questions.jsonl, manifest.json
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                   std::size_t resolution = kDefaultResolution, bool png = false);
/// Reads questions.jsonl (and scenes from manifest.json) back.
Dataset read_dataset(const std::filesystem::path& manifest_path);

std::string question_to_jsonl(const Question& q);

// ---------------------------------------------------------------------------
// Evaluation

/// Lowercase, trim, collapse whitespace, drop trailing punctuation and a
/// leading article, map yes/no synonyms.
std::string canonicalize_answer(std::string_view answer);
/// Maps "B", "(b)", "b." to the second choice; otherwise canonicalizes.
std::string resolve_prediction(std::string_view prediction, const std::vector<std::string>& choices);

struct CellScore {
  std::string category;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct EvalTable {
  std::vector<CellScore> cells;  // six categories in fixed order
  CellScore overall;
  std::size_t missing = 0;  // questions without a prediction, counted wrong
};

EvalTable evaluate_answers(const std::map<std::string, std::string>& predictions,
                           const std::vector<Question>& questions);

/// Category names in report order.
const std::array<std::string, 6>& category_names();

}  // namespace vlmprobe
