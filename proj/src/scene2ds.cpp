#include "vlmprobe/scene2ds.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numeric>

#ifdef VLMPROBE_HAVE_PNG
#include <png.h>
#endif

#include "vlmprobe/error.hpp"

namespace vlmprobe {

namespace {

using nlohmann::json;

constexpr std::array<std::string_view, kColorCount> kColorNames = {
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "brown"};
constexpr std::array<Rgb, kColorCount> kColorValues = {{{230, 25, 75},
                                                         {60, 180, 75},
                                                         {0, 90, 220},
                                                         {255, 215, 0},
                                                         {145, 30, 180},
                                                         {245, 130, 48},
                                                         {70, 220, 230},
                                                         {140, 80, 30}}};
constexpr std::array<std::string_view, kShapeCount> kShapeNames = {"circle", "square", "triangle",
                                                                   "diamond", "cross"};

// Centers stay this far from the border so the largest object fits.
constexpr double kBorder = kMaxObjectSize / 2.0;
// Sampling gap slightly above the band so rounding never lands below it.
constexpr double kSamplingGap = kAmbiguityBand * (1.0 + 1e-6);
constexpr int kPlacementRetries = 100;

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

/// n coordinates in [kBorder, 1 - kBorder] with pairwise gaps >= kSamplingGap,
/// uniform over valid configurations, returned in random order.
std::vector<double> spaced_coordinates(std::size_t n, Rng& rng) {
  const double slack = (1.0 - 2.0 * kBorder) - static_cast<double>(n - 1) * kSamplingGap;
  require(slack >= 0.0, ErrorKind::InvalidArgument, "too many objects for the ambiguity band");
  std::vector<double> u(n);
  for (double& x : u) x = rng.uniform() * slack;
  std::sort(u.begin(), u.end());
  for (std::size_t i = 0; i < n; ++i) u[i] += kBorder + static_cast<double>(i) * kSamplingGap;
  shuffle(u, rng);
  return u;
}

std::string dir_word(Direction d) {
  switch (d) {
    case Direction::Left: return "left";
    case Direction::Right: return "right";
    case Direction::Top: return "top";
    case Direction::Bottom: return "bottom";
  }
  return "";
}

std::string relation_words(Direction d) {
  switch (d) {
    case Direction::Left: return "left of";
    case Direction::Right: return "right of";
    case Direction::Top: return "above";
    case Direction::Bottom: return "below";
  }
  return "";
}

bool horizontal(Direction d) { return d == Direction::Left || d == Direction::Right; }

Direction opposite(Direction d) {
  switch (d) {
    case Direction::Left: return Direction::Right;
    case Direction::Right: return Direction::Left;
    case Direction::Top: return Direction::Bottom;
    case Direction::Bottom: return Direction::Top;
  }
  return d;
}

std::string describe(const SceneObject& o) {
  return std::string(color_name(o.color)) + " " + std::string(shape_name(o.shape));
}

std::size_t resolve(const Scene& scene, const ObjectRef& ref) {
  std::size_t found = scene.objects.size();
  std::size_t count = 0;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (ref.matches(scene.objects[i])) {
      found = i;
      ++count;
    }
  }
  require(count == 1 && (ref.color || ref.shape), ErrorKind::Precondition,
          "non-identifying query: '" + ref.describe() + "' matches " + std::to_string(count) +
              " objects in scene " + scene.id);
  return found;
}

double coord(const SceneObject& o, Direction d) { return horizontal(d) ? o.x : o.y; }

ObjectRef ref_for(const SceneObject& o, SemanticAxis axis) {
  ObjectRef r;
  if (axis != SemanticAxis::Shape) r.color = o.color;
  if (axis != SemanticAxis::Color) r.shape = o.shape;
  return r;
}

json ref_json(const ObjectRef& r) {
  json j = json::object();
  if (r.color) j["color"] = std::string(color_name(*r.color));
  if (r.shape) j["shape"] = std::string(shape_name(*r.shape));
  return j;
}

ObjectRef ref_from(const json& j) {
  ObjectRef r;
  if (j.contains("color")) r.color = parse_color(j.at("color").get<std::string>());
  if (j.contains("shape")) r.shape = parse_shape(j.at("shape").get<std::string>());
  return r;
}

json object_json(const SceneObject& o) {
  return json{{"shape", std::string(shape_name(o.shape))},
              {"color", std::string(color_name(o.color))},
              {"x", o.x},
              {"y", o.y},
              {"size", o.size}};
}

SceneObject object_from(const json& j) {
  SceneObject o;
  o.shape = parse_shape(j.at("shape").get<std::string>());
  o.color = parse_color(j.at("color").get<std::string>());
  o.x = j.at("x").get<double>();
  o.y = j.at("y").get<double>();
  o.size = j.at("size").get<double>();
  return o;
}

std::string scene_id(std::size_t category, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%zu_s%03zu", category, index);
  return buf;
}

bool inside(const SceneObject& o, double px, double py) {
  const double dx = px - o.x;
  const double dy = py - o.y;
  const double half = o.size / 2.0;
  switch (o.shape) {
    case Shape::Circle: return dx * dx + dy * dy <= half * half;
    case Shape::Square: return std::abs(dx) <= half && std::abs(dy) <= half;
    case Shape::Triangle:  // apex up, base down
      return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2.0;
    case Shape::Diamond: return std::abs(dx) + std::abs(dy) <= half;
    case Shape::Cross: {
      const double arm = half / 3.0;
      return (std::abs(dx) <= half && std::abs(dy) <= arm) ||
             (std::abs(dx) <= arm && std::abs(dy) <= half);
    }
  }
  return false;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  require(file.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  file << text;
  require(file.good(), ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace

std::string_view color_name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }
std::string_view shape_name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
Rgb color_rgb(Color c) { return kColorValues[static_cast<std::size_t>(c)]; }

Color parse_color(std::string_view name) {
  for (std::size_t i = 0; i < kColorCount; ++i) {
    if (kColorNames[i] == name) return static_cast<Color>(i);
  }
  fail(ErrorKind::Format, "unknown color '" + std::string(name) + "'");
}

Shape parse_shape(std::string_view name) {
  for (std::size_t i = 0; i < kShapeCount; ++i) {
    if (kShapeNames[i] == name) return static_cast<Shape>(i);
  }
  fail(ErrorKind::Format, "unknown shape '" + std::string(name) + "'");
}

void validate_scene(const Scene& scene) {
  const auto& objs = scene.objects;
  for (const SceneObject& o : objs) {
    const double half = o.size / 2.0;
    require(o.size > 0.0 && o.x - half >= 0.0 && o.x + half <= 1.0 && o.y - half >= 0.0 &&
                o.y + half <= 1.0,
            ErrorKind::Precondition, "object outside the canvas in scene " + scene.id);
  }
  for (std::size_t i = 0; i < objs.size(); ++i) {
    for (std::size_t j = i + 1; j < objs.size(); ++j) {
      require(std::abs(objs[i].x - objs[j].x) >= kAmbiguityBand &&
                  std::abs(objs[i].y - objs[j].y) >= kAmbiguityBand,
              ErrorKind::Precondition,
              "objects " + std::to_string(i) + " and " + std::to_string(j) +
                  " closer than the ambiguity band in scene " + scene.id);
    }
  }
}

std::vector<SceneObject> draw_object_set(std::size_t n_objects, Rng& rng) {
  require(n_objects >= kMinObjects && n_objects <= kMaxObjects, ErrorKind::InvalidArgument,
          "object count must be in [2, 6], got " + std::to_string(n_objects));
  std::vector<Color> colors(kColorCount);
  for (std::size_t i = 0; i < kColorCount; ++i) colors[i] = static_cast<Color>(i);
  shuffle(colors, rng);
  std::vector<Shape> shapes(kShapeCount);
  for (std::size_t i = 0; i < kShapeCount; ++i) shapes[i] = static_cast<Shape>(i);
  shuffle(shapes, rng);
  shapes.resize(std::min(n_objects, kShapeCount));
  while (shapes.size() < n_objects) shapes.push_back(static_cast<Shape>(rng.below(kShapeCount)));
  shuffle(shapes, rng);

  std::vector<SceneObject> out(n_objects);
  for (std::size_t i = 0; i < n_objects; ++i) {
    out[i].color = colors[i];
    out[i].shape = shapes[i];
    out[i].size = rng.uniform(kMinObjectSize, kMaxObjectSize);
  }
  return out;
}

std::vector<SceneObject> place_objects(std::vector<SceneObject> objects, Rng& rng,
                                       std::uint64_t seed) {
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    const std::vector<double> xs = spaced_coordinates(objects.size(), rng);
    const std::vector<double> ys = spaced_coordinates(objects.size(), rng);
    for (std::size_t i = 0; i < objects.size(); ++i) {
      objects[i].x = xs[i];
      objects[i].y = ys[i];
    }
    try {
      validate_scene(Scene{"", objects.size(), objects});
      return objects;
    } catch (const Error&) {
    }
  }
  fail(ErrorKind::Precondition, "scene placement failed after " +
                                    std::to_string(kPlacementRetries) +
                                    " attempts (seed " + std::to_string(seed) + ")");
}

std::vector<SceneObject> generate_scene(std::size_t n_objects, Rng& rng, std::uint64_t seed) {
  return place_objects(draw_object_set(n_objects, rng), rng, seed);
}

std::vector<SceneObject> place_objects_on_grid(std::vector<SceneObject> objects, Rng& rng) {
  require(objects.size() <= kLiteGrid, ErrorKind::InvalidArgument,
          "grid placement supports at most 6 objects");
  std::vector<std::size_t> rows(kLiteGrid);
  std::vector<std::size_t> cols(kLiteGrid);
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);
  shuffle(rows, rng);
  shuffle(cols, rng);
  const double cell = 1.0 / static_cast<double>(kLiteGrid);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    objects[i].x = (static_cast<double>(cols[i]) + 0.5) * cell;
    objects[i].y = (static_cast<double>(rows[i]) + 0.5) * cell;
  }
  return objects;
}

std::pair<std::size_t, std::size_t> grid_cell(double x, double y) {
  auto index = [](double v) {
    const auto i = static_cast<std::size_t>(std::floor(std::clamp(v, 0.0, 1.0) * kLiteGrid));
    return std::min(i, kLiteGrid - 1);
  };
  return {index(y), index(x)};
}

// ---------------------------------------------------------------------------

std::string_view to_string(SemanticAxis a) {
  switch (a) {
    case SemanticAxis::Color: return "color";
    case SemanticAxis::Shape: return "shape";
    case SemanticAxis::ColorShape: return "color+shape";
  }
  return "";
}

std::string_view to_string(SpatialAxis a) {
  return a == SpatialAxis::Absolute ? "absolute" : "relative";
}

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::Left: return "left";
    case Direction::Right: return "right";
    case Direction::Top: return "top";
    case Direction::Bottom: return "bottom";
  }
  return "";
}

SemanticAxis parse_semantic_axis(std::string_view s) {
  if (s == "color") return SemanticAxis::Color;
  if (s == "shape") return SemanticAxis::Shape;
  if (s == "color+shape") return SemanticAxis::ColorShape;
  fail(ErrorKind::Format, "unknown semantic axis '" + std::string(s) + "'");
}

SpatialAxis parse_spatial_axis(std::string_view s) {
  if (s == "absolute") return SpatialAxis::Absolute;
  if (s == "relative") return SpatialAxis::Relative;
  fail(ErrorKind::Format, "unknown spatial axis '" + std::string(s) + "'");
}

Direction parse_direction(std::string_view s) {
  for (Direction d : {Direction::Left, Direction::Right, Direction::Top, Direction::Bottom}) {
    if (to_string(d) == s) return d;
  }
  fail(ErrorKind::Format, "unknown direction '" + std::string(s) + "'");
}

bool ObjectRef::matches(const SceneObject& o) const {
  return (!color || *color == o.color) && (!shape || *shape == o.shape);
}

std::string ObjectRef::describe() const {
  std::string out;
  if (color) out += color_name(*color);
  if (shape) {
    if (!out.empty()) out += ' ';
    out += shape_name(*shape);
  }
  return out;
}

std::string Question::category() const {
  std::string base = semantic == SemanticAxis::Color   ? "Color"
                     : semantic == SemanticAxis::Shape ? "Shape"
                                                       : "Shape_color";
  return base + (spatial == SpatialAxis::Absolute ? "_abs." : "_rel.");
}

const std::array<std::string, 6>& category_names() {
  static const std::array<std::string, 6> names = {"Color_abs.",       "Color_rel.",
                                                   "Shape_abs.",       "Shape_rel.",
                                                   "Shape_color_abs.", "Shape_color_rel."};
  return names;
}

std::string question_text(const Question& q) {
  if (q.spatial == SpatialAxis::Absolute) {
    const std::string where = " at the " + dir_word(q.direction) + " of the image?";
    switch (q.semantic) {
      case SemanticAxis::Color: return "What color is" + where;
      case SemanticAxis::Shape: return "What shape is" + where;
      case SemanticAxis::ColorShape: return "Which object is" + where;
    }
  }
  const std::string rel = " " + relation_words(q.direction) + " ";
  if (q.semantic == SemanticAxis::Color) {
    return "Is the " + q.subject.describe() + " object" + rel + "the " + q.reference.describe() +
           " object?";
  }
  return "Is the " + q.subject.describe() + rel + "the " + q.reference.describe() + "?";
}

std::vector<Question> generate_questions(const Scene& scene, Rng& rng) {
  validate_scene(scene);
  const auto& objs = scene.objects;
  require(objs.size() >= 2, ErrorKind::Precondition, "scene needs at least two objects");

  std::vector<std::string> color_choices;
  std::vector<std::string> shape_choices;
  std::vector<std::string> object_choices;
  {
    std::vector<SceneObject> sorted = objs;
    std::sort(sorted.begin(), sorted.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.color < b.color; });
    std::vector<Shape> shapes;
    for (const SceneObject& o : sorted) {
      color_choices.emplace_back(color_name(o.color));
      object_choices.push_back(describe(o));
      shapes.push_back(o.shape);
    }
    std::sort(shapes.begin(), shapes.end());
    shapes.erase(std::unique(shapes.begin(), shapes.end()), shapes.end());
    for (Shape s : shapes) shape_choices.emplace_back(shape_name(s));
  }

  std::vector<Question> out;
  std::size_t serial = 0;
  for (SemanticAxis semantic : {SemanticAxis::Color, SemanticAxis::Shape, SemanticAxis::ColorShape}) {
    for (SpatialAxis spatial : {SpatialAxis::Absolute, SpatialAxis::Relative}) {
      Question q;
      q.id = scene.id + "_q" + std::to_string(serial++);
      q.scene_id = scene.id;
      q.meta_category = scene.meta_category;
      q.semantic = semantic;
      q.spatial = spatial;
      if (spatial == SpatialAxis::Absolute) {
        q.direction = static_cast<Direction>(rng.below(4));
        q.choices = semantic == SemanticAxis::Color   ? color_choices
                    : semantic == SemanticAxis::Shape ? shape_choices
                                                      : object_choices;
      } else {
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < objs.size(); ++i) {
          const ObjectRef ref = ref_for(objs[i], semantic);
          if (std::count_if(objs.begin(), objs.end(),
                            [&ref](const SceneObject& o) { return ref.matches(o); }) == 1) {
            candidates.push_back(i);
          }
        }
        require(candidates.size() >= 2, ErrorKind::Precondition,
                "no unambiguous relative question for scene " + scene.id);
        const std::size_t ia = rng.below(candidates.size());
        std::size_t ib = rng.below(candidates.size() - 1);
        if (ib >= ia) ++ib;
        const SceneObject& a = objs[candidates[ia]];
        const SceneObject& b = objs[candidates[ib]];
        const bool horiz = rng.below(2) == 0;
        const bool want_yes = rng.below(2) == 0;
        const Direction holds = horiz ? (a.x < b.x ? Direction::Left : Direction::Right)
                                      : (a.y < b.y ? Direction::Top : Direction::Bottom);
        q.direction = want_yes ? holds : opposite(holds);
        q.subject = ref_for(a, semantic);
        q.reference = ref_for(b, semantic);
        q.choices = {"yes", "no"};
      }
      q.text = question_text(q);
      q.gold = oracle_answer(scene, q);
      out.push_back(std::move(q));
    }
  }
  return out;
}

std::string oracle_answer(const Scene& scene, const Question& q) {
  const auto& objs = scene.objects;
  require(!objs.empty(), ErrorKind::Precondition, "empty scene " + scene.id);
  if (q.spatial == SpatialAxis::Absolute) {
    // Signed so that the answer maximizes the key.
    auto key = [&q](const SceneObject& o) {
      switch (q.direction) {
        case Direction::Left: return -o.x;
        case Direction::Right: return o.x;
        case Direction::Top: return -o.y;
        case Direction::Bottom: return o.y;
      }
      return 0.0;
    };
    std::size_t best = 0;
    for (std::size_t i = 1; i < objs.size(); ++i) {
      if (key(objs[i]) > key(objs[best])) best = i;
    }
    for (std::size_t i = 0; i < objs.size(); ++i) {
      require(i == best || key(objs[best]) - key(objs[i]) >= kAmbiguityBand,
              ErrorKind::Precondition, "ambiguous absolute position in scene " + scene.id);
    }
    const SceneObject& o = objs[best];
    switch (q.semantic) {
      case SemanticAxis::Color: return std::string(color_name(o.color));
      case SemanticAxis::Shape: return std::string(shape_name(o.shape));
      case SemanticAxis::ColorShape: return describe(o);
    }
  }
  const std::size_t a = resolve(scene, q.subject);
  const std::size_t b = resolve(scene, q.reference);
  require(a != b, ErrorKind::Precondition,
          "degenerate self-reference: '" + q.subject.describe() + "' relative to itself");
  const double diff = coord(objs[a], q.direction) - coord(objs[b], q.direction);
  require(std::abs(diff) >= kAmbiguityBand, ErrorKind::Precondition,
          "ambiguous relation in scene " + scene.id);
  const bool before = diff < 0.0;  // subject left of / above reference
  const bool yes = (q.direction == Direction::Left || q.direction == Direction::Top) ? before
                                                                                     : !before;
  return yes ? "yes" : "no";
}

Scene mirror_scene(const Scene& scene, MirrorAxis axis) {
  Scene out = scene;
  for (SceneObject& o : out.objects) {
    if (axis == MirrorAxis::Horizontal) {
      o.x = 1.0 - o.x;
    } else {
      o.y = 1.0 - o.y;
    }
  }
  return out;
}

Question mirror_question(const Question& q, MirrorAxis axis) {
  Question out = q;
  if (horizontal(q.direction) == (axis == MirrorAxis::Horizontal)) {
    out.direction = opposite(q.direction);
  }
  out.text = question_text(out);
  return out;
}

Scene flipped_twin(const Scene& scene, const Question& q) {
  require(q.spatial == SpatialAxis::Relative, ErrorKind::InvalidArgument,
          "flipped twins exist for relative questions only");
  const std::size_t a = resolve(scene, q.subject);
  const std::size_t b = resolve(scene, q.reference);
  Scene twin = scene;
  if (horizontal(q.direction)) {
    std::swap(twin.objects[a].x, twin.objects[b].x);
  } else {
    std::swap(twin.objects[a].y, twin.objects[b].y);
  }
  return twin;
}

// ---------------------------------------------------------------------------

Rgb Image::at(std::size_t x, std::size_t y) const {
  const std::size_t i = 3 * (y * width + x);
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

Image render(const Scene& scene, std::size_t resolution) {
  require(resolution > 0, ErrorKind::InvalidArgument, "resolution must be positive");
  Image img{resolution, resolution, {}};
  img.rgb.resize(3 * resolution * resolution);
  for (std::size_t i = 0; i < resolution * resolution; ++i) {
    img.rgb[3 * i] = kBackground.r;
    img.rgb[3 * i + 1] = kBackground.g;
    img.rgb[3 * i + 2] = kBackground.b;
  }
  const double res = static_cast<double>(resolution);
  for (const SceneObject& o : scene.objects) {
    const Rgb c = color_rgb(o.color);
    const double half = o.size / 2.0;
    auto lo = [res](double v) {
      return static_cast<std::size_t>(std::max(0.0, std::floor(v * res)));
    };
    auto hi = [res, resolution](double v) {
      return std::min(resolution, static_cast<std::size_t>(std::max(0.0, std::ceil(v * res))));
    };
    for (std::size_t py = lo(o.y - half); py < hi(o.y + half); ++py) {
      for (std::size_t px = lo(o.x - half); px < hi(o.x + half); ++px) {
        if (!inside(o, (static_cast<double>(px) + 0.5) / res,
                    (static_cast<double>(py) + 0.5) / res)) {
          continue;
        }
        const std::size_t i = 3 * (py * resolution + px);
        img.rgb[i] = c.r;
        img.rgb[i + 1] = c.g;
        img.rgb[i + 2] = c.b;
      }
    }
  }
  return img;
}

std::string encode_ppm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size());
  return out;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  write_text(path, encode_ppm(image));
}

bool png_supported() {
#ifdef VLMPROBE_HAVE_PNG
  return true;
#else
  return false;
#endif
}

void write_png(const Image& image, const std::filesystem::path& path) {
#ifdef VLMPROBE_HAVE_PNG
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width);
  desc.height = static_cast<png_uint_32>(image.height);
  desc.format = PNG_FORMAT_RGB;
  const int ok = png_image_write_to_file(&desc, path.string().c_str(), 0, image.rgb.data(),
                                         static_cast<png_int_32>(3 * image.width), nullptr);
  const std::string message = desc.message;
  png_image_free(&desc);
  require(ok != 0, ErrorKind::Io, "PNG write failed for " + path.string() + ": " + message);
#else
  (void)image;
  fail(ErrorKind::Io, "PNG output unavailable (built without libpng): " + path.string());
#endif
}

// ---------------------------------------------------------------------------

const Scene& Dataset::scene(const std::string& id) const {
  for (const Scene& s : scenes) {
    if (s.id == id) return s;
  }
  fail(ErrorKind::InvalidArgument, "unknown scene id '" + id + "'");
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  require(cfg.min_objects >= kMinObjects && cfg.max_objects <= kMaxObjects &&
              cfg.min_objects <= cfg.max_objects,
          ErrorKind::InvalidArgument, "object range must lie within [2, 6]");
  require(cfg.scenes_per_category > 0, ErrorKind::InvalidArgument,
          "scenes_per_category must be positive");
  Dataset ds;
  ds.config = cfg;
  for (std::size_t m = cfg.min_objects; m <= cfg.max_objects; ++m) {
    const std::uint64_t category_seed = Rng::derive(cfg.seed, m);
    Rng set_rng(Rng::derive(category_seed, 0));
    const std::vector<SceneObject> object_set = draw_object_set(m, set_rng);
    ds.object_sets.push_back(object_set);
    for (std::size_t k = 0; k < cfg.scenes_per_category; ++k) {
      const std::uint64_t scene_seed = Rng::derive(category_seed, k + 1);
      Rng rng(scene_seed);
      Scene scene;
      scene.id = scene_id(m, k);
      scene.meta_category = m;
      scene.objects = cfg.grid ? place_objects_on_grid(object_set, rng)
                               : place_objects(object_set, rng, scene_seed);
      validate_scene(scene);
      std::vector<Question> qs = generate_questions(scene, rng);
      if (cfg.validate_twins) {
        for (const Question& q : qs) {
          if (q.spatial != SpatialAxis::Relative) continue;
          const Scene twin = flipped_twin(scene, q);
          validate_scene(twin);
          require(oracle_answer(twin, q) != q.gold, ErrorKind::Precondition,
                  "flipped twin does not change the answer of " + q.id);
        }
      }
      for (Question& q : qs) ds.questions.push_back(std::move(q));
      ds.scenes.push_back(std::move(scene));
    }
  }
  return ds;
}

std::string question_to_jsonl(const Question& q) {
  json j{{"id", q.id},
         {"scene_id", q.scene_id},
         {"meta_category", q.meta_category},
         {"category", q.category()},
         {"semantic", std::string(to_string(q.semantic))},
         {"spatial", std::string(to_string(q.spatial))},
         {"direction", std::string(to_string(q.direction))},
         {"text", q.text},
         {"gold", q.gold},
         {"choices", q.choices}};
  if (q.spatial == SpatialAxis::Relative) {
    j["subject"] = ref_json(q.subject);
    j["reference"] = ref_json(q.reference);
  }
  return j.dump();
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir, std::size_t resolution,
                   bool png) {
  namespace fs = std::filesystem;
  require(!png || png_supported(), ErrorKind::InvalidArgument,
          "--png requested but this build has no libpng");
  fs::create_directories(dir / "images");
  std::string lines;
  for (const Question& q : ds.questions) lines += question_to_jsonl(q) + "\n";
  write_text(dir / "questions.jsonl", lines);

  json scenes = json::array();
  json counts = json::object();
  for (const Scene& s : ds.scenes) {
    const Image img = render(s, resolution);
    const std::string image_name = "images/" + s.id + ".ppm";
    write_ppm(img, dir / image_name);
    if (png) write_png(img, dir / ("images/" + s.id + ".png"));
    json objects = json::array();
    for (const SceneObject& o : s.objects) objects.push_back(object_json(o));
    scenes.push_back({{"id", s.id}, {"meta_category", s.meta_category}, {"image", image_name},
                      {"objects", objects}});
    json& c = counts[std::to_string(s.meta_category)];
    if (c.is_null()) c = json::object();
    c["scenes"] = c.value("scenes", 0) + 1;
  }
  for (const Question& q : ds.questions) {
    json& c = counts[std::to_string(q.meta_category)];
    if (c.is_null()) c = json::object();
    c["questions"] = c.value("questions", 0) + 1;
  }
  json manifest{{"format_version", kDatasetFormatVersion},
                {"template_version", kTemplateVersion},
                {"seed", ds.config.seed},
                {"scenes_per_category", ds.config.scenes_per_category},
                {"min_objects", ds.config.min_objects},
                {"max_objects", ds.config.max_objects},
                {"grid_placement", ds.config.grid},
                {"coordinate_system", "unit square, origin top-left, x right, y down"},
                {"ambiguity_band", kAmbiguityBand},
                {"resolution", resolution},
                {"image_format", png ? "ppm+png" : "ppm"},
                {"questions_file", "questions.jsonl"},
                {"total_scenes", ds.scenes.size()},
                {"total_questions", ds.questions.size()},
                {"per_category", counts},
                {"scenes", scenes}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream file(manifest_path);
  require(file.good(), ErrorKind::Io, "cannot open manifest " + manifest_path.string());
  Dataset ds;
  try {
    const json manifest = json::parse(file);
    require(manifest.at("format_version").get<int>() == kDatasetFormatVersion, ErrorKind::Format,
            "unsupported dataset format version");
    ds.config.seed = manifest.at("seed").get<std::uint64_t>();
    ds.config.scenes_per_category = manifest.at("scenes_per_category").get<std::size_t>();
    ds.config.min_objects = manifest.at("min_objects").get<std::size_t>();
    ds.config.max_objects = manifest.at("max_objects").get<std::size_t>();
    ds.config.grid = manifest.at("grid_placement").get<bool>();
    for (const json& s : manifest.at("scenes")) {
      Scene scene;
      scene.id = s.at("id").get<std::string>();
      scene.meta_category = s.at("meta_category").get<std::size_t>();
      for (const json& o : s.at("objects")) scene.objects.push_back(object_from(o));
      ds.scenes.push_back(std::move(scene));
    }
    const auto qpath =
        manifest_path.parent_path() / manifest.at("questions_file").get<std::string>();
    std::ifstream qfile(qpath);
    require(qfile.good(), ErrorKind::Io, "cannot open questions file " + qpath.string());
    std::string line;
    while (std::getline(qfile, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      Question q;
      q.id = j.at("id").get<std::string>();
      q.scene_id = j.at("scene_id").get<std::string>();
      q.meta_category = j.at("meta_category").get<std::size_t>();
      q.semantic = parse_semantic_axis(j.at("semantic").get<std::string>());
      q.spatial = parse_spatial_axis(j.at("spatial").get<std::string>());
      q.direction = parse_direction(j.at("direction").get<std::string>());
      if (j.contains("subject")) q.subject = ref_from(j.at("subject"));
      if (j.contains("reference")) q.reference = ref_from(j.at("reference"));
      q.text = j.at("text").get<std::string>();
      q.gold = j.at("gold").get<std::string>();
      q.choices = j.at("choices").get<std::vector<std::string>>();
      ds.questions.push_back(std::move(q));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed dataset: ") + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------

std::string canonicalize_answer(std::string_view answer) {
  std::string s;
  bool space = false;
  for (char ch : answer) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      space = !s.empty();
      continue;
    }
    if (space) s += ' ';
    space = false;
    s += static_cast<char>(std::tolower(c));
  }
  while (!s.empty() && std::string_view(".!?,;:").find(s.back()) != std::string_view::npos) {
    s.pop_back();
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  if (s.rfind("the ", 0) == 0) s.erase(0, 4);
  static const std::array<std::string_view, 6> yes = {"yes", "y", "true", "yeah", "yep", "correct"};
  static const std::array<std::string_view, 5> no = {"no", "n", "false", "nope", "incorrect"};
  if (std::find(yes.begin(), yes.end(), s) != yes.end()) return "yes";
  if (std::find(no.begin(), no.end(), s) != no.end()) return "no";
  return s;
}

std::string resolve_prediction(std::string_view prediction,
                               const std::vector<std::string>& choices) {
  std::string s;
  for (char ch : prediction) {
    const auto c = static_cast<unsigned char>(ch);
    if (!std::isspace(c)) s += static_cast<char>(std::tolower(c));
  }
  // "b", "(b)", "b)", "b."
  if (!s.empty() && s.front() == '(') s.erase(0, 1);
  while (!s.empty() && (s.back() == ')' || s.back() == '.')) s.pop_back();
  if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'z') {
    const std::size_t idx = static_cast<std::size_t>(s[0] - 'a');
    if (idx < choices.size()) return canonicalize_answer(choices[idx]);
  }
  return canonicalize_answer(prediction);
}

EvalTable evaluate_answers(const std::map<std::string, std::string>& predictions,
                           const std::vector<Question>& questions) {
  EvalTable table;
  for (const std::string& name : category_names()) table.cells.push_back({name, 0, 0});
  table.overall.category = "Overall Acc.";
  for (const Question& q : questions) {
    const std::string cat = q.category();
    auto cell = std::find_if(table.cells.begin(), table.cells.end(),
                             [&cat](const CellScore& c) { return c.category == cat; });
    ++cell->total;
    ++table.overall.total;
    const auto it = predictions.find(q.id);
    if (it == predictions.end()) {
      ++table.missing;
      continue;
    }
    if (resolve_prediction(it->second, q.choices) == canonicalize_answer(q.gold)) {
      ++cell->correct;
      ++table.overall.correct;
    }
  }
  return table;
}

}  // namespace vlmprobe
