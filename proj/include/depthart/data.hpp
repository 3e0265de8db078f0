#pragma once

// Procedural indoor-like scenes rendered by ray casting: a floor, a back wall
// and a few boxes/spheres. Each sample carries the shaded image, exact z-depth,
// a validity mask and exact plane annotations for the planar surfaces.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "depthart/checkpoint.hpp"
#include "depthart/errors.hpp"
#include "depthart/parallel.hpp"

namespace depthart {

inline constexpr std::size_t kRasterSize = 32;
inline constexpr double kNormEps = 1e-6;

using Vec3 = std::array<double, 3>;

namespace geom {
inline Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 mul(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return mul(a, 1.0 / norm(a)); }
}  // namespace geom

struct Intrinsics {
  double fx = 32.0, fy = 32.0, cx = 15.5, cy = 15.5;
  bool operator==(const Intrinsics&) const = default;
};

/// Planar region in camera coordinates: normal . p + offset = 0 (metres).
struct PlaneAnnotation {
  std::vector<std::uint8_t> mask;
  Vec3 normal{};
  double offset = 0.0;
};

struct DepthSample {
  std::size_t width = kRasterSize, height = kRasterSize;
  std::vector<float> image;  // 3 x H x W planar RGB in [0, 1]
  std::vector<float> depth;  // H x W z-depth in metres, 0 where invalid
  std::vector<std::uint8_t> mask;
  Intrinsics intrinsics;
  std::vector<PlaneAnnotation> planes;

  std::size_t pixels() const { return width * height; }

  /// Camera-space point for pixel (u, v) at z-depth z.
  Vec3 back_project(std::size_t u, std::size_t v, double z) const {
    return {(static_cast<double>(u) - intrinsics.cx) * z / intrinsics.fx,
            (static_cast<double>(v) - intrinsics.cy) * z / intrinsics.fy, z};
  }

  /// Luminance mapped to [-1, 1], the single-channel raster the autoencoder sees.
  std::vector<float> gray_normalized() const {
    std::vector<float> g(pixels());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float y = 0.299f * image[i] + 0.587f * image[pixels() + i] + 0.114f * image[2 * pixels() + i];
      g[i] = 2.0f * y - 1.0f;
    }
    return g;
  }
};

enum class PrimitiveKind { plane, box, sphere };

/// World frame: x right, y down, z forward. Boxes sit axis-aligned after a
/// rotation by `yaw` about the vertical axis.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Vec3 center{};        // sphere/box center, or a point on the plane
  Vec3 normal{};        // plane only, unit
  Vec3 half_extents{};  // box only
  double yaw = 0.0;     // box only
  double radius = 0.0;  // sphere only
  Vec3 albedo{0.8, 0.8, 0.8};
};

struct CameraPose {
  Vec3 position{};
  double pitch = 0.0;  // radians, positive looks down
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  CameraPose camera;
  Vec3 light_dir{0.3, -1.0, -0.5};  // direction towards the light
  Intrinsics intrinsics;
  std::size_t width = kRasterSize, height = kRasterSize;
};

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal{};
  int primitive = -1;
  int face = 0;  // box face id, 0 otherwise
};

// Rotation about the vertical axis and its inverse.
inline Vec3 rot_y(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]};
}

inline void intersect(const Primitive& prim, int id, const Vec3& o, const Vec3& d, Hit& best) {
  using namespace geom;
  switch (prim.kind) {
    case PrimitiveKind::plane: {
      const double denom = dot(prim.normal, d);
      if (std::abs(denom) < 1e-12) return;
      const double t = dot(prim.normal, sub(prim.center, o)) / denom;
      if (t > 1e-9 && t < best.t) best = {t, prim.normal, id, 0};
      return;
    }
    case PrimitiveKind::sphere: {
      const Vec3 oc = sub(o, prim.center);
      const double a = dot(d, d), b = 2.0 * dot(oc, d), c = dot(oc, oc) - prim.radius * prim.radius;
      const double disc = b * b - 4 * a * c;
      if (disc < 0) return;
      const double t = (-b - std::sqrt(disc)) / (2 * a);
      if (t > 1e-9 && t < best.t) best = {t, normalized(add(oc, mul(d, t))), id, 0};
      return;
    }
    case PrimitiveKind::box: {
      const Vec3 lo = rot_y(sub(o, prim.center), -prim.yaw);
      const Vec3 ld = rot_y(d, -prim.yaw);
      double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
      int axis = -1;
      double side = 0;
      for (int i = 0; i < 3; ++i) {
        if (std::abs(ld[i]) < 1e-12) {
          if (std::abs(lo[i]) > prim.half_extents[i]) return;
          continue;
        }
        double t0 = (-prim.half_extents[i] - lo[i]) / ld[i], t1 = (prim.half_extents[i] - lo[i]) / ld[i];
        double s = -1;
        if (t0 > t1) {
          std::swap(t0, t1);
          s = 1;
        }
        if (t0 > tmin) {
          tmin = t0;
          axis = i;
          side = s;
        }
        tmax = std::min(tmax, t1);
      }
      if (axis < 0 || tmin > tmax || tmin <= 1e-9 || tmin >= best.t) return;
      Vec3 ln{0, 0, 0};
      ln[static_cast<std::size_t>(axis)] = side;
      best = {tmin, rot_y(ln, prim.yaw), id, 1 + axis * 2 + (side > 0 ? 1 : 0)};
      return;
    }
  }
}

// Camera-to-world rotation for a camera pitched down by `pitch`.
inline Vec3 cam_to_world(const Vec3& v, double pitch) {
  const double c = std::cos(pitch), s = std::sin(pitch);
  return {v[0], c * v[1] + s * v[2], -s * v[1] + c * v[2]};
}

inline Vec3 world_to_cam(const Vec3& v, double pitch) {
  const double c = std::cos(pitch), s = std::sin(pitch);
  return {v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]};
}

}  // namespace detail

/// Ray-casts the scene. Depth is the camera-frame z of the first hit; pixels
/// without a hit are invalid. Image values are 8-bit quantized so a sample
/// survives a PPM round trip unchanged.
inline DepthSample render_scene(const SceneSpec& spec) {
  using namespace geom;
  DepthSample s;
  s.width = spec.width;
  s.height = spec.height;
  s.intrinsics = spec.intrinsics;
  const std::size_t n = s.pixels();
  s.image.assign(3 * n, 0.0f);
  s.depth.assign(n, 0.0f);
  s.mask.assign(n, 0);
  const Vec3 light = normalized(spec.light_dir);
  std::vector<int> region(n, -1);  // primitive * 8 + face
  std::vector<Vec3> normals(n);

  for (std::size_t v = 0; v < s.height; ++v)
    for (std::size_t u = 0; u < s.width; ++u) {
      const Vec3 dc{(static_cast<double>(u) - s.intrinsics.cx) / s.intrinsics.fx,
                    (static_cast<double>(v) - s.intrinsics.cy) / s.intrinsics.fy, 1.0};
      const Vec3 dw = detail::cam_to_world(dc, spec.camera.pitch);
      detail::Hit hit;
      for (std::size_t p = 0; p < spec.primitives.size(); ++p)
        detail::intersect(spec.primitives[p], static_cast<int>(p), spec.camera.position, dw, hit);
      const std::size_t i = v * s.width + u;
      if (hit.primitive < 0) continue;
      // With dc.z == 1 the ray parameter equals the camera-frame z.
      s.depth[i] = static_cast<float>(hit.t);
      s.mask[i] = 1;
      region[i] = hit.primitive * 8 + hit.face;
      Vec3 nrm = hit.normal;
      if (dot(nrm, dw) > 0) nrm = mul(nrm, -1.0);
      normals[i] = nrm;
      const Primitive& prim = spec.primitives[static_cast<std::size_t>(hit.primitive)];
      const double shade = 0.15 + 0.85 * std::max(0.0, dot(nrm, light));
      for (std::size_t c = 0; c < 3; ++c) {
        const double val = std::clamp(prim.albedo[c] * shade, 0.0, 1.0);
        s.image[c * n + i] = static_cast<float>(std::lround(val * 255.0)) / 255.0f;
      }
    }

  // Planar regions: planes and individual box faces with enough support.
  for (std::size_t p = 0; p < spec.primitives.size(); ++p) {
    const Primitive& prim = spec.primitives[p];
    if (prim.kind == PrimitiveKind::sphere) continue;
    const int faces = prim.kind == PrimitiveKind::plane ? 1 : 7;
    for (int f = prim.kind == PrimitiveKind::plane ? 0 : 1; f < faces; ++f) {
      const int id = static_cast<int>(p) * 8 + f;
      PlaneAnnotation pa;
      pa.mask.assign(n, 0);
      std::size_t count = 0, first = n;
      for (std::size_t i = 0; i < n; ++i)
        if (region[i] == id) {
          pa.mask[i] = 1;
          ++count;
          first = std::min(first, i);
        }
      if (count < 16) continue;
      Vec3 nw = normals[first];
      // Plane through a point of the surface in world coordinates.
      Vec3 pw;
      if (prim.kind == PrimitiveKind::plane) {
        pw = prim.center;
      } else {
        const int axis = (f - 1) / 2;
        Vec3 ln{0, 0, 0};
        ln[static_cast<std::size_t>(axis)] = ((f - 1) % 2 == 1) ? 1.0 : -1.0;
        nw = detail::rot_y(ln, prim.yaw);
        pw = add(prim.center, detail::rot_y(mul(ln, prim.half_extents[static_cast<std::size_t>(axis)]), prim.yaw));
      }
      const Vec3 nc = detail::world_to_cam(nw, spec.camera.pitch);
      const Vec3 pc = detail::world_to_cam(sub(pw, spec.camera.position), spec.camera.pitch);
      pa.normal = nc;
      pa.offset = -dot(nc, pc);
      s.planes.push_back(std::move(pa));
    }
  }
  return s;
}

/// Random scene: camera 1-1.6 m above the floor, pitched 5-20 degrees down,
/// a back wall 4-8 m ahead, and 1-4 boxes or spheres resting on the floor.
inline SceneSpec random_scene_spec(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  SceneSpec spec;
  spec.seed = seed;
  const double cam_height = uni(1.0, 1.6);
  spec.camera.pitch = uni(5.0, 20.0) * M_PI / 180.0;
  const double wall = uni(4.0, 8.0);
  auto color = [&] { return Vec3{uni(0.3, 1.0), uni(0.3, 1.0), uni(0.3, 1.0)}; };

  Primitive floor{PrimitiveKind::plane, {0, cam_height, 0}, {0, -1, 0}, {}, 0, 0, color()};
  Primitive back{PrimitiveKind::plane, {0, 0, wall}, {0, 0, -1}, {}, 0, 0, color()};
  spec.primitives = {floor, back};
  const int objects = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int o = 0; o < objects; ++o) {
    const double x = uni(-1.6, 1.6), z = uni(2.0, wall - 0.8);
    Primitive prim;
    prim.albedo = color();
    if (uni(0.0, 1.0) < 0.5) {
      prim.kind = PrimitiveKind::sphere;
      prim.radius = uni(0.25, 0.7);
      prim.center = {x, cam_height - prim.radius, z};
    } else {
      prim.kind = PrimitiveKind::box;
      prim.half_extents = {uni(0.2, 0.6), uni(0.2, 0.7), uni(0.2, 0.6)};
      prim.yaw = uni(0.0, M_PI / 2);
      prim.center = {x, cam_height - prim.half_extents[1], z};
    }
    spec.primitives.push_back(prim);
  }
  const double az = uni(-0.8, 0.8);
  spec.light_dir = geom::normalized({std::sin(az), -uni(0.6, 1.2), -std::cos(az)});
  return spec;
}

/// Renders the scene for `seed`; a sample with too few valid pixels is
/// regenerated from a perturbed seed (bounded retries).
inline DepthSample generate_sample(std::uint64_t seed) {
  constexpr int kRetries = 8;
  for (int attempt = 0; attempt < kRetries; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(attempt));
    DepthSample sample = render_scene(random_scene_spec(s));
    const auto valid = static_cast<std::size_t>(std::count(sample.mask.begin(), sample.mask.end(), 1));
    if (valid * 2 >= sample.pixels()) return sample;
  }
  throw DataError("generate_sample: no valid scene for seed " + std::to_string(seed));
}

struct NormalizedDepth {
  std::vector<float> values;
  double d98 = 0.0;
};

/// D / (D98 + eps) * 2 - 1 with D98 the nearest-rank 98th percentile of the
/// valid pixels.
inline NormalizedDepth normalize_depth(std::span<const float> depth, std::span<const std::uint8_t> mask) {
  if (depth.size() != mask.size()) throw DataError("normalize_depth: depth/mask size mismatch");
  std::vector<float> valid;
  for (std::size_t i = 0; i < depth.size(); ++i)
    if (mask[i]) valid.push_back(depth[i]);
  if (valid.empty()) throw DataError("normalize_depth: mask has no valid pixel");
  std::sort(valid.begin(), valid.end());
  const std::size_t rank = (98 * valid.size() + 99) / 100;  // ceil(0.98 N)
  NormalizedDepth out;
  out.d98 = valid[rank - 1];
  out.values.resize(depth.size());
  const double denom = out.d98 + kNormEps;
  for (std::size_t i = 0; i < depth.size(); ++i)
    out.values[i] = static_cast<float>(static_cast<double>(depth[i]) / denom * 2.0 - 1.0);
  return out;
}

/// Inverse of normalize_depth for a known D98.
inline std::vector<double> denormalize_depth(std::span<const float> normalized, double d98) {
  std::vector<double> d(normalized.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (static_cast<double>(normalized[i]) + 1.0) * 0.5 * (d98 + kNormEps);
  return d;
}

// ------------------------------------------------------------------ file I/O

namespace detail {

inline std::string raster_header(const char* magic, std::size_t w, std::size_t h) {
  std::string out(magic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  return out;
}

inline std::pair<std::size_t, std::size_t> read_raster_header(std::string_view bytes, const char* magic,
                                                              std::size_t& pos) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != std::string_view(magic, 4))
    throw DataError(std::string("bad raster magic, expected ") + magic);
  pos = 4;
  const auto w = get_le<std::uint32_t>(bytes, pos);
  const auto h = get_le<std::uint32_t>(bytes, pos);
  return {w, h};
}

}  // namespace detail

inline std::string encode_ppm(const DepthSample& s) {
  std::string out = "P6\n" + std::to_string(s.width) + " " + std::to_string(s.height) + "\n255\n";
  const std::size_t n = s.pixels();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(s.image[c * n + i], 0.0f, 1.0f) * 255.0f))));
  return out;
}

inline void decode_ppm(std::string_view bytes, DepthSample& s) {
  std::istringstream in{std::string(bytes)};
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || !in) throw DataError("ppm: unsupported header");
  in.get();
  const std::size_t n = w * h;
  std::string px(3 * n, '\0');
  in.read(px.data(), static_cast<std::streamsize>(px.size()));
  if (static_cast<std::size_t>(in.gcount()) != px.size()) throw DataError("ppm: truncated pixels");
  s.width = w;
  s.height = h;
  s.image.assign(3 * n, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      s.image[c * n + i] = static_cast<float>(static_cast<unsigned char>(px[3 * i + c])) / 255.0f;
}

inline std::string encode_depth(const DepthSample& s) {
  std::string out = detail::raster_header("DPTH", s.width, s.height);
  for (float f : s.depth) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline std::string encode_mask(const DepthSample& s) {
  std::string out = detail::raster_header("MASK", s.width, s.height);
  for (auto m : s.mask) out.push_back(static_cast<char>(m));
  return out;
}

/// One line per plane: "nx ny nz d" then run lengths of the row-major mask,
/// alternating and starting with an unset run.
inline std::string encode_planes(const DepthSample& s) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& p : s.planes) {
    os << p.normal[0] << ' ' << p.normal[1] << ' ' << p.normal[2] << ' ' << p.offset;
    std::uint8_t cur = 0;
    std::size_t run = 0;
    for (auto m : p.mask) {
      if ((m != 0) == (cur != 0)) {
        ++run;
      } else {
        os << ' ' << run;
        cur = m ? 1 : 0;
        run = 1;
      }
    }
    os << ' ' << run << '\n';
  }
  return os.str();
}

inline std::vector<PlaneAnnotation> decode_planes(std::string_view text, std::size_t pixels) {
  std::vector<PlaneAnnotation> planes;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    PlaneAnnotation p;
    if (!(ls >> p.normal[0] >> p.normal[1] >> p.normal[2] >> p.offset)) throw DataError("planes: bad header");
    std::size_t run = 0;
    std::uint8_t cur = 0;
    while (ls >> run) {
      p.mask.insert(p.mask.end(), run, cur);
      cur ^= 1;
    }
    if (p.mask.size() != pixels) throw DataError("planes: mask length " + std::to_string(p.mask.size()));
    planes.push_back(std::move(p));
  }
  return planes;
}

struct ManifestEntry {
  std::string split, image, depth, mask, planes;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.tsv");
  if (!in) throw DataError("cannot read manifest in " + dir.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!std::getline(ls, e.split, '\t') || !std::getline(ls, e.image, '\t') || !std::getline(ls, e.depth, '\t') ||
        !std::getline(ls, e.mask, '\t') || !std::getline(ls, e.planes))
      throw DataError("manifest: malformed line '" + line + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

inline DepthSample load_sample(const std::filesystem::path& dir, const ManifestEntry& e) {
  DepthSample s;
  decode_ppm(read_file(dir / e.image), s);
  const std::string depth = read_file(dir / e.depth);
  std::size_t pos = 0;
  auto [w, h] = detail::read_raster_header(depth, "DPTH", pos);
  if (w != s.width || h != s.height) throw DataError("depth size differs from image: " + e.depth);
  if (depth.size() != pos + 4 * w * h) throw DataError("depth payload size: " + e.depth);
  s.depth.resize(w * h);
  for (auto& f : s.depth) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(depth, pos));
  const std::string mask = read_file(dir / e.mask);
  auto [mw, mh] = detail::read_raster_header(mask, "MASK", pos);
  if (mw != w || mh != h || mask.size() != pos + w * h) throw DataError("mask size: " + e.mask);
  s.mask.assign(mask.begin() + static_cast<std::ptrdiff_t>(pos), mask.end());
  s.planes = decode_planes(read_file(dir / e.planes), w * h);
  return s;
}

/// Loads every sample of one split ("train" or "eval") in manifest order.
inline std::vector<DepthSample> load_split(const std::filesystem::path& dir, const std::string& split) {
  const auto entries = read_manifest(dir);
  std::vector<const ManifestEntry*> picked;
  for (const auto& e : entries)
    if (e.split == split) picked.push_back(&e);
  std::vector<DepthSample> out(picked.size());
  parallel_for(picked.size(), [&](std::size_t i) { out[i] = load_sample(dir, *picked[i]); });
  return out;
}

/// Scene seed for sample `index` of a split. Train and eval occupy disjoint
/// halves of the 32-bit index space under the dataset seed.
inline std::uint64_t scene_seed(std::uint64_t dataset_seed, bool eval_split, std::uint64_t index) {
  return (dataset_seed << 32) | (eval_split ? (1ULL << 31) : 0ULL) | index;
}

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::uint64_t> seeds;
};

/// Renders n_train + n_eval samples into out_dir/{train,eval}/ and writes
/// out_dir/manifest.tsv.
inline Manifest make_dataset(std::size_t n_train, std::size_t n_eval, std::uint64_t seed,
                             const std::filesystem::path& out_dir) {
  if (n_train == 0 || n_eval == 0) throw DataError("make_dataset: counts must be positive");
  if (n_train >= (1ULL << 31) || n_eval >= (1ULL << 31)) throw DataError("make_dataset: count too large");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "train", ec);
  std::filesystem::create_directories(out_dir / "eval", ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());

  Manifest m;
  const std::size_t total = n_train + n_eval;
  m.entries.resize(total);
  m.seeds.resize(total);
  for (std::size_t i = 0; i < total; ++i) {
    const bool ev = i >= n_train;
    const std::size_t idx = ev ? i - n_train : i;
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", idx);
    const std::string dir = ev ? "eval/" : "train/";
    m.entries[i] = {ev ? "eval" : "train", dir + stem + ".ppm", dir + stem + ".depth", dir + stem + ".mask",
                    dir + stem + ".planes"};
    m.seeds[i] = scene_seed(seed, ev, idx);
  }
  parallel_for(total, [&](std::size_t i) {
    const DepthSample s = generate_sample(m.seeds[i]);
    const auto& e = m.entries[i];
    write_file_atomic(out_dir / e.image, encode_ppm(s));
    write_file_atomic(out_dir / e.depth, encode_depth(s));
    write_file_atomic(out_dir / e.mask, encode_mask(s));
    write_file_atomic(out_dir / e.planes, encode_planes(s));
  });
  std::string manifest;
  for (const auto& e : m.entries)
    manifest += e.split + '\t' + e.image + '\t' + e.depth + '\t' + e.mask + '\t' + e.planes + '\n';
  write_file_atomic(out_dir / "manifest.tsv", manifest);
  return m;
}

}  // namespace depthart
