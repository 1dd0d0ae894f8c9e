#include "skillloop/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace skillloop::volume {

using ojson = nlohmann::ordered_json;

std::string Dims::str() const {
  std::ostringstream os;
  os << "(" << depth << "," << height << "," << width << ")";
  return os.str();
}

void Volume::validate() const {
  if (dims.depth < 1 || dims.height < 1 || dims.width < 1)
    throw ValidationError("volume " + id + ": dims must be >= 1, got " + dims.str());
  if (intensities.size() != dims.voxels())
    throw ValidationError("volume " + id + ": intensity count " + std::to_string(intensities.size()) +
                          " does not match dims " + dims.str());
  for (float v : intensities) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
      throw ValidationError("volume " + id + ": intensity outside [0,1]");
  }
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(voxels.begin(), voxels.end(), [](std::uint8_t v) { return v != 0; }));
}

bool Mask::is_subset_of(const Mask& other) const {
  if (dims != other.dims) return false;
  for (std::size_t i = 0; i < voxels.size(); ++i)
    if (voxels[i] && !other.voxels[i]) return false;
  return true;
}

std::string Mask::digest() const {
  std::string bytes = dims.str();
  bytes.append(reinterpret_cast<const char*>(voxels.data()), voxels.size());
  return skillloop::digest(bytes);
}

void SceneCase::validate() const {
  volume.validate();
  if (targets.empty()) throw ValidationError("case " + case_id + ": no targets");
  for (const auto& [id, t] : targets) {
    if (t.target_id.empty() || t.target_id != id)
      throw ValidationError("case " + case_id + ": target key/id mismatch for '" + id + "'");
    if (t.mask.dims != volume.dims || t.mask.voxels.size() != volume.dims.voxels())
      throw ValidationError("case " + case_id + ": mask dims of '" + id + "' do not match volume " + volume.dims.str());
    for (const auto& sub : t.subregion_ids) {
      auto it = targets.find(sub);
      if (it == targets.end())
        throw ValidationError("case " + case_id + ": subregion '" + sub + "' of '" + id + "' not found");
      if (!it->second.mask.is_subset_of(t.mask))
        throw ValidationError("case " + case_id + ": subregion '" + sub + "' is not contained in '" + id + "'");
    }
  }
}

const TargetSpec* SceneCase::find(std::string_view name) const {
  const std::string key = to_lower(trim(name));
  if (key.empty()) return nullptr;
  if (auto it = targets.find(key); it != targets.end()) return &it->second;
  for (const auto& [id, t] : targets) {
    if (iequals(id, key)) return &t;
    for (const auto& syn : t.synonyms)
      if (iequals(syn, key)) return &t;
  }
  return nullptr;
}

const TargetSpec* SceneCase::parent_of(std::string_view target_id) const {
  for (const auto& [id, t] : targets)
    if (std::find(t.subregion_ids.begin(), t.subregion_ids.end(), target_id) != t.subregion_ids.end()) return &t;
  return nullptr;
}

// ---------------- rendering ----------------

std::string_view to_string(Plane p) {
  switch (p) {
    case Plane::axial: return "axial";
    case Plane::coronal: return "coronal";
    case Plane::sagittal: return "sagittal";
  }
  return "axial";
}

std::string_view to_string(ViewKind k) { return k == ViewKind::mid_slice ? "mid-slice" : "MIP"; }

std::string view_caption(Plane p, ViewKind k) {
  return std::string(to_string(p)) + " " + std::string(to_string(k));
}

const std::vector<std::string>& standard_captions() {
  static const std::vector<std::string> kCaptions = [] {
    std::vector<std::string> out;
    ViewConfig cfg;
    for (auto p : cfg.planes)
      for (auto k : cfg.kinds) out.push_back(view_caption(p, k));
    return out;
  }();
  return kCaptions;
}

namespace {

View render_one(const Volume& v, Plane plane, ViewKind kind) {
  const Dims& d = v.dims;
  View view;
  view.plane = plane;
  view.kind = kind;
  view.caption = view_caption(plane, kind);
  int axis_len = 0;
  switch (plane) {
    case Plane::axial: view.rows = d.height; view.cols = d.width; axis_len = d.depth; break;
    case Plane::coronal: view.rows = d.depth; view.cols = d.width; axis_len = d.height; break;
    case Plane::sagittal: view.rows = d.depth; view.cols = d.height; axis_len = d.width; break;
  }
  auto sample = [&](int r, int c, int a) {
    switch (plane) {
      case Plane::axial: return v.at(a, r, c);
      case Plane::coronal: return v.at(r, a, c);
      case Plane::sagittal: return v.at(r, c, a);
    }
    return 0.0f;
  };
  view.pixels.assign(static_cast<std::size_t>(view.rows) * static_cast<std::size_t>(view.cols), 0.0f);
  const int mid = axis_len / 2;
  for (int r = 0; r < view.rows; ++r) {
    for (int c = 0; c < view.cols; ++c) {
      float value = 0.0f;
      if (kind == ViewKind::mid_slice) {
        value = sample(r, c, mid);
      } else {
        value = sample(r, c, 0);
        for (int a = 1; a < axis_len; ++a) value = std::max(value, sample(r, c, a));
      }
      view.pixels[static_cast<std::size_t>(r) * static_cast<std::size_t>(view.cols) + static_cast<std::size_t>(c)] = value;
    }
  }
  return view;
}

}  // namespace

std::vector<View> render_views(const Volume& volume, const ViewConfig& config) {
  volume.validate();
  std::vector<View> views;
  views.reserve(config.planes.size() * config.kinds.size());
  for (auto p : config.planes)
    for (auto k : config.kinds) views.push_back(render_one(volume, p, k));
  return views;
}

// ---------------- executor ----------------

Resolution resolve_answer(const SceneCase& scene, const CanonicalAnswer& answer) {
  Resolution res;
  const TargetSpec* target = scene.find(answer.target_id);
  if (!target) {
    res.issues.push_back("UNRESOLVED_TARGET");
    return res;
  }
  if (answer.laterality) {
    if (target->laterality == answer.laterality) {
      // already the requested side
    } else {
      const TargetSpec* side = nullptr;
      bool any_lateral_child = false;
      for (const auto& sub : target->subregion_ids) {
        const auto& child = scene.targets.at(sub);
        if (child.laterality) any_lateral_child = true;
        if (child.laterality == answer.laterality) side = &child;
      }
      if (side) {
        target = side;
      } else if (!target->laterality && !any_lateral_child) {
        res.issues.push_back("LATERALITY_UNSUPPORTED");
        return res;
      } else {
        res.issues.push_back("LATERALITY_MISMATCH");
        return res;
      }
    }
  }
  if (answer.subregion) {
    const std::string want = to_lower(trim(*answer.subregion));
    const TargetSpec* match = nullptr;
    for (const auto& sub : target->subregion_ids) {
      const auto& child = scene.targets.at(sub);
      bool hit = iequals(child.target_id, want) || iequals(child.target_id, target->target_id + "_" + want);
      for (const auto& syn : child.synonyms) hit = hit || iequals(syn, want);
      if (hit) {
        match = &child;
        break;
      }
    }
    if (!match) {
      res.issues.push_back("UNKNOWN_SUBREGION");
      return res;
    }
    target = match;
  }
  res.target = target;
  return res;
}

std::vector<std::size_t> surface_voxels(const Mask& mask, bool dilate) {
  static constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  const Dims& d = mask.dims;
  std::vector<std::size_t> out;
  for (int z = 0; z < d.depth; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        const bool inside = mask.at(z, y, x);
        if (inside == dilate) continue;
        bool boundary = false;
        for (const auto& o : kOffsets) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (!d.contains(nz, ny, nx)) {
            boundary = boundary || !dilate;
            continue;
          }
          if (mask.at(nz, ny, nx) != inside) boundary = true;
        }
        if (boundary) out.push_back(d.index(z, y, x));
      }
  return out;
}

Mask perturb_boundary(const Mask& mask, int max_boundary_voxels, std::uint64_t seed) {
  Mask out = mask;
  if (max_boundary_voxels <= 0) return out;
  Rng rng(seed);
  const bool dilate = (rng.next() & 1U) != 0;
  auto candidates = surface_voxels(mask, dilate);
  const auto wanted = 1 + rng.below(static_cast<std::uint64_t>(max_boundary_voxels));
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(wanted), candidates.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
    out.voxels[candidates[i]] = dilate ? 1 : 0;
  }
  return out;
}

Execution execute_segmentation(const SceneCase& scene, const CanonicalAnswer& answer, const NoiseConfig& noise,
                               std::uint64_t seed) {
  Execution exec;
  auto res = resolve_answer(scene, answer);
  if (!res.target) {
    exec.mask = Mask::empty(scene.volume.dims);
    exec.unresolved = true;
    exec.issues = std::move(res.issues);
    return exec;
  }
  exec.mask = perturb_boundary(res.target->mask, noise.max_boundary_voxels, seed);
  return exec;
}

double dice(const Mask& pred, const Mask& gt) {
  if (pred.dims != gt.dims || pred.voxels.size() != gt.voxels.size())
    throw ValidationError("dice: dims mismatch " + pred.dims.str() + " vs " + gt.dims.str());
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
    const bool p = pred.voxels[i] != 0, g = gt.voxels[i] != 0;
    a += p;
    b += g;
    inter += (p && g);
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

// ---------------- corpus ----------------

namespace {

struct Geometry {
  int slab = 0;
  int max_radius = 0;
};

Geometry check_geometry(const CorpusConfig& c) {
  const Dims& d = c.dims;
  if (c.cases < 1) throw ValidationError("corpus: at least one case required");
  if (d.depth < 1 || d.height < 1 || d.width < 1) throw ValidationError("corpus: dims must be >= 1");
  if (c.min_radius < 1 || c.max_radius < c.min_radius)
    throw ValidationError("corpus: radius bounds must satisfy 1 <= min_radius <= max_radius");
  if (c.lesions_per_side < 1) throw ValidationError("corpus: lesions_per_side must be >= 1");
  Geometry g;
  g.slab = d.depth / c.lesions_per_side;
  const int half_y = d.height / 2;
  const int span_x = c.laterality ? d.width / 2 : d.width;
  g.max_radius = std::min({(g.slab - 1) / 2, (half_y - 1) / 2, (span_x - 1) / 2, c.max_radius});
  const bool fragment_fits = (d.height - half_y) >= 3 && d.width >= 6 && d.depth >= (c.subregions ? 4 : 2);
  if (g.max_radius < c.min_radius || !fragment_fits) {
    throw ValidationError("corpus: dims " + d.str() + " too small to place " + std::to_string(c.lesions_per_side) +
                          " lesion(s) per side of radius >= " + std::to_string(c.min_radius) + " plus a fragment");
  }
  return g;
}

void paint_sphere(Mask& m, int cz, int cy, int cx, int r) {
  const Dims& d = m.dims;
  for (int z = cz - r; z <= cz + r; ++z)
    for (int y = cy - r; y <= cy + r; ++y)
      for (int x = cx - r; x <= cx + r; ++x) {
        if (!d.contains(z, y, x)) continue;
        const int dz = z - cz, dy = y - cy, dx = x - cx;
        if (dz * dz + dy * dy + dx * dx <= r * r) m.set(z, y, x);
      }
}

int uniform_int(Rng& rng, int lo, int hi) {
  if (hi < lo) return lo;
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

Mask union_of(const Mask& a, const Mask& b) {
  Mask out = a;
  for (std::size_t i = 0; i < out.voxels.size(); ++i) out.voxels[i] = (a.voxels[i] || b.voxels[i]) ? 1 : 0;
  return out;
}

SceneCase synth_case(const CorpusConfig& c, const Geometry& g, int index, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  const Dims& d = c.dims;
  char name[32];
  std::snprintf(name, sizeof(name), "case_%03d", index);

  SceneCase sc;
  sc.case_id = name;
  sc.volume.id = name;
  sc.volume.dims = d;
  sc.volume.spacing = c.spacing;
  sc.volume.intensities.resize(d.voxels());
  for (auto& v : sc.volume.intensities) v = static_cast<float>(0.05 + 0.05 * rng.uniform());

  const int half_y = d.height / 2;
  auto place_lesions = [&](int x_lo, int x_hi) {
    Mask m = Mask::empty(d);
    for (int s = 0; s < c.lesions_per_side; ++s) {
      const int r = uniform_int(rng, c.min_radius, g.max_radius);
      const int cz = uniform_int(rng, s * g.slab + r, s * g.slab + g.slab - 1 - r);
      const int cy = uniform_int(rng, r, half_y - 1 - r);
      const int cx = uniform_int(rng, x_lo + r, x_hi - r);
      paint_sphere(m, cz, cy, cx, r);
    }
    return m;
  };

  auto add = [&](TargetSpec t) { sc.targets.emplace(t.target_id, std::move(t)); };

  Mask lesion_all;
  if (c.laterality) {
    const int left_max = d.width / 2 - 1;
    const int right_min = (d.width + 1) / 2;
    Mask left = place_lesions(0, left_max);
    Mask right = place_lesions(right_min, d.width - 1);
    lesion_all = union_of(left, right);
    add({"lesion_left", {"left lesion", "left-sided lesion", "left hemispheric lesion"}, Laterality::left, {}, left});
    add({"lesion_right", {"right lesion", "right-sided lesion", "right hemispheric lesion"}, Laterality::right, {}, right});
    add({"lesion", {"lesions", "metastatic lesions", "metastases", "tumor deposits"}, Laterality::bilateral,
         {"lesion_left", "lesion_right"}, lesion_all});
  } else {
    lesion_all = place_lesions(0, d.width - 1);
    add({"lesion", {"lesions", "metastatic lesions", "metastases", "tumor deposits"}, std::nullopt, {}, lesion_all});
  }

  // fragment: box straddling the midline in the lower half of the y range
  const int z0 = uniform_int(rng, 0, d.depth / 4);
  const int z1 = d.depth - 1 - uniform_int(rng, 0, d.depth / 4);
  const int y0 = uniform_int(rng, half_y, half_y + (d.height - half_y) / 4);
  const int y1 = d.height - 1 - uniform_int(rng, 0, (d.height - half_y) / 4);
  const int half_w = uniform_int(rng, 1, std::max(1, d.width / 4));
  const int x0 = std::max(0, d.width / 2 - half_w);
  const int x1 = std::min(d.width - 1, d.width / 2 + half_w);
  Mask fragment = Mask::empty(d);
  Mask superior = Mask::empty(d);
  Mask inferior = Mask::empty(d);
  const int zmid = (z0 + z1 + 1) / 2;
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        fragment.set(z, y, x);
        (z >= zmid ? superior : inferior).set(z, y, x);
      }
  if (c.subregions) {
    add({"fragment", {"bone fragment", "fracture fragment", "osseous fragment"}, std::nullopt,
         {"fragment_inferior", "fragment_superior"}, fragment});
    add({"fragment_superior", {"superior fragment", "upper fragment", "cranial fragment"}, std::nullopt, {}, superior});
    add({"fragment_inferior", {"inferior fragment", "lower fragment", "caudal fragment"}, std::nullopt, {}, inferior});
  } else {
    add({"fragment", {"bone fragment", "fracture fragment", "osseous fragment"}, std::nullopt, {}, fragment});
  }

  const float lesion_level = static_cast<float>(0.80 + 0.15 * rng.uniform());
  const float fragment_level = static_cast<float>(0.55 + 0.10 * rng.uniform());
  for (std::size_t i = 0; i < sc.volume.intensities.size(); ++i) {
    if (fragment.voxels[i]) sc.volume.intensities[i] = fragment_level;
    if (lesion_all.voxels[i]) sc.volume.intensities[i] = lesion_level;
  }
  sc.validate();
  return sc;
}

}  // namespace

std::vector<SceneCase> synth_corpus(const CorpusConfig& config, std::uint64_t seed) {
  const Geometry g = check_geometry(config);
  std::vector<SceneCase> out;
  out.reserve(static_cast<std::size_t>(config.cases));
  for (int i = 0; i < config.cases; ++i) out.push_back(synth_case(config, g, i, seed));
  return out;
}

// ---------------- on-disk format ----------------

namespace {

void write_bytes(const std::filesystem::path& path, const char* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(data, static_cast<std::streamsize>(n));
  if (!f) throw IoError("write failed: " + path.string());
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFU) << 24) | ((v & 0xFF00U) << 8) | ((v >> 8) & 0xFF00U) | (v >> 24);
}

std::string mask_file(const std::string& id) { return "masks/" + id + ".u8"; }

}  // namespace

void save_case(const SceneCase& scene, const std::filesystem::path& dir) {
  scene.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create " + (dir / "masks").string() + ": " + ec.message());

  ojson meta;
  meta["case_id"] = scene.case_id;
  meta["dims"] = {scene.volume.dims.depth, scene.volume.dims.height, scene.volume.dims.width};
  meta["spacing"] = {scene.volume.spacing.dz, scene.volume.spacing.dy, scene.volume.spacing.dx};
  meta["volume"] = "volume.f32";
  ojson targets = ojson::array();
  for (const auto& [id, t] : scene.targets) {
    ojson jt;
    jt["target_id"] = t.target_id;
    jt["synonyms"] = t.synonyms;
    jt["laterality"] = t.laterality ? ojson(std::string(to_string(*t.laterality))) : ojson(nullptr);
    jt["subregion_ids"] = t.subregion_ids;
    jt["mask"] = mask_file(id);
    targets.push_back(std::move(jt));
    write_bytes(dir / mask_file(id), reinterpret_cast<const char*>(t.mask.voxels.data()), t.mask.voxels.size());
  }
  meta["targets"] = std::move(targets);
  const std::string text = meta.dump(2) + "\n";
  write_bytes(dir / "case.json", text.data(), text.size());

  std::vector<std::uint32_t> raw(scene.volume.intensities.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &scene.volume.intensities[i], sizeof(bits));
    raw[i] = to_little(bits);
  }
  write_bytes(dir / "volume.f32", reinterpret_cast<const char*>(raw.data()), raw.size() * sizeof(std::uint32_t));
}

SceneCase load_case(const std::filesystem::path& dir) {
  ojson meta;
  try {
    meta = ojson::parse(read_bytes(dir / "case.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + (dir / "case.json").string() + ": " + e.what());
  }
  SceneCase sc;
  try {
    sc.case_id = meta.at("case_id").get<std::string>();
    const auto& dims = meta.at("dims");
    sc.volume.id = sc.case_id;
    sc.volume.dims = {dims.at(0).get<int>(), dims.at(1).get<int>(), dims.at(2).get<int>()};
    const auto& sp = meta.at("spacing");
    sc.volume.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
    const std::string raw = read_bytes(dir / meta.at("volume").get<std::string>());
    if (raw.size() != sc.volume.dims.voxels() * 4)
      throw IoError("volume file size does not match dims " + sc.volume.dims.str());
    sc.volume.intensities.resize(sc.volume.dims.voxels());
    for (std::size_t i = 0; i < sc.volume.intensities.size(); ++i) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, raw.data() + 4 * i, 4);
      bits = to_little(bits);
      std::memcpy(&sc.volume.intensities[i], &bits, 4);
    }
    for (const auto& jt : meta.at("targets")) {
      TargetSpec t;
      t.target_id = jt.at("target_id").get<std::string>();
      t.synonyms = jt.at("synonyms").get<std::vector<std::string>>();
      if (!jt.at("laterality").is_null()) {
        t.laterality = parse_laterality(jt.at("laterality").get<std::string>());
        if (!t.laterality) throw IoError("bad laterality for target " + t.target_id);
      }
      t.subregion_ids = jt.at("subregion_ids").get<std::vector<std::string>>();
      const std::string bytes = read_bytes(dir / jt.at("mask").get<std::string>());
      if (bytes.size() != sc.volume.dims.voxels())
        throw IoError("mask size mismatch for target " + t.target_id);
      t.mask.dims = sc.volume.dims;
      t.mask.voxels.assign(bytes.begin(), bytes.end());
      for (auto& v : t.mask.voxels) v = v ? 1 : 0;
      sc.targets.emplace(t.target_id, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + (dir / "case.json").string() + ": " + e.what());
  }
  sc.validate();
  return sc;
}

std::string encode_pgm(const View& view) {
  std::string out = "P5\n" + std::to_string(view.cols) + " " + std::to_string(view.rows) + "\n255\n";
  out.reserve(out.size() + view.pixels.size());
  for (float v : view.pixels) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  return out;
}

void write_pgm(const View& view, const std::filesystem::path& path) {
  const std::string bytes = encode_pgm(view);
  write_bytes(path, bytes.data(), bytes.size());
}

}  // namespace skillloop::volume
