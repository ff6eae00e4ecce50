#include "kpreid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kpr {

Cell Deformation::apply(Cell cell, std::size_t width, std::size_t height) const {
  switch (kind) {
    case Kind::none:
      return cell;
    case Kind::hflip:
      return Cell{width - 1 - cell.x, cell.y};
    case Kind::translation: {
      const long w = static_cast<long>(width), h = static_cast<long>(height);
      long x = (static_cast<long>(cell.x) + dx) % w;
      long y = (static_cast<long>(cell.y) + dy) % h;
      if (x < 0) x += w;
      if (y < 0) y += h;
      return Cell{static_cast<std::size_t>(x), static_cast<std::size_t>(y)};
    }
    case Kind::permutation: {
      const std::size_t dst = perm.at(cell.y * width + cell.x);
      return Cell{dst % width, dst / width};
    }
  }
  throw ContractError("unknown deformation kind");
}

std::string Deformation::kind_name(Kind k) {
  switch (k) {
    case Kind::none: return "none";
    case Kind::hflip: return "hflip";
    case Kind::permutation: return "permutation";
    case Kind::translation: return "translation";
  }
  throw ContractError("unknown deformation kind");
}

Deformation::Kind Deformation::kind_from_name(const std::string& name) {
  if (name == "none") return Kind::none;
  if (name == "hflip") return Kind::hflip;
  if (name == "permutation") return Kind::permutation;
  if (name == "translation") return Kind::translation;
  throw ValidationError("unknown deformation kind \"" + name + "\"");
}

void SynthConfig::validate() const {
  if (n_identities == 0 || images_per_identity == 0)
    throw ValidationError("identities and images per identity must be >= 1");
  if (channels < 2) throw ValidationError("channels must be >= 2");
  if (grid_height == 0 || grid_width == 0) throw ValidationError("grid dimensions must be positive");
  if (n_keypoints == 0) throw ValidationError("keypoints must be >= 1");
  if (n_keypoints > grid_height * grid_width)
    throw ValidationError("keypoints exceed the number of feature cells");
  if (patch_size == 0 || image_width % patch_size != 0 || image_height % patch_size != 0)
    throw ValidationError("image dimensions must be multiples of patch_size");
  const std::size_t rows = image_height / patch_size;
  const std::size_t cols = image_width / patch_size;
  if (grid_height % rows != 0 || grid_width % cols != 0)
    throw ValidationError("feature grid must divide evenly into the patch grid");
  if (deformation_kinds.empty()) throw ValidationError("at least one deformation kind required");
  if (noise_scale < 0.0 || noise_scale > 1.0)
    throw ValidationError("noise_scale must be in [0, 1]");
  if (signal_strength < 0.0 || signal_strength >= 1.0)
    throw ValidationError("signal_strength must be in [0, 1)");
  if (train_fraction <= 0.0 || train_fraction > 1.0)
    throw ValidationError("train_fraction must be in (0, 1]");
}

namespace {

struct CellVecs {
  std::size_t channels = 0;
  std::size_t n = 0;
  std::vector<double> v;  // [cell][channel]

  double* cell(std::size_t i) { return v.data() + i * channels; }
  const double* cell(std::size_t i) const { return v.data() + i * channels; }
};

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

SynthDataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  const std::size_t C = cfg.channels;
  const std::size_t H = cfg.grid_height, W = cfg.grid_width;
  const std::size_t n_cells = H * W;
  const std::size_t rows = cfg.image_height / cfg.patch_size;
  const std::size_t cols = cfg.image_width / cfg.patch_size;
  const std::size_t ph = H / rows, pw = W / cols;  // feature cells per patch
  const std::size_t n_images = cfg.n_identities * cfg.images_per_identity;
  const std::size_t signal_dims = std::clamp<std::size_t>(C / 4, 1, 8);
  const std::size_t bg_dims = C - signal_dims;

  // 1. background codes: one unit vector per cell, zero on the signal dims
  CellVecs bg;
  bg.channels = C;
  bg.n = n_cells;
  bg.v.assign(n_cells * C, 0.0);
  for (std::size_t i = 0; i < n_cells; ++i) {
    double norm_sq = 0.0;
    for (std::size_t c = 0; c < bg_dims; ++c) {
      bg.cell(i)[c] = rng.normal();
      norm_sq += bg.cell(i)[c] * bg.cell(i)[c];
    }
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-12) throw ValidationError("generation infeasible: degenerate background code");
    for (std::size_t c = 0; c < bg_dims; ++c) bg.cell(i)[c] /= norm;
  }

  // 2. per-(identity, keypoint) signature: harmonic embedding of an identity
  // angle on the signal dims. Angles follow golden-ratio spacing so held-out
  // identities interleave the training ones, and the smooth parameterization
  // lets a learned signature readout interpolate to identities it never saw.
  const double golden = 0.6180339887498949;
  const double two_pi = 6.283185307179586;
  std::vector<std::vector<double>> signatures(cfg.n_identities * cfg.n_keypoints,
                                              std::vector<double>(signal_dims));
  for (std::size_t id = 0; id < cfg.n_identities; ++id)
    for (std::size_t k = 0; k < cfg.n_keypoints; ++k) {
      double frac = golden * static_cast<double>(id + 1) +
                    static_cast<double>(k) / static_cast<double>(cfg.n_keypoints);
      frac -= std::floor(frac);
      const double theta = two_pi * frac;
      std::vector<double>& sig = signatures[id * cfg.n_keypoints + k];
      if (signal_dims == 1) {
        sig[0] = std::cos(theta) >= 0.0 ? 1.0 : -1.0;
      } else {
        // each category writes one (cos, sin) pair so no global pooling of
        // the signal channels stays identity-coherent
        const std::size_t pairs = signal_dims / 2;
        const std::size_t p = k % pairs;
        sig[2 * p] = std::cos(theta);
        sig[2 * p + 1] = std::sin(theta);
      }
    }

  // 2b. per-cell decoy: a signature drawn from the shared pool. Every image
  // then contains every identity's signatures somewhere, so the mere presence
  // of a signature carries no identity information; only its position at the
  // true keypoint cells does.
  std::vector<std::size_t> decoy_choice(n_cells);
  for (std::size_t i = 0; i < n_cells; ++i) decoy_choice[i] = rng.index(signatures.size());

  // 3. reference keypoints: distinct patches when possible, else distinct cells
  std::vector<Cell> kp_cells;
  if (cfg.n_keypoints <= rows * cols) {
    std::vector<std::size_t> patches(rows * cols);
    std::iota(patches.begin(), patches.end(), 0);
    rng.shuffle(patches);
    for (std::size_t i = 0; i < cfg.n_keypoints; ++i) {
      const std::size_t pr = patches[i] / cols, pc = patches[i] % cols;
      Cell cell;
      cell.y = pr * ph + rng.index(ph);
      cell.x = pc * pw + rng.index(pw);
      kp_cells.push_back(cell);
    }
  } else {
    std::vector<std::size_t> cells(n_cells);
    std::iota(cells.begin(), cells.end(), 0);
    rng.shuffle(cells);
    for (std::size_t i = 0; i < cfg.n_keypoints; ++i)
      kp_cells.push_back(Cell{cells[i] % W, cells[i] / W});
  }

  // 4. per-image deformation (reference keeps the identity deformation)
  std::vector<Deformation> deformations(n_images);
  for (std::size_t m = 1; m < n_images; ++m) {
    Deformation d;
    d.kind = cfg.deformation_kinds[rng.index(cfg.deformation_kinds.size())];
    if (d.kind == Deformation::Kind::translation) {
      d.dx = static_cast<long>(rng.index(W));
      d.dy = static_cast<long>(rng.index(H));
    } else if (d.kind == Deformation::Kind::permutation) {
      std::vector<std::uint32_t> p(n_cells);
      std::iota(p.begin(), p.end(), 0);
      rng.shuffle(p);
      d.perm = std::move(p);
    }
    deformations[m] = std::move(d);
  }

  // 5. noise units drawn up front so signal-strength retries stay deterministic
  std::vector<std::vector<double>> noise_units(n_images);
  for (auto& u : noise_units) {
    u.resize(n_cells * C);
    for (double& x : u) x = rng.uniform(-1.0, 1.0);
  }

  // true keypoint cells per image; the signature replaces the decoy at
  // exactly these cells
  std::vector<std::vector<Cell>> true_cells(n_images);
  for (std::size_t m = 0; m < n_images; ++m)
    for (const Cell& kp : kp_cells) true_cells[m].push_back(deformations[m].apply(kp, W, H));

  // per-image clutter: extra signatures at random non-keypoint cells, so the
  // global bag of cell contents varies per image and only position singles
  // out the identity's own signatures
  const std::size_t n_clutter = std::min(4 * cfg.n_keypoints, n_cells - cfg.n_keypoints);
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> clutter(n_images);
  for (std::size_t m = 0; m < n_images; ++m) {
    std::vector<char> taken(n_cells, 0);
    for (const Cell& t : true_cells[m]) taken[t.y * W + t.x] = 1;
    std::vector<std::size_t> free_cells;
    for (std::size_t i = 0; i < n_cells; ++i)
      if (!taken[i]) free_cells.push_back(i);
    rng.shuffle(free_cells);
    for (std::size_t j = 0; j < n_clutter; ++j)
      clutter[m].emplace_back(free_cells[j], rng.index(signatures.size()));
  }

  // 6. build noiseless maps and measure the worst argmax margin; shrink the
  //    signal mix until the margin is positive
  const std::size_t ref_image = 0;
  std::vector<CellVecs> maps(n_images);
  double beta = cfg.signal_strength;
  double gap = 0.0;
  for (int attempt = 0;; ++attempt) {
    const double alpha = std::sqrt(1.0 - beta * beta);
    for (std::size_t m = 0; m < n_images; ++m) {
      const std::size_t identity = m / cfg.images_per_identity;
      CellVecs& map = maps[m];
      map.channels = C;
      map.n = n_cells;
      map.v.assign(n_cells * C, 0.0);
      for (std::size_t i = 0; i < n_cells; ++i) {
        const Cell src{i % W, i / W};
        const Cell dst = deformations[m].apply(src, W, H);
        const std::size_t di = dst.y * W + dst.x;
        double* cell = map.cell(di);
        for (std::size_t c = 0; c < bg_dims; ++c) cell[c] = alpha * bg.cell(i)[c];
        for (std::size_t c = 0; c < signal_dims; ++c)
          cell[bg_dims + c] = beta * signatures[decoy_choice[i]][c];
      }
      for (const auto& [ci, si] : clutter[m]) {
        double* cell = map.cell(ci);
        for (std::size_t c = 0; c < signal_dims; ++c)
          cell[bg_dims + c] = beta * signatures[si][c];
      }
      for (std::size_t k = 0; k < true_cells[m].size(); ++k) {
        const Cell t = true_cells[m][k];
        double* cell = map.cell(t.y * W + t.x);
        const std::vector<double>& sig = signatures[identity * cfg.n_keypoints + k];
        for (std::size_t c = 0; c < signal_dims; ++c) cell[bg_dims + c] = beta * sig[c];
      }
    }

    gap = 2.0;
    for (std::size_t k = 0; k < kp_cells.size(); ++k) {
      const Cell rc = true_cells[ref_image][k];
      const double* a = maps[ref_image].cell(rc.y * W + rc.x);
      for (std::size_t m = 0; m < n_images; ++m) {
        const Cell tc = true_cells[m][k];
        const std::size_t ti = tc.y * W + tc.x;
        const double correct = dot(a, maps[m].cell(ti), C);
        double wrong = -2.0;
        for (std::size_t i = 0; i < n_cells; ++i) {
          if (i == ti) continue;
          wrong = std::max(wrong, dot(a, maps[m].cell(i), C));
        }
        gap = std::min(gap, correct - wrong);
      }
    }
    if (gap > 1e-6) break;
    if (beta == 0.0 || attempt >= 8)
      throw ValidationError("generation infeasible: no positive argmax margin");
    beta = beta > 1e-3 ? beta * 0.5 : 0.0;
  }

  // 7. noise bound: safe fraction of the margin, also under the minimum
  //    pairwise distance of the reference base map
  double d_min_sq = 4.0;
  const CellVecs& base = maps[ref_image];
  for (std::size_t i = 0; i < n_cells; ++i)
    for (std::size_t j = i + 1; j < n_cells; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double d = base.cell(i)[c] - base.cell(j)[c];
        s += d * d;
      }
      d_min_sq = std::min(d_min_sq, s);
    }
  const double d_min = std::sqrt(d_min_sq);
  const double bound = std::min(gap / (16.0 * std::sqrt(static_cast<double>(C))), 0.499 * d_min);
  if (bound <= 0.0) throw ValidationError("generation infeasible: noise bound nonpositive");

  for (std::size_t m = 0; m < n_images; ++m) {
    const double amp = bound * cfg.noise_scale;
    if (amp == 0.0) continue;
    for (std::size_t i = 0; i < maps[m].v.size(); ++i) maps[m].v[i] += amp * noise_units[m][i];
  }

  // 8. assemble dataset
  SynthDataset ds;
  ds.noise_bound = bound * cfg.noise_scale;
  ds.similarity_gap = gap;

  const std::size_t n_train =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(
                                   cfg.train_fraction * static_cast<double>(cfg.n_identities))));
  ds.index.patch_size = cfg.patch_size;
  for (std::size_t k = 0; k < cfg.n_keypoints; ++k)
    ds.index.categories.push_back("kp_" + std::to_string(k));

  char buf[64];
  for (std::size_t m = 0; m < n_images; ++m) {
    const std::size_t identity = m / cfg.images_per_identity;
    const std::size_t img = m % cfg.images_per_identity;
    std::snprintf(buf, sizeof(buf), "id%03zu_img%03zu", identity, img);
    ImageRecord rec;
    rec.image_id = buf;
    std::snprintf(buf, sizeof(buf), "id%03zu", identity);
    rec.identity = buf;
    rec.split = identity < n_train ? Split::train : Split::test;
    rec.image_width = cfg.image_width;
    rec.image_height = cfg.image_height;
    rec.feature_path = "features/" + rec.image_id + ".fmap";
    ds.index.images.push_back(std::move(rec));

    FeatureMap fm;
    fm.channels = C;
    fm.height = H;
    fm.width = W;
    fm.values.resize(n_cells * C);
    // map storage is [cell][channel]; files are [channel][cell]
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < n_cells; ++i)
        fm.values[c * n_cells + i] = static_cast<float>(maps[m].cell(i)[c]);
    ds.features.push_back(std::move(fm));
  }
  ds.reference_id = ds.index.images[ref_image].image_id;

  ds.reference.image_id = ds.reference_id;
  for (std::size_t k = 0; k < kp_cells.size(); ++k) {
    auto [px, py] =
        cell_to_pixel(kp_cells[k], cfg.image_width, cfg.image_height, W, H);
    ds.reference.keypoints.push_back(Keypoint{px, py, k});
  }

  ds.truth.reference_id = ds.reference_id;
  for (std::size_t m = 0; m < n_images; ++m) {
    ImageTruth truth;
    truth.image_id = ds.index.images[m].image_id;
    truth.deformation = deformations[m];
    for (std::size_t k = 0; k < kp_cells.size(); ++k) {
      TruthKeypoint tk;
      tk.category = k;
      tk.cell = true_cells[m][k];
      auto [px, py] = cell_to_pixel(tk.cell, cfg.image_width, cfg.image_height, W, H);
      tk.x = px;
      tk.y = py;
      truth.keypoints.push_back(tk);
    }
    ds.truth.images.push_back(std::move(truth));
  }
  return ds;
}

void write_synth_dataset(const std::string& dir, const SynthDataset& ds) {
  fs::create_directories(fs::path(dir) / "features");
  save_manifest((fs::path(dir) / "manifest.json").string(), ds.index);
  for (std::size_t m = 0; m < ds.index.images.size(); ++m)
    write_feature_map((fs::path(dir) / ds.index.images[m].feature_path).string(), ds.features[m]);
  save_keypoints((fs::path(dir) / "ref_keypoints.json").string(), ds.reference);
  save_ground_truth((fs::path(dir) / "ground_truth.json").string(), ds.truth);
}

namespace {

json deformation_to_json(const Deformation& d) {
  json j;
  j["kind"] = Deformation::kind_name(d.kind);
  if (d.kind == Deformation::Kind::translation) {
    j["dx"] = d.dx;
    j["dy"] = d.dy;
  } else if (d.kind == Deformation::Kind::permutation) {
    j["perm"] = d.perm;
  }
  return j;
}

Deformation deformation_from_json(const json& j) {
  Deformation d;
  d.kind = Deformation::kind_from_name(j.at("kind").get<std::string>());
  if (d.kind == Deformation::Kind::translation) {
    d.dx = j.at("dx").get<long>();
    d.dy = j.at("dy").get<long>();
  } else if (d.kind == Deformation::Kind::permutation) {
    d.perm = j.at("perm").get<std::vector<std::uint32_t>>();
  }
  return d;
}

}  // namespace

void save_ground_truth(const std::string& path, const SynthGroundTruth& truth) {
  json j;
  j["reference_id"] = truth.reference_id;
  j["images"] = json::array();
  for (const ImageTruth& im : truth.images) {
    json ji;
    ji["image_id"] = im.image_id;
    ji["deformation"] = deformation_to_json(im.deformation);
    ji["keypoints"] = json::array();
    for (const TruthKeypoint& kp : im.keypoints)
      ji["keypoints"].push_back({{"category", kp.category},
                                 {"x_f", kp.cell.x},
                                 {"y_f", kp.cell.y},
                                 {"x", kp.x},
                                 {"y", kp.y}});
    j["images"].push_back(std::move(ji));
  }
  atomic_write_file(path, j.dump(2) + "\n");
}

SynthGroundTruth load_ground_truth(const std::string& path) {
  json j = json::parse(read_file_bytes(path), nullptr, false);
  if (j.is_discarded()) throw FormatError(path + ": invalid JSON");
  SynthGroundTruth truth;
  try {
    truth.reference_id = j.at("reference_id").get<std::string>();
    for (const json& ji : j.at("images")) {
      ImageTruth im;
      im.image_id = ji.at("image_id").get<std::string>();
      im.deformation = deformation_from_json(ji.at("deformation"));
      for (const json& jk : ji.at("keypoints")) {
        TruthKeypoint kp;
        kp.category = jk.at("category").get<std::size_t>();
        kp.cell.x = jk.at("x_f").get<std::size_t>();
        kp.cell.y = jk.at("y_f").get<std::size_t>();
        kp.x = jk.at("x").get<long>();
        kp.y = jk.at("y").get<long>();
        im.keypoints.push_back(kp);
      }
      truth.images.push_back(std::move(im));
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return truth;
}

bool verify_ground_truth(const SynthGroundTruth& truth, const KeypointSet& reference,
                         const DatasetIndex& index, std::size_t grid_width,
                         std::size_t grid_height) {
  const ImageRecord* ref = index.find(truth.reference_id);
  if (!ref) return false;
  std::vector<Cell> ref_cells;
  for (const Keypoint& kp : reference.keypoints)
    ref_cells.push_back(pixel_to_cell(kp.x, kp.y, ref->image_width, ref->image_height, grid_width,
                                      grid_height));
  for (const ImageTruth& im : truth.images) {
    if (im.keypoints.size() != ref_cells.size()) return false;
    const ImageRecord* rec = index.find(im.image_id);
    if (!rec) return false;
    for (std::size_t k = 0; k < ref_cells.size(); ++k) {
      const Cell expected = im.deformation.apply(ref_cells[k], grid_width, grid_height);
      if (!(expected == im.keypoints[k].cell)) return false;
      auto [px, py] =
          cell_to_pixel(expected, rec->image_width, rec->image_height, grid_width, grid_height);
      if (px != im.keypoints[k].x || py != im.keypoints[k].y) return false;
    }
  }
  return true;
}

}  // namespace kpr
