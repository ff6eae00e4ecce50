#include "kpreid/model.hpp"

#include <cmath>

#include "json.hpp"

using nlohmann::json;

namespace kpr {

std::string mode_name(KeypointMode m) {
  switch (m) {
    case KeypointMode::none: return "none";
    case KeypointMode::kpe: return "kpe";
    case KeypointMode::ckpe: return "ckpe";
  }
  throw ContractError("unknown keypoint mode");
}

KeypointMode mode_from_name(const std::string& name) {
  if (name == "none") return KeypointMode::none;
  if (name == "kpe") return KeypointMode::kpe;
  if (name == "ckpe") return KeypointMode::ckpe;
  throw ValidationError("unknown keypoint mode \"" + name + "\"");
}

std::size_t ViTConfig::patch_dim() const {
  const PatchGrid g = grid();
  return channels * (feature_height / g.rows) * (feature_width / g.cols);
}

void ViTConfig::validate() const {
  grid();  // validates image/patch divisibility
  if (embed_dim == 0 || depth == 0 || heads == 0)
    throw ValidationError("embed_dim, depth and heads must be positive");
  if (embed_dim % heads != 0)
    throw ValidationError("embed_dim " + std::to_string(embed_dim) +
                          " is not divisible by heads " + std::to_string(heads));
  if (mlp_ratio <= 0.0) throw ValidationError("mlp_ratio must be positive");
  if (channels == 0) throw ValidationError("channels must be positive");
  const PatchGrid g = grid();
  if (feature_height % g.rows != 0 || feature_width % g.cols != 0)
    throw ValidationError("feature grid " + std::to_string(feature_width) + "x" +
                          std::to_string(feature_height) + " does not divide into the " +
                          std::to_string(g.cols) + "x" + std::to_string(g.rows) + " patch grid");
  if (mode == KeypointMode::ckpe && n_categories == 0)
    throw ValidationError("mode ckpe requires n_categories >= 1");
}

std::string ViTConfig::to_json() const {
  json j;
  j["patch_size"] = patch_size;
  j["embed_dim"] = embed_dim;
  j["depth"] = depth;
  j["heads"] = heads;
  j["mlp_ratio"] = mlp_ratio;
  j["image_width"] = image_width;
  j["image_height"] = image_height;
  j["feature_height"] = feature_height;
  j["feature_width"] = feature_width;
  j["channels"] = channels;
  j["n_categories"] = n_categories;
  j["mode"] = mode_name(mode);
  return j.dump(2);
}

ViTConfig ViTConfig::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid ViT config JSON");
  ViTConfig cfg;
  try {
    cfg.patch_size = j.value("patch_size", cfg.patch_size);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.depth = j.value("depth", cfg.depth);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
    cfg.image_width = j.value("image_width", cfg.image_width);
    cfg.image_height = j.value("image_height", cfg.image_height);
    cfg.feature_height = j.value("feature_height", cfg.feature_height);
    cfg.feature_width = j.value("feature_width", cfg.feature_width);
    cfg.channels = j.value("channels", cfg.channels);
    cfg.n_categories = j.value("n_categories", cfg.n_categories);
    if (j.contains("mode")) cfg.mode = mode_from_name(j.at("mode").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("ViT config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

Tensor trunc_normal(std::vector<std::size_t> shape, Rng& rng, DType dt, double stddev = 0.02) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.truncated_normal(stddev);
  return Tensor::from_data(std::move(shape), std::move(v), dt, true);
}

Tensor zeros_param(std::vector<std::size_t> shape, DType dt) {
  return Tensor::zeros(std::move(shape), dt, true);
}

Tensor ones_param(std::vector<std::size_t> shape, DType dt) {
  return Tensor::full(std::move(shape), 1.0, dt, true);
}

}  // namespace

ModelParams ModelParams::init(const ViTConfig& cfg, std::size_t n_classes, Rng& rng, DType dt) {
  cfg.validate();
  if (n_classes == 0) throw ValidationError("model needs at least one identity class");
  ModelParams p;
  p.config = cfg;
  p.n_classes = n_classes;
  const std::size_t d = cfg.embed_dim;
  const std::size_t tokens = cfg.patch_count() + 1;
  p.patch_proj = trunc_normal({cfg.patch_dim(), d}, rng, dt);
  p.patch_bias = zeros_param({d}, dt);
  p.cls_token = trunc_normal({d}, rng, dt);
  p.pos_table = trunc_normal({tokens, d}, rng, dt);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    BlockParams blk;
    blk.ln1_gain = ones_param({d}, dt);
    blk.ln1_bias = zeros_param({d}, dt);
    blk.wq = trunc_normal({d, d}, rng, dt);
    blk.bq = zeros_param({d}, dt);
    blk.wk = trunc_normal({d, d}, rng, dt);
    blk.bk = zeros_param({d}, dt);
    blk.wv = trunc_normal({d, d}, rng, dt);
    blk.bv = zeros_param({d}, dt);
    blk.wo = trunc_normal({d, d}, rng, dt);
    blk.bo = zeros_param({d}, dt);
    blk.ln2_gain = ones_param({d}, dt);
    blk.ln2_bias = zeros_param({d}, dt);
    blk.w1 = trunc_normal({d, cfg.mlp_dim()}, rng, dt);
    blk.b1 = zeros_param({cfg.mlp_dim()}, dt);
    blk.w2 = trunc_normal({cfg.mlp_dim(), d}, rng, dt);
    blk.b2 = zeros_param({d}, dt);
    p.blocks.push_back(std::move(blk));
  }
  p.ln_f_gain = ones_param({d}, dt);
  p.ln_f_bias = zeros_param({d}, dt);
  p.arc_weights = trunc_normal({n_classes, d}, rng, dt);
  // zero init: an empty keypoint set reproduces mode none exactly, and
  // matched seeds share every mode-independent parameter
  if (cfg.mode == KeypointMode::kpe) p.w_kp = zeros_param({tokens, d}, dt);
  if (cfg.mode == KeypointMode::ckpe) p.w_ckp = zeros_param({cfg.n_categories, d}, dt);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_proj", patch_proj);
  out.emplace_back("patch_bias", patch_bias);
  out.emplace_back("cls_token", cls_token);
  out.emplace_back("pos_table", pos_table);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    BlockParams& blk = blocks[b];
    out.emplace_back(prefix + "ln1_gain", blk.ln1_gain);
    out.emplace_back(prefix + "ln1_bias", blk.ln1_bias);
    out.emplace_back(prefix + "wq", blk.wq);
    out.emplace_back(prefix + "bq", blk.bq);
    out.emplace_back(prefix + "wk", blk.wk);
    out.emplace_back(prefix + "bk", blk.bk);
    out.emplace_back(prefix + "wv", blk.wv);
    out.emplace_back(prefix + "bv", blk.bv);
    out.emplace_back(prefix + "wo", blk.wo);
    out.emplace_back(prefix + "bo", blk.bo);
    out.emplace_back(prefix + "ln2_gain", blk.ln2_gain);
    out.emplace_back(prefix + "ln2_bias", blk.ln2_bias);
    out.emplace_back(prefix + "w1", blk.w1);
    out.emplace_back(prefix + "b1", blk.b1);
    out.emplace_back(prefix + "w2", blk.w2);
    out.emplace_back(prefix + "b2", blk.b2);
  }
  out.emplace_back("ln_f_gain", ln_f_gain);
  out.emplace_back("ln_f_bias", ln_f_bias);
  if (config.mode == KeypointMode::kpe) out.emplace_back("w_kp", w_kp);
  if (config.mode == KeypointMode::ckpe) out.emplace_back("w_ckp", w_ckp);
  out.emplace_back("arc_weights", arc_weights);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_params() const {
  return const_cast<ModelParams*>(this)->named_params();
}

Tensor patchify(const FeatureMap& input, const ViTConfig& cfg, DType dt) {
  if (input.channels != cfg.channels || input.height != cfg.feature_height ||
      input.width != cfg.feature_width)
    throw DimensionError("patchify: input " + std::to_string(input.channels) + "x" +
                         std::to_string(input.height) + "x" + std::to_string(input.width) +
                         " does not match config " + std::to_string(cfg.channels) + "x" +
                         std::to_string(cfg.feature_height) + "x" +
                         std::to_string(cfg.feature_width));
  const PatchGrid g = cfg.grid();
  const std::size_t ph = cfg.feature_height / g.rows;
  const std::size_t pw = cfg.feature_width / g.cols;
  const std::size_t dim = cfg.patch_dim();
  std::vector<double> v(g.patch_count() * dim);
  std::size_t out = 0;
  for (std::size_t pr = 0; pr < g.rows; ++pr)
    for (std::size_t pc = 0; pc < g.cols; ++pc)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x)
            v[out++] = static_cast<double>(input.at(c, pr * ph + y, pc * pw + x));
  return Tensor::from_data({g.patch_count(), dim}, std::move(v), dt);
}

FeatureMap unpatchify(const Tensor& patches, const ViTConfig& cfg) {
  const PatchGrid g = cfg.grid();
  if (patches.rank() != 2 || patches.rows() != g.patch_count() || patches.cols() != cfg.patch_dim())
    throw DimensionError("unpatchify: got " + shape_str(patches.shape()));
  const std::size_t ph = cfg.feature_height / g.rows;
  const std::size_t pw = cfg.feature_width / g.cols;
  FeatureMap map;
  map.channels = cfg.channels;
  map.height = cfg.feature_height;
  map.width = cfg.feature_width;
  map.values.assign(map.channels * map.height * map.width, 0.0f);
  std::size_t in = 0;
  for (std::size_t pr = 0; pr < g.rows; ++pr)
    for (std::size_t pc = 0; pc < g.cols; ++pc)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x)
            map.at(c, pr * ph + y, pc * pw + x) = static_cast<float>(patches.data()[in++]);
  return map;
}

Tensor forward(Tape& tape, const ModelParams& params, const FeatureMap& input,
               const KeypointSet* keypoints) {
  const ViTConfig& cfg = params.config;
  if (cfg.mode != KeypointMode::none && keypoints == nullptr)
    throw ContractError("forward: mode " + mode_name(cfg.mode) + " requires keypoints");
  const std::size_t d = cfg.embed_dim;
  const PatchGrid grid = cfg.grid();

  Tensor patches = patchify(input, cfg, params.patch_proj.dtype());
  Tensor x = tape.add_bias(tape.matmul(patches, params.patch_proj), params.patch_bias);
  Tensor tokens = tape.concat_rows({tape.reshape(params.cls_token, {1, d}), x});
  tokens = tape.add(tokens, params.pos_table);

  if (cfg.mode == KeypointMode::kpe) {
    tokens = tape.add(tokens, kpe_embedding(tape, build_mask(*keypoints, grid), params.w_kp));
  } else if (cfg.mode == KeypointMode::ckpe) {
    tokens = tape.add(tokens, ckpe_embedding(tape, build_categorical_mask(*keypoints, grid,
                                                                          cfg.n_categories),
                                             params.w_ckp));
  }

  const std::size_t dh = d / cfg.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const BlockParams& blk : params.blocks) {
    Tensor h = tape.layer_norm(tokens, blk.ln1_gain, blk.ln1_bias, 1e-5);
    Tensor q = tape.add_bias(tape.matmul(h, blk.wq), blk.bq);
    Tensor k = tape.add_bias(tape.matmul(h, blk.wk), blk.bk);
    Tensor v = tape.add_bias(tape.matmul(h, blk.wv), blk.bv);
    std::vector<Tensor> head_outputs;
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      Tensor qh = tape.slice_cols(q, head * dh, (head + 1) * dh);
      Tensor kh = tape.slice_cols(k, head * dh, (head + 1) * dh);
      Tensor vh = tape.slice_cols(v, head * dh, (head + 1) * dh);
      Tensor att = tape.softmax(tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale));
      head_outputs.push_back(tape.matmul(att, vh));
    }
    Tensor attn = tape.add_bias(tape.matmul(tape.concat_cols(head_outputs), blk.wo), blk.bo);
    tokens = tape.add(tokens, attn);

    Tensor h2 = tape.layer_norm(tokens, blk.ln2_gain, blk.ln2_bias, 1e-5);
    Tensor mlp = tape.add_bias(
        tape.matmul(tape.gelu(tape.add_bias(tape.matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2);
    tokens = tape.add(tokens, mlp);
  }

  Tensor final = tape.layer_norm(tokens, params.ln_f_gain, params.ln_f_bias, 1e-5);
  return tape.reshape(tape.slice_rows(final, 0, 1), {d});
}

Tensor forward_batch(Tape& tape, const ModelParams& params,
                     const std::vector<const FeatureMap*>& inputs,
                     const std::vector<const KeypointSet*>& keypoints) {
  if (inputs.empty()) throw ContractError("forward_batch: empty batch");
  if (keypoints.size() != inputs.size())
    throw DimensionError("forward_batch: " + std::to_string(inputs.size()) + " inputs but " +
                         std::to_string(keypoints.size()) + " keypoint sets");
  for (const FeatureMap* f : inputs)
    if (f->channels != inputs[0]->channels || f->height != inputs[0]->height ||
        f->width != inputs[0]->width)
      throw DimensionError("forward_batch: ragged batch shapes");
  std::vector<Tensor> rows;
  rows.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    rows.push_back(
        tape.reshape(forward(tape, params, *inputs[i], keypoints[i]), {1, params.config.embed_dim}));
  return tape.concat_rows(rows);
}

Checkpoint params_to_checkpoint(const ModelParams& params) {
  Checkpoint ckpt;
  for (const auto& [name, tensor] : params.named_params()) ckpt.tensors.emplace_back(name, tensor);
  return ckpt;
}

void params_from_checkpoint(ModelParams& params, const Checkpoint& ckpt) {
  for (auto& [name, tensor] : params.named_params()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw ValidationError("checkpoint incompatible: missing tensor \"" + name + "\"");
    if (src->shape() != tensor.shape())
      throw ValidationError("checkpoint incompatible: tensor \"" + name + "\" has shape " +
                            shape_str(src->shape()) + ", expected " + shape_str(tensor.shape()));
    tensor.data() = src->data();
    tensor.round_to_dtype();
  }
}

}  // namespace kpr
