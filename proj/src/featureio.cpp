#include "kpreid/featureio.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kpr {

namespace {

// Little-endian buffer reader that reports the byte offset of any failure.
class BinaryReader {
 public:
  BinaryReader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  std::uint8_t u8() { return raw<std::uint8_t>(); }
  std::uint16_t u16() { return raw<std::uint16_t>(); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  float f32() { return raw<float>(); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_magic(const char* magic) {
    std::string got = str(std::strlen(magic));
    if (got != magic)
      throw FormatError(path_ + ": bad magic \"" + got + "\" at byte offset 0, expected \"" +
                        magic + "\"");
  }

  void expect_end() {
    if (pos_ != bytes_.size())
      throw FormatError(path_ + ": " + std::to_string(bytes_.size() - pos_) +
                        " trailing bytes at byte offset " + std::to_string(pos_));
  }

  std::size_t offset() const { return pos_; }

 private:
  template <class T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void need(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw FormatError(path_ + ": truncated at byte offset " + std::to_string(pos_) + " (need " +
                        std::to_string(n) + " more bytes)");
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

class BinaryWriter {
 public:
  void u8(std::uint8_t v) { raw(v); }
  void u16(std::uint16_t v) { raw(v); }
  void u32(std::uint32_t v) { raw(v); }
  void u64(std::uint64_t v) { raw(v); }
  void f32(float v) { raw(v); }
  void str(const std::string& s) { bytes_.append(s); }
  std::string take() { return std::move(bytes_); }

 private:
  template <class T>
  void raw(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes_.append(buf, sizeof(T));
  }
  std::string bytes_;
};

json parse_json_file(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  json j = json::parse(bytes, nullptr, false);
  if (j.is_discarded()) throw FormatError(path + ": invalid JSON");
  return j;
}

}  // namespace

void FeatureMap::validate() const {
  if (channels == 0 || height == 0 || width == 0)
    throw ValidationError("feature map dimensions must be positive");
  if (values.size() != channels * height * width)
    throw ValidationError("feature map shape metadata does not match value count");
  for (float v : values)
    if (!std::isfinite(v)) throw ValidationError("feature map contains non-finite values");
}

std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ValidationError("unknown split \"" + name + "\"");
}

const ImageRecord* DatasetIndex::find(const std::string& image_id) const {
  for (const ImageRecord& rec : images)
    if (rec.image_id == image_id) return &rec;
  return nullptr;
}

std::vector<const ImageRecord*> DatasetIndex::split_images(Split s) const {
  std::vector<const ImageRecord*> out;
  for (const ImageRecord& rec : images)
    if (rec.split == s) out.push_back(&rec);
  return out;
}

void DatasetIndex::validate() const {
  if (images.empty()) throw ValidationError("empty dataset");
  if (patch_size == 0) throw ValidationError("patch_size must be positive");
  std::set<std::string> ids;
  std::map<std::string, Split> identity_split;
  for (const ImageRecord& rec : images) {
    if (!ids.insert(rec.image_id).second)
      throw ValidationError("duplicate image_id \"" + rec.image_id + "\"");
    auto [it, inserted] = identity_split.emplace(rec.identity, rec.split);
    if (!inserted && it->second != rec.split)
      throw ValidationError("split contamination: identity \"" + rec.identity +
                            "\" appears in both train and test");
    if (rec.image_width == 0 || rec.image_height == 0)
      throw ValidationError("image \"" + rec.image_id + "\" has zero dimensions");
    if (rec.image_width % patch_size != 0 || rec.image_height % patch_size != 0)
      throw ValidationError("image \"" + rec.image_id + "\" dimensions are not multiples of patch_size " +
                            std::to_string(patch_size));
  }
}

FeatureMap read_feature_map(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  BinaryReader r(bytes, path);
  r.expect_magic("FMAP");
  std::uint32_t version = r.u32();
  if (version != 1)
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  FeatureMap map;
  map.channels = r.u32();
  map.height = r.u32();
  map.width = r.u32();
  if (map.channels == 0 || map.height == 0 || map.width == 0)
    throw FormatError(path + ": zero extent in header at byte offset 8");
  map.values.resize(map.channels * map.height * map.width);
  for (float& v : map.values) v = r.f32();
  r.expect_end();
  return map;
}

void write_feature_map(const std::string& path, const FeatureMap& map) {
  map.validate();
  BinaryWriter w;
  w.str("FMAP");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(map.channels));
  w.u32(static_cast<std::uint32_t>(map.height));
  w.u32(static_cast<std::uint32_t>(map.width));
  for (float v : map.values) w.f32(v);
  atomic_write_file(path, w.take());
}

DatasetIndex load_manifest(const std::string& path) {
  json j = parse_json_file(path);
  DatasetIndex index;
  try {
    index.patch_size = j.at("patch_size").get<std::size_t>();
    index.categories = j.at("categories").get<std::vector<std::string>>();
    for (const json& im : j.at("images")) {
      ImageRecord rec;
      rec.image_id = im.at("image_id").get<std::string>();
      rec.identity = im.at("identity").get<std::string>();
      rec.split = split_from_name(im.at("split").get<std::string>());
      rec.image_width = im.at("image_width").get<std::size_t>();
      rec.image_height = im.at("image_height").get<std::size_t>();
      rec.feature_path = im.at("feature_path").get<std::string>();
      index.images.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  index.validate();
  return index;
}

void save_manifest(const std::string& path, const DatasetIndex& index) {
  index.validate();
  json j;
  j["patch_size"] = index.patch_size;
  j["categories"] = index.categories;
  j["images"] = json::array();
  for (const ImageRecord& rec : index.images) {
    j["images"].push_back({{"image_id", rec.image_id},
                           {"identity", rec.identity},
                           {"split", split_name(rec.split)},
                           {"image_width", rec.image_width},
                           {"image_height", rec.image_height},
                           {"feature_path", rec.feature_path}});
  }
  atomic_write_file(path, j.dump(2) + "\n");
}

KeypointSet load_keypoints(const std::string& path) {
  json j = parse_json_file(path);
  KeypointSet set;
  try {
    set.image_id = j.at("image_id").get<std::string>();
    for (const json& kp : j.at("keypoints")) {
      Keypoint k;
      k.x = kp.at("x").get<long>();
      k.y = kp.at("y").get<long>();
      k.category = kp.at("category").get<std::size_t>();
      set.keypoints.push_back(k);
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return set;
}

void save_keypoints(const std::string& path, const KeypointSet& set) {
  json j;
  j["image_id"] = set.image_id;
  j["keypoints"] = json::array();
  for (const Keypoint& k : set.keypoints)
    j["keypoints"].push_back({{"x", k.x}, {"y", k.y}, {"category", k.category}});
  atomic_write_file(path, j.dump(2) + "\n");
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  BinaryWriter w;
  w.str("CKPT");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t e : tensor.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : tensor.data()) w.f32(static_cast<float>(v));
  }
  w.u64(ckpt.step);
  w.u64(ckpt.rng_state);
  atomic_write_file(path, w.take());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  BinaryReader r(bytes, path);
  r.expect_magic("CKPT");
  std::uint32_t version = r.u32();
  if (version != 1)
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  Checkpoint ckpt;
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = r.u16();
    std::string name = r.str(name_len);
    std::uint8_t rank = r.u8();
    std::vector<std::size_t> shape;
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      std::uint32_t e = r.u32();
      if (e == 0) throw FormatError(path + ": zero extent at byte offset " + std::to_string(r.offset() - 4));
      shape.push_back(e);
      n *= e;
    }
    std::vector<double> data(n);
    for (double& v : data) v = static_cast<double>(r.f32());
    ckpt.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data),
                                                                 DType::f32));
  }
  ckpt.step = r.u64();
  ckpt.rng_state = r.u64();
  r.expect_end();
  return ckpt;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
  fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open \"" + tmp.string() + "\" for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to \"" + tmp.string() + "\"");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("rename \"" + tmp.string() + "\" -> \"" + path + "\": " + ec.message());
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open \"" + path + "\"");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace kpr
