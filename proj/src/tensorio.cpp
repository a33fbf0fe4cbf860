#include "mcsc/tensorio.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace mcsc::tensorio {

namespace fs = std::filesystem;
using Kind = TensorFileError::Kind;

namespace {

constexpr std::size_t kFixedHeader = 7;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* src) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

// Checks that `array` survives conversion to `dtype` without loss.
void check_representable(const torch::Tensor& array, DType dtype) {
  if (array.numel() == 0) return;
  if (array.is_floating_point()) {
    auto as_double = array.to(torch::kFloat64);
    if (!torch::isfinite(as_double).all().item<bool>()) {
      throw TensorFileError(Kind::NonFinite, "tensor contains non-finite values");
    }
    if (dtype == DType::Float32) return;
    if (!(as_double == as_double.round()).all().item<bool>()) {
      throw TensorFileError(Kind::Overflow, "fractional value cannot be stored as an integer dtype");
    }
    const double lo = dtype == DType::UInt8 ? 0.0 : -9.2233720368547758e18;
    const double hi = dtype == DType::UInt8 ? 255.0 : 9.2233720368547748e18;
    if ((as_double < lo).any().item<bool>() || (as_double > hi).any().item<bool>()) {
      throw TensorFileError(Kind::Overflow, "value outside range of target dtype");
    }
    return;
  }
  if (array.scalar_type() == torch::kBool) return;
  if (dtype == DType::UInt8) {
    auto as_long = array.to(torch::kInt64);
    if ((as_long < 0).any().item<bool>() || (as_long > 255).any().item<bool>()) {
      throw TensorFileError(Kind::Overflow, "integer value outside uint8 range");
    }
  } else if (dtype == DType::Float32) {
    // int64 -> float32 is exact only up to 2^24.
    auto as_long = array.to(torch::kInt64).abs();
    if ((as_long > (std::int64_t{1} << 24)).any().item<bool>()) {
      throw TensorFileError(Kind::Overflow, "integer value not exactly representable as float32");
    }
  }
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::Float32: return 4;
    case DType::UInt8: return 1;
    case DType::Int64: return 8;
  }
  throw TensorFileError(Kind::BadHeader, "unknown dtype");
}

torch::ScalarType to_scalar_type(DType dtype) {
  switch (dtype) {
    case DType::Float32: return torch::kFloat32;
    case DType::UInt8: return torch::kUInt8;
    case DType::Int64: return torch::kInt64;
  }
  throw TensorFileError(Kind::BadHeader, "unknown dtype");
}

std::vector<std::uint8_t> encode_tensor(const torch::Tensor& array, DType dtype) {
  if (array.dim() < 1) throw TensorFileError(Kind::BadHeader, "TensorFile requires ndim >= 1");
  if (array.dim() > 255) throw TensorFileError(Kind::BadHeader, "too many dimensions");
  check_representable(array, dtype);

  auto data = array.detach().to(torch::kCPU).to(to_scalar_type(dtype)).contiguous();
  std::vector<std::uint8_t> out;
  out.reserve(kFixedHeader + 4 * static_cast<std::size_t>(array.dim()) + data.numel() * dtype_size(dtype));
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(array.dim()));
  for (auto d : data.sizes()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw TensorFileError(Kind::BadHeader, "dimension exceeds uint32");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  const auto n = static_cast<std::size_t>(data.numel());
  switch (dtype) {
    case DType::Float32: {
      const float* p = data.data_ptr<float>();
      for (std::size_t i = 0; i < n; ++i) put_le<float>(out, p[i]);
      break;
    }
    case DType::UInt8: {
      const std::uint8_t* p = data.data_ptr<std::uint8_t>();
      out.insert(out.end(), p, p + n);
      break;
    }
    case DType::Int64: {
      const std::int64_t* p = data.data_ptr<std::int64_t>();
      for (std::size_t i = 0; i < n; ++i) put_le<std::int64_t>(out, p[i]);
      break;
    }
  }
  return out;
}

torch::Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
    throw TensorFileError(Kind::BadMagic, "bad magic, not a TensorFile");
  }
  if (bytes.size() < kFixedHeader) throw TensorFileError(Kind::Truncated, "truncated header");
  if (bytes[4] != kVersion) {
    throw TensorFileError(Kind::VersionMismatch,
                          "unsupported TensorFile version " + std::to_string(bytes[4]));
  }
  if (bytes[5] > 2) throw TensorFileError(Kind::BadHeader, "unknown dtype code " + std::to_string(bytes[5]));
  const auto dtype = static_cast<DType>(bytes[5]);
  const int ndim = bytes[6];
  if (ndim < 1) throw TensorFileError(Kind::BadHeader, "ndim must be >= 1");
  if (bytes.size() < kFixedHeader + 4 * static_cast<std::size_t>(ndim)) {
    throw TensorFileError(Kind::Truncated, "truncated dims");
  }
  std::vector<std::int64_t> dims(ndim);
  std::size_t count = 1;
  for (int i = 0; i < ndim; ++i) {
    dims[i] = get_le<std::uint32_t>(bytes.data() + kFixedHeader + 4 * i);
    count *= static_cast<std::size_t>(dims[i]);
  }
  const std::size_t offset = kFixedHeader + 4 * static_cast<std::size_t>(ndim);
  const std::size_t payload = count * dtype_size(dtype);
  if (bytes.size() < offset + payload) {
    throw TensorFileError(Kind::Truncated, "payload truncated: expected " + std::to_string(payload) +
                                               " bytes, found " + std::to_string(bytes.size() - offset));
  }
  if (bytes.size() > offset + payload) throw TensorFileError(Kind::BadHeader, "trailing bytes after payload");

  auto out = torch::empty(dims, torch::TensorOptions().dtype(to_scalar_type(dtype)));
  const std::uint8_t* src = bytes.data() + offset;
  switch (dtype) {
    case DType::Float32: {
      float* p = out.data_ptr<float>();
      for (std::size_t i = 0; i < count; ++i) p[i] = get_le<float>(src + 4 * i);
      break;
    }
    case DType::UInt8:
      if (count > 0) std::memcpy(out.data_ptr<std::uint8_t>(), src, count);
      break;
    case DType::Int64: {
      std::int64_t* p = out.data_ptr<std::int64_t>();
      for (std::size_t i = 0; i < count; ++i) p[i] = get_le<std::int64_t>(src + 8 * i);
      break;
    }
  }
  return out;
}

void write_tensor(const fs::path& path, const torch::Tensor& array, DType dtype) {
  const auto bytes = encode_tensor(array, dtype);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFileError(Kind::Io, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFileError(Kind::Io, "write failed: " + path.string());
}

torch::Tensor read_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFileError(Kind::Io, "cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

// ---------------------------------------------------------------------------
// Manifest

std::string to_string(Split split) {
  switch (split) {
    case Split::LabeledTrain: return "labeled_train";
    case Split::UnlabeledTrain: return "unlabeled_train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "labeled_train") return Split::LabeledTrain;
  if (name == "unlabeled_train") return Split::UnlabeledTrain;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ManifestError("unknown split name: " + name);
}

std::vector<const CaseEntry*> DatasetManifest::cases_in(Split split) const {
  std::vector<const CaseEntry*> out;
  for (const auto& c : cases) {
    auto it = splits.find(c.case_id);
    if (it != splits.end() && it->second == split) out.push_back(&c);
  }
  return out;
}

const CaseEntry& DatasetManifest::find_case(const std::string& case_id) const {
  for (const auto& c : cases) {
    if (c.case_id == case_id) return c;
  }
  throw ManifestError("no such case: " + case_id);
}

void validate_manifest(const DatasetManifest& m) {
  if (m.num_classes < 2) throw ManifestError("num_classes must be >= 2");
  if (m.height <= 0 || m.width <= 0) throw ManifestError("image_size must be positive");

  std::set<std::string> ids;
  for (const auto& c : m.cases) {
    if (!ids.insert(c.case_id).second) throw ManifestError("duplicate case id: " + c.case_id);
  }
  for (const auto& [id, split] : m.splits) {
    if (!ids.count(id)) throw ManifestError("split refers to unknown case: " + id);
  }
  for (const auto& c : m.cases) {
    auto it = m.splits.find(c.case_id);
    if (it == m.splits.end()) throw ManifestError("case not assigned to any split: " + c.case_id);
    const bool needs_label = it->second != Split::UnlabeledTrain;
    for (const auto& s : c.slices) {
      if (!fs::exists(m.resolve(s.image))) {
        throw ManifestError("missing image file: " + s.image + " (case " + c.case_id + ")");
      }
      if (s.label) {
        if (!fs::exists(m.resolve(*s.label))) {
          throw ManifestError("missing label file: " + *s.label + " (case " + c.case_id + ")");
        }
      } else if (needs_label) {
        throw ManifestError("slice " + std::to_string(s.slice_index) + " of " + to_string(it->second) +
                            " case " + c.case_id + " has no label");
      }
    }
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ManifestError(std::string("manifest is not valid JSON: ") + e.what());
  }

  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.num_classes = j.at("num_classes").get<int>();
    const auto size = j.at("image_size");
    m.height = size.at(0).get<int>();
    m.width = size.at(1).get<int>();
    for (const auto& jc : j.at("cases")) {
      CaseEntry c;
      c.case_id = jc.at("case_id").get<std::string>();
      for (const auto& js : jc.at("slices")) {
        SliceEntry s;
        s.slice_index = js.at("slice_index").get<int>();
        s.image = js.at("image").get<std::string>();
        if (js.contains("label") && !js.at("label").is_null()) s.label = js.at("label").get<std::string>();
        c.slices.push_back(std::move(s));
      }
      m.cases.push_back(std::move(c));
    }
    for (const auto& [name, ids] : j.at("splits").items()) {
      const Split split = split_from_string(name);
      for (const auto& id : ids) {
        const auto case_id = id.get<std::string>();
        auto [it, inserted] = m.splits.emplace(case_id, split);
        if (!inserted) {
          throw ManifestError("case " + case_id + " appears in overlapping splits " + to_string(it->second) +
                              " and " + name);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
  validate_manifest(m);
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  nlohmann::ordered_json j;
  j["num_classes"] = m.num_classes;
  j["image_size"] = {m.height, m.width};
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : m.cases) {
    nlohmann::ordered_json jc;
    jc["case_id"] = c.case_id;
    jc["slices"] = nlohmann::ordered_json::array();
    for (const auto& s : c.slices) {
      nlohmann::ordered_json js;
      js["slice_index"] = s.slice_index;
      js["image"] = s.image;
      js["label"] = s.label ? nlohmann::ordered_json(*s.label) : nlohmann::ordered_json(nullptr);
      jc["slices"].push_back(js);
    }
    j["cases"].push_back(jc);
  }
  nlohmann::ordered_json splits;
  for (Split s : {Split::LabeledTrain, Split::UnlabeledTrain, Split::Val, Split::Test}) {
    auto ids = nlohmann::ordered_json::array();
    for (const auto* c : m.cases_in(s)) ids.push_back(c->case_id);
    splits[to_string(s)] = ids;
  }
  j["splits"] = splits;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ManifestError("cannot write manifest: " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace mcsc::tensorio
