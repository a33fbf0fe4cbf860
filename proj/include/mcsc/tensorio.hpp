#pragma once

// TensorFile container and dataset manifest I/O.
//
// TensorFile layout (all integers little-endian):
//   bytes 0..3   magic "MCST"
//   byte  4      version (1)
//   byte  5      dtype code: 0 = float32, 1 = uint8, 2 = int64
//   byte  6      ndim (>= 1)
//   then ndim x uint32 dims, then the row-major payload.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcsc::tensorio {

enum class DType : std::uint8_t { Float32 = 0, UInt8 = 1, Int64 = 2 };

std::size_t dtype_size(DType dtype);
torch::ScalarType to_scalar_type(DType dtype);

inline constexpr std::array<char, 4> kMagic{'M', 'C', 'S', 'T'};
inline constexpr std::uint8_t kVersion = 1;

class TensorFileError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, BadHeader, Io, Overflow, NonFinite };

  TensorFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Writes `array` converted to `dtype`. Values that do not fit the target dtype
// (fractional or out-of-range integers, non-finite floats) raise instead of
// being truncated.
void write_tensor(const std::filesystem::path& path, const torch::Tensor& array, DType dtype);

// Encodes to the in-memory byte image of a TensorFile.
std::vector<std::uint8_t> encode_tensor(const torch::Tensor& array, DType dtype);
torch::Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

torch::Tensor read_tensor(const std::filesystem::path& path);

enum class Split { LabeledTrain, UnlabeledTrain, Val, Test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct SliceEntry {
  int slice_index = 0;
  std::string image;
  std::optional<std::string> label;
};

struct CaseEntry {
  std::string case_id;
  std::vector<SliceEntry> slices;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetManifest {
  std::vector<CaseEntry> cases;
  std::map<std::string, Split> splits;
  int num_classes = 0;
  int height = 0;
  int width = 0;
  // Directory that relative image/label paths resolve against.
  std::filesystem::path root;

  std::vector<const CaseEntry*> cases_in(Split split) const;
  const CaseEntry& find_case(const std::string& case_id) const;
  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

// Checks every manifest invariant; throws ManifestError on the first violation.
void validate_manifest(const DatasetManifest& manifest);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace mcsc::tensorio
