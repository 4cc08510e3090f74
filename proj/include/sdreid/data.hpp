#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sdreid/rng.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid::data {

enum class View : uint8_t { Aerial = 0, Ground = 1 };
enum class Split : uint8_t { Train = 0, Query = 1, Gallery = 2 };

inline constexpr int kNumViews = 2;

std::string_view view_name(View v);
std::string_view view_token(View v);  // "A" / "G", as written in manifests
std::string_view split_name(Split s);
View other_view(View v);

struct ImageSample {
  Tensor pixels;  // [H, W, 3] in [0, 1]
  int64_t identity = 0;
  View view = View::Ground;
  int64_t camera_id = 0;
  Split split = Split::Train;
  std::string path;  // manifest-relative path, empty for in-memory samples
};

struct SyntheticCorpusSpec {
  int64_t num_identities = 50;
  int64_t images_per_id_per_view = 8;
  int64_t height = 32;
  int64_t width = 32;
  uint64_t seed = 7;
  double view_transform_strength = 1.0;
  /// Identities [0, ceil(n*train_fraction)) go to Train, the rest are split
  /// into Query/Gallery.
  double train_fraction = 0.5;
  /// Patch size the encoder will use; image dims must be multiples of it.
  int64_t patch_size = 8;

  int64_t num_train_identities() const;
};

/// Deterministic procedural corpus. Each identity is a glyph (colored body
/// layout); the aerial view squashes, shears and brightens it.
///
/// Cameras: aerial 0 (query) / 1 (gallery), ground 2 (query) / 3 (gallery).
/// Train identities alternate between the two cameras of each view.
std::vector<ImageSample> generate_corpus(const SyntheticCorpusSpec& spec);

/// SHA-256 over the 8-bit quantized pixels and labels of every sample.
std::string corpus_digest(const std::vector<ImageSample>& samples);

/// Writes one PNG per sample under `root` and `root/manifest.csv`.
/// Updates each sample's `path`. Returns the manifest path.
std::filesystem::path save_corpus(std::vector<ImageSample>& samples, const std::filesystem::path& root);

/// Reads `relative_path,identity,view,camera_id,split` lines (an optional
/// header line starting with "relative_path" is skipped); images are resized
/// bilinearly to (height, width) and scaled to [0, 1].
std::vector<ImageSample> load_folder_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest,
                                             int64_t height, int64_t width);

/// Number of distinct identities among Train samples; throws DataError when
/// they are not the contiguous range [0, n).
int64_t count_train_identities(const std::vector<ImageSample>& samples);

/// PK sampler: every batch holds ids_per_batch distinct identities with
/// exactly instances_per_id samples each (drawn with replacement when an
/// identity owns fewer).
class IdentityBatchSampler {
 public:
  IdentityBatchSampler(const std::vector<ImageSample>& samples, std::vector<size_t> candidates, int64_t ids_per_batch,
                       int64_t instances_per_id);

  /// Indices into the original sample vector.
  std::vector<size_t> next(Rng& rng) const;
  int64_t batch_size() const { return ids_per_batch_ * instances_per_id_; }
  /// Batches per pass over the candidate pool (at least one).
  int64_t batches_per_epoch() const;

 private:
  std::vector<std::vector<size_t>> by_identity_;
  int64_t ids_per_batch_;
  int64_t instances_per_id_;
  size_t pool_size_;
};

/// Indices of samples in the given split.
std::vector<size_t> indices_of(const std::vector<ImageSample>& samples, Split split);

/// Stacks the pixels of the selected samples into [B, H, W, 3].
Tensor stack_pixels(const std::vector<ImageSample>& samples, const std::vector<size_t>& indices);

}  // namespace sdreid::data
