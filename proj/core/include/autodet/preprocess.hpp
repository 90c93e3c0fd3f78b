#pragma once

#include "autodet/dataset.hpp"

#include <opencv2/core.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace autodet {

using PHash = std::uint64_t;

/// 64-bit perceptual hash.
///
/// grayscale -> 32x32 area resize -> 2D DCT-II -> the 8x8 block of
/// coefficients at rows/cols 1..8 (the DC row and column are skipped) ->
/// bit set iff coefficient > median of the 64. Bits are row-major, the first
/// coefficient in the most significant bit.
///
/// Throws ParseError on an empty image.
PHash phash(const cv::Mat& image);
PHash phash_file(const std::filesystem::path& path);

int hamming(PHash a, PHash b);

enum class DupKind { exact, near };

struct DupCluster {
  std::string representative;
  std::vector<std::string> members;  // includes the representative
  DupKind kind = DupKind::exact;
};

struct HashedImage {
  ImageRecord record;
  PHash hash = 0;
};

struct DedupResult {
  std::vector<ImageRecord> retained;
  std::vector<DupCluster> clusters;  // only clusters with two or more members
};

/// Leader clustering in image-id order. Images within `exact_thresh` of an
/// exact-cluster representative are discarded. Retained images within
/// `near_thresh` of a near-cluster representative are kept but grouped.
DedupResult dedup(std::span<const HashedImage> images, int exact_thresh = 0, int near_thresh = 10);

/// Hashes each image's file (resolved against `root`) in parallel.
std::vector<HashedImage> hash_images(std::span<const ImageRecord> images, const std::filesystem::path& root,
                                     unsigned threads = 0);

enum class Split { train, val, test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct SplitFractions {
  double train = 0.64;
  double val = 0.16;
  double test = 0.20;

  /// Throws ValidationError unless all are non-negative, test > 0 and they sum to 1.
  void validate() const;
};

struct SplitManifest {
  std::map<std::string, Split> assignments;
  std::uint64_t seed = 0;
  SplitFractions fractions;

  std::vector<std::string> ids(Split which) const;

  nlohmann::json to_json() const;
  static SplitManifest from_json(const nlohmann::json& j);
};

/// Stratified split on each image's primary class. Near-duplicate cluster
/// members are pinned to train; test and val are drawn from the rest with
/// counts round(fraction * class size), test at least one.
///
/// Throws ValidationError when fractions do not sum to 1 or a class cannot
/// supply a test image.
SplitManifest stratified_split(std::span<const ImageRecord> images, std::span<const DupCluster> clusters,
                               SplitFractions fractions, std::uint64_t seed);

}  // namespace autodet
