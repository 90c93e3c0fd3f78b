#include "autodet/preprocess.hpp"

#include "autodet/common.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <mutex>
#include <set>
#include <thread>

namespace autodet {

PHash phash(const cv::Mat& image) {
  if (image.empty()) throw ParseError("phash: empty image");

  cv::Mat gray;
  switch (image.channels()) {
    case 1: gray = image; break;
    case 3: cv::cvtColor(image, gray, cv::COLOR_BGR2GRAY); break;
    case 4: cv::cvtColor(image, gray, cv::COLOR_BGRA2GRAY); break;
    default: throw ParseError("phash: unsupported channel count " + std::to_string(image.channels()));
  }

  cv::Mat f64;
  gray.convertTo(f64, CV_64F);
  cv::Mat small;
  cv::resize(f64, small, cv::Size(32, 32), 0, 0, cv::INTER_AREA);
  cv::Mat coeffs;
  cv::dct(small, coeffs);

  std::array<double, 64> block{};
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) block[static_cast<std::size_t>(r * 8 + c)] = coeffs.at<double>(r + 1, c + 1);
  }
  auto sorted = block;
  std::sort(sorted.begin(), sorted.end());
  const double median = (sorted[31] + sorted[32]) / 2.0;

  PHash h = 0;
  for (std::size_t i = 0; i < block.size(); ++i) {
    if (block[i] > median) h |= PHash{1} << (63 - i);
  }
  return h;
}

PHash phash_file(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw ParseError("cannot decode image " + path.string());
  return phash(img);
}

int hamming(PHash a, PHash b) { return std::popcount(a ^ b); }

std::vector<HashedImage> hash_images(std::span<const ImageRecord> images, const std::filesystem::path& root,
                                     unsigned threads) {
  std::vector<HashedImage> out(images.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, images.size())));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        const std::filesystem::path p = images[i].path;
        out[i] = {images[i], phash_file(p.is_absolute() ? p : root / p)};
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
  return out;
}

DedupResult dedup(std::span<const HashedImage> images, int exact_thresh, int near_thresh) {
  if (exact_thresh > near_thresh) throw std::invalid_argument("dedup: exact_thresh must be <= near_thresh");

  std::vector<const HashedImage*> sorted;
  sorted.reserve(images.size());
  for (const auto& im : images) sorted.push_back(&im);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const HashedImage* a, const HashedImage* b) { return a->record.id < b->record.id; });

  struct Group {
    const HashedImage* rep;
    std::vector<std::string> members;
  };
  auto cluster = [](const std::vector<const HashedImage*>& items, int thresh) {
    std::vector<Group> groups;
    for (const auto* im : items) {
      auto it = std::find_if(groups.begin(), groups.end(),
                             [&](const Group& g) { return hamming(g.rep->hash, im->hash) <= thresh; });
      if (it == groups.end()) {
        groups.push_back({im, {im->record.id}});
      } else {
        it->members.push_back(im->record.id);
      }
    }
    return groups;
  };

  DedupResult result;
  std::vector<const HashedImage*> retained;
  for (auto& g : cluster(sorted, exact_thresh)) {
    retained.push_back(g.rep);
    result.retained.push_back(g.rep->record);
    if (g.members.size() > 1) {
      result.clusters.push_back({g.rep->record.id, std::move(g.members), DupKind::exact});
    }
  }
  for (auto& g : cluster(retained, near_thresh)) {
    if (g.members.size() > 1) {
      result.clusters.push_back({g.rep->record.id, std::move(g.members), DupKind::near});
    }
  }
  return result;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ParseError("unknown split \"" + std::string(s) + "\"");
}

std::vector<std::string> SplitManifest::ids(Split which) const {
  std::vector<std::string> out;
  for (const auto& [id, s] : assignments) {
    if (s == which) out.push_back(id);
  }
  return out;
}

nlohmann::json SplitManifest::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["fractions"] = {fractions.train, fractions.val, fractions.test};
  auto& a = j["assignments"] = nlohmann::json::object();
  for (const auto& [id, s] : assignments) a[id] = std::string(to_string(s));
  return j;
}

SplitManifest SplitManifest::from_json(const nlohmann::json& j) {
  SplitManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& f = j.at("fractions");
    if (!f.is_array() || f.size() != 3) throw ParseError("split manifest: fractions must have 3 entries");
    m.fractions = {f[0].get<double>(), f[1].get<double>(), f[2].get<double>()};
    for (const auto& [id, s] : j.at("assignments").items()) m.assignments[id] = parse_split(s.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("split manifest: ") + e.what());
  }
  return m;
}

namespace {
std::size_t round_count(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }
}  // namespace

void SplitFractions::validate() const {
  const double sum = train + val + test;
  if (train < 0 || val < 0 || test <= 0 || std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("split fractions must be non-negative, test > 0, and sum to 1");
  }
}

SplitManifest stratified_split(std::span<const ImageRecord> images, std::span<const DupCluster> clusters,
                               SplitFractions fractions, std::uint64_t seed) {
  fractions.validate();

  std::set<std::string> pinned;
  for (const auto& c : clusters) {
    if (c.kind == DupKind::near) pinned.insert(c.members.begin(), c.members.end());
  }

  std::map<std::string, std::vector<std::string>> by_class;  // primary class -> ids
  for (const auto& im : images) {
    if (im.class_names.empty()) throw ValidationError("image " + im.id + " has no class to stratify on");
    by_class[im.class_names.front()].push_back(im.id);
  }

  SplitManifest m;
  m.seed = seed;
  m.fractions = fractions;
  for (auto& [cls, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    std::vector<std::string> free;
    for (const auto& id : ids) {
      if (pinned.contains(id)) {
        m.assignments[id] = Split::train;
      } else {
        free.push_back(id);
      }
    }
    if (free.empty()) {
      throw ValidationError("class \"" + cls + "\" has no image outside near-duplicate clusters; " +
                            "cannot form a test stratum");
    }
    Rng rng(hash_combine(seed, cls));
    rng.shuffle(free);

    const std::size_t n = ids.size();
    const std::size_t n_test = std::min(free.size(), std::max<std::size_t>(1, round_count(fractions.test * n)));
    const std::size_t n_val = std::min(free.size() - n_test, round_count(fractions.val * n));
    for (std::size_t i = 0; i < free.size(); ++i) {
      m.assignments[free[i]] = i < n_test ? Split::test : (i < n_test + n_val ? Split::val : Split::train);
    }
  }
  return m;
}

}  // namespace autodet
