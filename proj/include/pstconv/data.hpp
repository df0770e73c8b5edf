#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pstconv/random.hpp"
#include "pstconv/types.hpp"

namespace pstconv {

/// One motion of the moving-digit taxonomy: 9 initial locations x 8
/// velocities x 2 distortion axes = 144 classes, with
/// class_id = location*16 + velocity*2 + distortion.
struct MotionSpec {
  int location = 0;    // 0..8
  int velocity = 0;    // 0..7
  int distortion = 0;  // 0 = horizontal, 1 = vertical

  int class_id() const { return location * 16 + velocity * 2 + distortion; }
  static MotionSpec from_class(int class_id);

  Eigen::Vector2d velocity_vector() const;
  Eigen::Vector2d location_cell() const;  // raw grid pair, e.g. (1,1)..(5,5)

  static constexpr int kNumLocations = 9;
  static constexpr int kNumVelocities = 8;
  static constexpr int kNumDistortions = 2;
  static constexpr int kNumClasses = kNumLocations * kNumVelocities * kNumDistortions;
};

/// Canvas geometry. Digits live in a digit_box-sized bounding box whose
/// top-left corner starts at location_cell * (size - digit_box) / grid_divisor,
/// so the 9 raw locations map inside the canvas with the center cell (3,3)
/// centered.
struct CanvasSpec {
  double size = 64.0;
  double digit_box = 28.0;
  double grid_divisor = 6.0;
  int frames = 16;

  Eigen::Vector2d top_left(const MotionSpec& motion) const {
    return motion.location_cell() * ((size - digit_box) / grid_divisor);
  }
};

constexpr int kDigitPointCount = 128;

/// Moving-digit sequence: per frame the base digit is scaled by
/// |0.4 - 0.05 t| + 0.6 about its centroid along the distortion axis, then
/// translated by the accumulated velocity with elastic bounces off the canvas
/// walls. Points embed in 3D with z = 0; the seed only permutes point order.
PointCloudSequence<double> generate_moving_digit(const Eigen::Matrix2Xd& digit_points,
                                                 const MotionSpec& motion, std::uint64_t seed,
                                                 const CanvasSpec& canvas = {});

/// Distortion scale factor at frame t (1-based).
inline double distortion_scale(int t) { return std::abs(0.4 - 0.05 * t) + 0.6; }

/// Digit images from an IDX (MNIST-style) container, thresholded at intensity
/// > 0.5 and sampled to 128 points (without replacement when enough pixels
/// are lit, with seeded replacement otherwise). Coordinates are normalized
/// into a 28-unit box for containers of other sizes.
std::vector<Eigen::Matrix2Xd> load_digit_images(const std::string& path, std::uint64_t seed,
                                                std::size_t max_images = 0);

/// Built-in digit sprites (0-9): stroke rasterizations sampled to 128 points,
/// so dataset generation needs no external files.
Eigen::Matrix2Xd builtin_digit_points(int digit, std::uint64_t seed);

/// Samples exactly 128 points from lit pixel coordinates; shared by the IDX
/// loader and the sprite generator.
Eigen::Matrix2Xd sample_digit_pixels(std::vector<Eigen::Vector2d> lit, std::uint64_t seed);

/// One stored sequence: sequence-level label (or -1), frames, and optional
/// per-frame per-point labels.
struct SequenceRecord {
  std::int32_t label = -1;
  PointCloudSequence<double> sequence;
  std::vector<std::vector<std::int32_t>> point_labels;  // per frame, N entries; empty when absent

  bool has_point_labels() const { return !point_labels.empty(); }
};

/// PCSQ1 binary format, little-endian:
///   magic "PCSQ1" | u32 L | u32 N | u32 C | i32 label | u8 point_label_flag
///   | f32 coords[L*N*3] | f32 feats[L*N*C] | i32 labels[L*N] (when flagged)
/// The byte length must match the header arithmetic exactly.
void write_sequence(const std::string& path, const SequenceRecord& record);
SequenceRecord read_sequence(const std::string& path);

/// Fixed-length clips sampled every `frame_stride` frames, windows sliding by
/// one frame: clip o covers frames o, o+s, ..., o+(clip_len-1)s.
template <typename Scalar>
std::vector<PointCloudSequence<Scalar>> split_clips(const PointCloudSequence<Scalar>& seq,
                                                    int clip_len, int frame_stride) {
  if (clip_len < 1 || frame_stride < 1)
    throw std::invalid_argument("split_clips: clip length and stride must be >= 1");
  const int frames = seq.num_frames();
  const int count = frames - (clip_len - 1) * frame_stride;
  if (count < 1) throw std::invalid_argument("split_clips: sequence shorter than one clip");
  std::vector<PointCloudSequence<Scalar>> clips;
  clips.reserve(static_cast<std::size_t>(count));
  for (int o = 0; o < count; ++o) {
    PointCloudSequence<Scalar> clip;
    clip.frames.reserve(static_cast<std::size_t>(clip_len));
    for (int j = 0; j < clip_len; ++j)
      clip.frames.push_back(seq.frames[static_cast<std::size_t>(o + j * frame_stride)]);
    clips.push_back(std::move(clip));
  }
  return clips;
}

/// Frame indices clip o draws from (same convention as split_clips).
std::vector<int> clip_frame_indices(int num_frames, int clip_len, int frame_stride, int offset);

enum class LabelMode {
  FullTaxonomy,  // label = class_id over all 144 motions
  VelocityOnly,  // label = velocity index; location fixed to the center cell
};

/// Source of digit shapes: built-in sprites or a loaded image set.
struct DigitSource {
  std::vector<Eigen::Matrix2Xd> images;  // empty: use built-in sprites

  Eigen::Matrix2Xd pick(Rng& rng, std::uint64_t sample_seed) const;
};

/// Classification record #index for a dataset: motions cycle deterministically
/// through the class set so `count >= classes` covers every class.
SequenceRecord generate_classification_record(int index, std::uint64_t seed, LabelMode mode,
                                              const DigitSource& source,
                                              const CanvasSpec& canvas = {});

/// Two independently moving digits in one canvas with per-point labels:
/// class 0 is the slow digit (speed-1 velocity), class 1 the fast one
/// (speed-2 velocity), so the labels are motion-grounded and well-posed.
SequenceRecord generate_two_digit_segmentation(std::uint64_t seed, const DigitSource& source,
                                               const CanvasSpec& canvas = {});

/// JSON index of a generated dataset: task, class count, seed and the record
/// paths with their sequence labels.
struct DatasetManifest {
  std::string task;  // "cls" or "seg"
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, int>> records;
};

void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

/// Loads every record listed in a manifest (paths relative to its directory).
std::vector<SequenceRecord> load_dataset(const std::string& manifest_path);

int num_classes_for(LabelMode mode);

}  // namespace pstconv
