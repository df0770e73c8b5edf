#include "pstconv/data.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace pstconv {

namespace {

const std::array<std::array<int, 2>, 9> kLocations = {{
    {1, 1}, {1, 3}, {1, 5}, {3, 1}, {3, 3}, {3, 5}, {5, 1}, {5, 3}, {5, 5},
}};

const std::array<std::array<int, 2>, 8> kVelocities = {{
    {1, 1}, {-1, 1}, {-1, -1}, {1, -1}, {2, 2}, {-2, 2}, {-2, -2}, {2, -2},
}};

}  // namespace

MotionSpec MotionSpec::from_class(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses)
    throw std::invalid_argument("MotionSpec: class id out of range");
  MotionSpec m;
  m.location = class_id / (kNumVelocities * kNumDistortions);
  m.velocity = (class_id / kNumDistortions) % kNumVelocities;
  m.distortion = class_id % kNumDistortions;
  return m;
}

Eigen::Vector2d MotionSpec::velocity_vector() const {
  if (velocity < 0 || velocity >= kNumVelocities)
    throw std::invalid_argument("MotionSpec: velocity index out of range");
  const auto& v = kVelocities[static_cast<std::size_t>(velocity)];
  return {static_cast<double>(v[0]), static_cast<double>(v[1])};
}

Eigen::Vector2d MotionSpec::location_cell() const {
  if (location < 0 || location >= kNumLocations)
    throw std::invalid_argument("MotionSpec: location index out of range");
  const auto& l = kLocations[static_cast<std::size_t>(location)];
  return {static_cast<double>(l[0]), static_cast<double>(l[1])};
}

namespace {

// Reflects p into [lo, hi], flipping the velocity component on every bounce.
void bounce_axis(double& p, double& v, double lo, double hi) {
  for (int guard = 0; guard < 64 && (p < lo || p > hi); ++guard) {
    if (p < lo) {
      p = 2.0 * lo - p;
      v = -v;
    } else {
      p = 2.0 * hi - p;
      v = -v;
    }
  }
}

}  // namespace

PointCloudSequence<double> generate_moving_digit(const Eigen::Matrix2Xd& digit_points,
                                                 const MotionSpec& motion, std::uint64_t seed,
                                                 const CanvasSpec& canvas) {
  if (digit_points.cols() < 1)
    throw std::invalid_argument("generate_moving_digit: empty digit point set");
  if (digit_points.minCoeff() < 0.0 || digit_points.maxCoeff() > canvas.digit_box)
    throw std::invalid_argument("generate_moving_digit: digit points outside the digit box");

  Eigen::Matrix2Xd base = digit_points;
  Rng rng(seed);  // point order is the only randomized part
  for (Index j = base.cols() - 1; j > 0; --j) {
    const Index k = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(j + 1)));
    base.col(j).swap(base.col(k));
  }

  const Eigen::Vector2d centroid = base.rowwise().mean();
  const Eigen::Vector2d lo(base.row(0).minCoeff(), base.row(1).minCoeff());
  const Eigen::Vector2d hi(base.row(0).maxCoeff(), base.row(1).maxCoeff());

  Eigen::Vector2d pos = canvas.top_left(motion);
  Eigen::Vector2d vel = motion.velocity_vector();

  PointCloudSequence<double> seq;
  seq.frames.reserve(static_cast<std::size_t>(canvas.frames));
  for (int t = 1; t <= canvas.frames; ++t) {
    const double s = distortion_scale(t);
    const int axis = motion.distortion == 0 ? 0 : 1;
    Eigen::Matrix2Xd pts = base;
    pts.row(axis) = s * (base.row(axis).array() - centroid(axis)) + centroid(axis);

    Frame<double> frame;
    frame.coords.resize(3, pts.cols());
    frame.coords.topRows<2>() = pts.colwise() + pos;
    frame.coords.row(2).setZero();
    frame.feats.resize(0, pts.cols());
    seq.frames.push_back(std::move(frame));

    if (t < canvas.frames) {
      pos += vel;
      bounce_axis(pos.x(), vel.x(), -lo.x(), canvas.size - hi.x());
      bounce_axis(pos.y(), vel.y(), -lo.y(), canvas.size - hi.y());
    }
  }
  return seq;
}

namespace {

/// Samples exactly kDigitPointCount points from lit pixel coordinates:
/// without replacement when enough pixels are lit, with replacement
/// otherwise.
Eigen::Matrix2Xd sample_point_set(std::vector<Eigen::Vector2d> lit, std::uint64_t seed) {
  if (lit.empty()) throw std::invalid_argument("digit image has no lit pixels");
  Rng rng(seed);
  Eigen::Matrix2Xd out(2, kDigitPointCount);
  if (lit.size() >= kDigitPointCount) {
    for (int j = 0; j < kDigitPointCount; ++j) {
      const std::size_t pick =
          static_cast<std::size_t>(j) + rng.next_below(lit.size() - static_cast<std::size_t>(j));
      std::swap(lit[static_cast<std::size_t>(j)], lit[pick]);
      out.col(j) = lit[static_cast<std::size_t>(j)];
    }
  } else {
    for (int j = 0; j < kDigitPointCount; ++j) out.col(j) = lit[rng.next_below(lit.size())];
  }
  return out;
}

std::uint32_t read_be_u32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

std::vector<Eigen::Matrix2Xd> load_digit_images(const std::string& path, std::uint64_t seed,
                                                std::size_t max_images) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16) throw ParseError(path + ": truncated IDX header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (read_be_u32(p) != 0x00000803u)
    throw ParseError(path + ": not an IDX image container (bad magic)");
  const std::size_t count = read_be_u32(p + 4);
  const std::size_t rows = read_be_u32(p + 8);
  const std::size_t cols = read_be_u32(p + 12);
  if (rows == 0 || cols == 0) throw ParseError(path + ": degenerate image dimensions");
  if (bytes.size() != 16 + count * rows * cols)
    throw ParseError(path + ": payload size does not match the header");

  const std::size_t take = max_images == 0 ? count : std::min(count, max_images);
  const double norm = 28.0 / static_cast<double>(std::max(rows, cols));

  std::vector<Eigen::Matrix2Xd> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const unsigned char* img = p + 16 + i * rows * cols;
    std::vector<Eigen::Vector2d> lit;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        if (img[r * cols + c] / 255.0 > 0.5)
          lit.emplace_back(static_cast<double>(c) * norm, static_cast<double>(r) * norm);
    out.push_back(sample_point_set(std::move(lit), hash_combine(seed, i)));
  }
  return out;
}

Eigen::Matrix2Xd sample_digit_pixels(std::vector<Eigen::Vector2d> lit, std::uint64_t seed) {
  return sample_point_set(std::move(lit), seed);
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) {
  const std::uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

constexpr std::size_t kHeaderBytes = 5 + 4 * 4 + 1;

}  // namespace

void write_sequence(const std::string& path, const SequenceRecord& record) {
  const int frames = record.sequence.num_frames();
  const Index points = record.sequence.points_per_frame();
  const Index channels = record.sequence.feature_channels();
  if (record.has_point_labels()) {
    if (static_cast<int>(record.point_labels.size()) != frames)
      throw std::invalid_argument("write_sequence: point label frame count mismatch");
    for (const auto& frame_labels : record.point_labels)
      if (static_cast<Index>(frame_labels.size()) != points)
        throw std::invalid_argument("write_sequence: point label count mismatch");
  }

  std::string buf;
  buf.reserve(kHeaderBytes + static_cast<std::size_t>(frames * points * (3 + channels)) * 4);
  buf.append("PCSQ1", 5);
  put_u32(buf, static_cast<std::uint32_t>(frames));
  put_u32(buf, static_cast<std::uint32_t>(points));
  put_u32(buf, static_cast<std::uint32_t>(channels));
  put_u32(buf, static_cast<std::uint32_t>(record.label));
  buf.push_back(record.has_point_labels() ? 1 : 0);

  for (const auto& frame : record.sequence.frames)
    for (Index n = 0; n < points; ++n)
      for (int d = 0; d < 3; ++d) put_f32(buf, static_cast<float>(frame.coords(d, n)));
  for (const auto& frame : record.sequence.frames)
    for (Index n = 0; n < points; ++n)
      for (Index ch = 0; ch < channels; ++ch) put_f32(buf, static_cast<float>(frame.feats(ch, n)));
  if (record.has_point_labels()) {
    for (const auto& frame_labels : record.point_labels)
      for (std::int32_t v : frame_labels) put_u32(buf, static_cast<std::uint32_t>(v));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_sequence: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write_sequence: write failed for " + path);
}

SequenceRecord read_sequence(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < kHeaderBytes) throw ParseError(path + ": truncated header");
  if (bytes.compare(0, 5, "PCSQ1") != 0) throw ParseError(path + ": bad magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t frames = get_u32(p + 5);
  const std::size_t points = get_u32(p + 9);
  const std::size_t channels = get_u32(p + 13);
  const std::int32_t label = static_cast<std::int32_t>(get_u32(p + 17));
  const unsigned char flag = p[21];
  if (flag > 1) throw ParseError(path + ": bad point-label flag");
  if (frames == 0 || points == 0) throw ParseError(path + ": empty sequence");

  const std::size_t expected = kHeaderBytes + frames * points * (3 + channels) * 4 +
                               (flag ? frames * points * 4 : 0);
  if (bytes.size() != expected)
    throw ParseError(path + ": byte length does not match header arithmetic");

  SequenceRecord record;
  record.label = label;
  record.sequence.frames.resize(frames);
  std::size_t off = kHeaderBytes;
  for (auto& frame : record.sequence.frames) {
    frame.coords.resize(3, static_cast<Index>(points));
    for (std::size_t n = 0; n < points; ++n)
      for (int d = 0; d < 3; ++d, off += 4)
        frame.coords(d, static_cast<Index>(n)) = static_cast<double>(get_f32(p + off));
  }
  for (auto& frame : record.sequence.frames) {
    frame.feats.resize(static_cast<Index>(channels), static_cast<Index>(points));
    for (std::size_t n = 0; n < points; ++n)
      for (std::size_t ch = 0; ch < channels; ++ch, off += 4)
        frame.feats(static_cast<Index>(ch), static_cast<Index>(n)) =
            static_cast<double>(get_f32(p + off));
  }
  if (flag) {
    record.point_labels.resize(frames);
    for (auto& frame_labels : record.point_labels) {
      frame_labels.resize(points);
      for (std::size_t n = 0; n < points; ++n, off += 4)
        frame_labels[n] = static_cast<std::int32_t>(get_u32(p + off));
    }
  }
  return record;
}

std::vector<int> clip_frame_indices(int num_frames, int clip_len, int frame_stride, int offset) {
  if (clip_len < 1 || frame_stride < 1)
    throw std::invalid_argument("clip_frame_indices: clip length and stride must be >= 1");
  const int count = num_frames - (clip_len - 1) * frame_stride;
  if (offset < 0 || offset >= count)
    throw std::invalid_argument("clip_frame_indices: offset out of range");
  std::vector<int> out(static_cast<std::size_t>(clip_len));
  for (int j = 0; j < clip_len; ++j) out[static_cast<std::size_t>(j)] = offset + j * frame_stride;
  return out;
}

Eigen::Matrix2Xd DigitSource::pick(Rng& rng, std::uint64_t sample_seed) const {
  if (images.empty())
    return builtin_digit_points(static_cast<int>(rng.next_below(10)), sample_seed);
  return images[rng.next_below(images.size())];
}

int num_classes_for(LabelMode mode) {
  return mode == LabelMode::FullTaxonomy ? MotionSpec::kNumClasses : MotionSpec::kNumVelocities;
}

SequenceRecord generate_classification_record(int index, std::uint64_t seed, LabelMode mode,
                                              const DigitSource& source, const CanvasSpec& canvas) {
  const int classes = num_classes_for(mode);
  const int label = index % classes;
  Rng rng(hash_combine(seed, static_cast<std::uint64_t>(index)));

  MotionSpec motion;
  if (mode == LabelMode::FullTaxonomy) {
    motion = MotionSpec::from_class(label);
  } else {
    motion.velocity = label;
    motion.location = 4;  // center cell; velocity is the only labeled factor
    motion.distortion = rng.uniform_int(0, 1);
  }

  const Eigen::Matrix2Xd digit = source.pick(rng, rng.next_u64());
  SequenceRecord record;
  record.label = label;
  record.sequence = generate_moving_digit(digit, motion, rng.next_u64(), canvas);
  return record;
}

SequenceRecord generate_two_digit_segmentation(std::uint64_t seed, const DigitSource& source,
                                               const CanvasSpec& canvas) {
  Rng rng(hash_combine(seed, 0x5E6u));

  MotionSpec slow;
  slow.velocity = rng.uniform_int(0, 3);  // the speed-1 velocities
  slow.location = rng.uniform_int(0, 8);
  slow.distortion = rng.uniform_int(0, 1);
  MotionSpec fast;
  fast.velocity = rng.uniform_int(4, 7);  // the speed-2 velocities
  fast.location = rng.uniform_int(0, 8);
  fast.distortion = rng.uniform_int(0, 1);

  const Eigen::Matrix2Xd digit_a = source.pick(rng, rng.next_u64());
  const Eigen::Matrix2Xd digit_b = source.pick(rng, rng.next_u64());
  const auto seq_a = generate_moving_digit(digit_a, slow, rng.next_u64(), canvas);
  const auto seq_b = generate_moving_digit(digit_b, fast, rng.next_u64(), canvas);

  SequenceRecord record;
  record.label = -1;
  record.sequence.frames.resize(seq_a.frames.size());
  record.point_labels.resize(seq_a.frames.size());
  for (std::size_t t = 0; t < seq_a.frames.size(); ++t) {
    const Index na = seq_a.frames[t].coords.cols();
    const Index nb = seq_b.frames[t].coords.cols();
    auto& frame = record.sequence.frames[t];
    frame.coords.resize(3, na + nb);
    frame.coords.leftCols(na) = seq_a.frames[t].coords;
    frame.coords.rightCols(nb) = seq_b.frames[t].coords;
    frame.feats.resize(0, na + nb);
    auto& labels = record.point_labels[t];
    labels.assign(static_cast<std::size_t>(na + nb), 0);
    std::fill(labels.begin() + na, labels.end(), 1);
  }
  return record;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  nlohmann::json j;
  j["task"] = manifest.task;
  j["num_classes"] = manifest.num_classes;
  j["seed"] = manifest.seed;
  nlohmann::json records = nlohmann::json::array();
  for (const auto& [rec_path, label] : manifest.records)
    records.push_back({{"path", rec_path}, {"label", label}});
  j["records"] = std::move(records);

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  DatasetManifest manifest;
  try {
    manifest.task = j.at("task").get<std::string>();
    manifest.num_classes = j.at("num_classes").get<int>();
    manifest.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& r : j.at("records"))
      manifest.records.emplace_back(r.at("path").get<std::string>(), r.at("label").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return manifest;
}

std::vector<SequenceRecord> load_dataset(const std::string& manifest_path) {
  const DatasetManifest manifest = read_manifest(manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  std::vector<SequenceRecord> records;
  records.reserve(manifest.records.size());
  for (const auto& [rec_path, label] : manifest.records) {
    const std::filesystem::path p = std::filesystem::path(rec_path).is_absolute()
                                        ? std::filesystem::path(rec_path)
                                        : base / rec_path;
    records.push_back(read_sequence(p.string()));
    records.back().label = label;
  }
  return records;
}

}  // namespace pstconv
