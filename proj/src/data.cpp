// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "blink/checkpoint.hpp"
#include "blink/errors.hpp"
#include "blink/model.hpp"

namespace blink {

namespace {

constexpr std::array<const char*, kNumColors> kColorNames = {"red", "green", "blue", "yellow", "magenta", "cyan"};
constexpr std::array<const char*, kNumShapes> kShapeNames = {"square", "ring", "plus", "cross"};
constexpr std::array<std::array<float, 3>, kNumColors> kColorRgb = {{{0.90f, 0.10f, 0.10f},
                                                                     {0.10f, 0.80f, 0.15f},
                                                                     {0.15f, 0.25f, 0.95f},
                                                                     {0.95f, 0.90f, 0.10f},
                                                                     {0.90f, 0.15f, 0.90f},
                                                                     {0.10f, 0.90f, 0.90f}}};

bool shape_covers(ShapeKind shape, int size, int i, int j) {
  // Strokes thicken with the object so shapes stay apart at patch scale.
  const int w = std::max(1, (size + 2) / 4);
  switch (shape) {
    case ShapeKind::Square: return true;
    case ShapeKind::Ring: return i < w || j < w || i >= size - w || j >= size - w;
    case ShapeKind::Plus: {
      const int lo = (size - w) / 2;
      const int hi = size - 1 - lo;
      return (i >= lo && i <= hi) || (j >= lo && j <= hi);
    }
    case ShapeKind::Cross: return std::abs(i - j) <= w / 2 || std::abs(i + j - (size - 1)) <= w / 2;
  }
  return false;
}

void draw(Tensor3<float>& image, const ObjectDesc& o) {
  const auto& rgb = kColorRgb[static_cast<std::size_t>(o.color)];
  for (int i = 0; i < o.size; ++i)
    for (int j = 0; j < o.size; ++j)
      if (shape_covers(o.shape, o.size, i, j))
        for (int c = 0; c < 3; ++c) image(o.y + i, o.x + j, c) = rgb[static_cast<std::size_t>(c)];
}

ObjectDesc place(Rng& rng, int quadrant, int size, int image_size, int step) {
  const int half = image_size / 2;
  const int qx = (quadrant % 2) * half;
  const int qy = (quadrant / 2) * half;
  ObjectDesc o;
  o.size = size;
  o.quadrant = quadrant;
  const int slots = (half - size) / step + 1;
  o.x = qx + step * rng.uniform_int(slots);
  o.y = qy + step * rng.uniform_int(slots);
  return o;
}

nlohmann::json object_to_json(const ObjectDesc& o) {
  return {{"shape", static_cast<int>(o.shape)}, {"color", o.color}, {"x", o.x},
          {"y", o.y},                           {"size", o.size},   {"quadrant", o.quadrant}};
}

ObjectDesc object_from_json(const nlohmann::json& j) {
  ObjectDesc o;
  o.shape = static_cast<ShapeKind>(j.at("shape").get<int>());
  o.color = j.at("color").get<int>();
  o.x = j.at("x").get<int>();
  o.y = j.at("y").get<int>();
  o.size = j.at("size").get<int>();
  o.quadrant = j.at("quadrant").get<int>();
  return o;
}

}  // namespace

int Vocabulary::answer_class(int token) {
  if (!is_answer(token)) throw InvalidArgument("token " + std::to_string(token) + " is not an answer token");
  return token - kFirstColor;
}

std::string Vocabulary::decode(int token) {
  switch (token) {
    case kPadToken: return "<pad>";
    case kBosToken: return "<bos>";
    case kSystemToken: return "<sys>";
    case kEosToken: return "<eos>";
    case kAskColor: return "what-color";
    case kAskShape: return "what-shape";
    case kQuestionMark: return "?";
    default: break;
  }
  if (token >= kFirstColor && token < kFirstColor + kNumColors) return kColorNames[static_cast<std::size_t>(token - kFirstColor)];
  if (token >= kFirstShape && token < kFirstShape + kNumShapes) return kShapeNames[static_cast<std::size_t>(token - kFirstShape)];
  return "<unused" + std::to_string(token) + ">";
}

int Vocabulary::encode(std::string_view word) {
  for (int t = 0; t < kFirstShape + kNumShapes; ++t) {
    if (decode(t) == word) return t;
  }
  if (word.starts_with("<unused") && word.ends_with(">")) {
    return std::stoi(std::string(word.substr(7, word.size() - 8)));
  }
  throw InvalidArgument("unknown word '" + std::string(word) + "'");
}

int SceneSample::gt_patch_for(int p, int grid_size, int image_size) const {
  if (p <= 0 || grid_size % p != 0) throw InvalidArgument("gt_patch_for: grid not divisible by p");
  const double scale = static_cast<double>(grid_size) / image_size;
  const int ty = static_cast<int>((target.y + target.size / 2.0) * scale);
  const int tx = static_cast<int>((target.x + target.size / 2.0) * scale);
  const int ph = grid_size / p;
  return std::min(ty / ph, p - 1) * p + std::min(tx / ph, p - 1);
}

SceneSample generate_scene(std::uint64_t seed, int difficulty, const SceneOptions& options) {
  if (difficulty < 0 || difficulty > 3) throw InvalidArgument("generate_scene: difficulty must be in [0, 3]");
  const int S = options.image_size;
  if (S < 16 || S % 2 != 0) throw InvalidArgument("generate_scene: image_size must be even and >= 16");
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL + static_cast<std::uint64_t>(difficulty));

  SceneSample s;
  s.seed = seed;
  s.difficulty = difficulty;
  s.image = Tensor3<float>(S, S, 3);
  const double base = rng.uniform(0.30, 0.55);
  const double noise = 0.02 + 0.03 * difficulty;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double tint = rng.normal() * noise;
      for (int c = 0; c < 3; ++c) {
        s.image(y, x, c) = static_cast<float>(std::clamp(base + tint + rng.normal() * noise * 0.5, 0.0, 1.0));
      }
    }

  // Answer class first, so classes are uniform by construction.
  const int answer_class = rng.uniform_int(kNumAnswerClasses);
  const bool ask_color = answer_class < kNumColors;
  if (options.position_step <= 0) throw InvalidArgument("generate_scene: position_step must be positive");
  // Sizes are given for a 32 pixel image and scaled with it.
  auto scaled = [&](int px) { return std::max(3, static_cast<int>(std::lround(px * S / 32.0))); };
  // Objects shrink with difficulty: 7-9 px at 0 down to 4-6 px at 3.
  const int min_size = scaled(7 - difficulty);
  const int max_size = std::min(scaled(9 - difficulty), S / 2);
  auto pick_size = [&] { return min_size + rng.uniform_int(max_size - min_size + 1); };

  std::array<int, 4> quads = {0, 1, 2, 3};
  for (int i = 3; i > 0; --i) std::swap(quads[static_cast<std::size_t>(i)], quads[static_cast<std::size_t>(rng.uniform_int(i + 1))]);

  s.target = place(rng, quads[0], pick_size(), S, options.position_step);
  if (ask_color) {
    s.target.color = answer_class;
    s.target.shape = static_cast<ShapeKind>(rng.uniform_int(kNumShapes));
    s.query = {Vocabulary::kAskColor, Vocabulary::shape_token(s.target.shape), Vocabulary::kQuestionMark};
    s.answer = Vocabulary::color_token(s.target.color);
  } else {
    s.target.shape = static_cast<ShapeKind>(answer_class - kNumColors);
    s.target.color = rng.uniform_int(kNumColors);
    s.query = {Vocabulary::kAskShape, Vocabulary::color_token(s.target.color), Vocabulary::kQuestionMark};
    s.answer = Vocabulary::shape_token(s.target.shape);
  }

  int n_distractors = options.force_distractors >= 0 ? std::min(options.force_distractors, 3)
                                                     : rng.uniform_int(difficulty + 1);
  for (int k = 0; k < n_distractors; ++k) {
    ObjectDesc o = place(rng, quads[static_cast<std::size_t>(k + 1)], pick_size(), S, options.position_step);
    // The queried attribute must identify the target uniquely.
    if (ask_color) {
      o.color = rng.uniform_int(kNumColors);
      o.shape = static_cast<ShapeKind>((static_cast<int>(s.target.shape) + 1 + rng.uniform_int(kNumShapes - 1)) % kNumShapes);
    } else {
      o.shape = static_cast<ShapeKind>(rng.uniform_int(kNumShapes));
      o.color = (s.target.color + 1 + rng.uniform_int(kNumColors - 1)) % kNumColors;
    }
    s.distractors.push_back(o);
  }
  for (const auto& o : s.distractors) draw(s.image, o);
  draw(s.image, s.target);
  s.gt_patch = s.target.quadrant;
  return s;
}

const char* quadrant_name(Quadrant q) {
  switch (q) {
    case Quadrant::TL: return "TL";
    case Quadrant::TR: return "TR";
    case Quadrant::BL: return "BL";
    case Quadrant::BR: return "BR";
  }
  return "?";
}

std::vector<int> CropSample::token_indices(int grid_size) const {
  std::vector<int> out;
  for (int r = row_begin; r < row_end; ++r)
    for (int c = col_begin; c < col_end; ++c) out.push_back(r * grid_size + c);
  return out;
}

std::array<CropSample, 4> make_crops(const Tensor3<float>& image, int grid_size) {
  const int S = image.height();
  if (image.width() != S) throw InvalidArgument("make_crops: image must be square");
  if (S % 2 != 0 || S == 0) throw InvalidArgument("make_crops: image dimensions must be even");
  if (grid_size % 2 != 0) throw InvalidArgument("make_crops: token grid must be even");
  const int half = S / 2;
  const int gh = grid_size / 2;
  std::array<CropSample, 4> out;
  for (int q = 0; q < 4; ++q) {
    CropSample& c = out[static_cast<std::size_t>(q)];
    c.quadrant = static_cast<Quadrant>(q);
    const int y0 = (q / 2) * half;
    const int x0 = (q % 2) * half;
    c.raw = Tensor3<float>(half, half, image.channels());
    for (int y = 0; y < half; ++y)
      for (int x = 0; x < half; ++x)
        for (int k = 0; k < image.channels(); ++k) c.raw(y, x, k) = image(y0 + y, x0 + x, k);
    c.crop = bilinear_resize(c.raw, S, S);
    c.row_begin = (q / 2) * gh;
    c.row_end = c.row_begin + gh;
    c.col_begin = (q % 2) * gh;
    c.col_end = c.col_begin + gh;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

nlohmann::json sample_to_json(const SceneSample& s, std::uint64_t blob_offset) {
  nlohmann::json distractors = nlohmann::json::array();
  for (const auto& o : s.distractors) distractors.push_back(object_to_json(o));
  return {{"id", s.id},
          {"seed", s.seed},
          {"answer", s.answer},
          {"gt_patch", s.gt_patch},
          {"blob_offset", blob_offset},
          {"difficulty", s.difficulty},
          {"query", s.query},
          {"target", object_to_json(s.target)},
          {"distractors", distractors}};
}

namespace {

constexpr std::uint64_t kBlobHeaderBytes = kDatasetMagic.size() + 12;

void append_le_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

std::uint32_t read_le_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

DatasetWriter::DatasetWriter(const std::filesystem::path& dir) : dir_(dir) {
  std::filesystem::create_directories(dir);
  index_.open(dir / "index.jsonl", std::ios::trunc);
  blob_.open(dir / "images.bin", std::ios::binary | std::ios::trunc);
  if (!index_ || !blob_) throw ConfigError("cannot create dataset files in " + dir.string());
}

void DatasetWriter::write(const SceneSample& sample) {
  const Tensor3<float>& img = sample.image;
  if (height_ < 0) {
    height_ = img.height();
    width_ = img.width();
    channels_ = img.channels();
    std::vector<std::byte> header;
    for (char c : kDatasetMagic) header.push_back(static_cast<std::byte>(c));
    append_le_u32(header, static_cast<std::uint32_t>(height_));
    append_le_u32(header, static_cast<std::uint32_t>(width_));
    append_le_u32(header, static_cast<std::uint32_t>(channels_));
    blob_.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
    blob_offset_ = header.size();
  } else if (img.height() != height_ || img.width() != width_ || img.channels() != channels_) {
    throw InvalidArgument("DatasetWriter: all images must share one shape");
  }
  index_ << sample_to_json(sample, blob_offset_).dump() << '\n';
  std::vector<std::byte> bytes;
  bytes.reserve(img.size() * 4);
  for (float v : img.data()) append_le_f32(bytes, v);
  blob_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  blob_offset_ += bytes.size();
  ++count_;
}

void DatasetWriter::close() {
  if (height_ < 0) {
    // Empty dataset still gets a valid header.
    std::vector<std::byte> header;
    for (char c : kDatasetMagic) header.push_back(static_cast<std::byte>(c));
    for (int i = 0; i < 3; ++i) append_le_u32(header, 0);
    blob_.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
  }
  index_.close();
  blob_.close();
  if (!index_ || !blob_) throw ConfigError("failed to finish dataset in " + dir_.string());
}

DatasetReader::DatasetReader(const std::filesystem::path& dir) {
  index_.open(dir / "index.jsonl");
  blob_.open(dir / "images.bin", std::ios::binary);
  if (!index_ || !blob_) throw ConfigError("dataset not found in " + dir.string());
  blob_size_ = std::filesystem::file_size(dir / "images.bin");
  char header[kBlobHeaderBytes];
  blob_.read(header, kBlobHeaderBytes);
  if (static_cast<std::uint64_t>(blob_.gcount()) != kBlobHeaderBytes) {
    throw FormatError("image blob shorter than its header", static_cast<std::uint64_t>(blob_.gcount()));
  }
  if (std::string_view(header, kDatasetMagic.size()) != kDatasetMagic) throw FormatError("bad image blob magic", 0);
  height_ = static_cast<int>(read_le_u32(header + kDatasetMagic.size()));
  width_ = static_cast<int>(read_le_u32(header + kDatasetMagic.size() + 4));
  channels_ = static_cast<int>(read_le_u32(header + kDatasetMagic.size() + 8));
}

std::optional<SceneSample> DatasetReader::next() {
  const std::uint64_t line_start = index_offset_;
  if (!std::getline(index_, line_)) return std::nullopt;
  index_offset_ += line_.size() + 1;
  if (line_.empty()) return next();
  SceneSample s;
  std::uint64_t offset = 0;
  try {
    const auto j = nlohmann::json::parse(line_);
    s.id = j.at("id").get<std::uint64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.answer = j.at("answer").get<int>();
    s.gt_patch = j.at("gt_patch").get<int>();
    s.difficulty = j.value("difficulty", 0);
    s.query = j.at("query").get<std::vector<int>>();
    s.target = object_from_json(j.at("target"));
    for (const auto& o : j.at("distractors")) s.distractors.push_back(object_from_json(o));
    offset = j.at("blob_offset").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt dataset index line: ") + e.what(), line_start);
  }
  const std::uint64_t nbytes = static_cast<std::uint64_t>(height_) * width_ * channels_ * 4;
  if (offset < kBlobHeaderBytes || offset > blob_size_ || nbytes > blob_size_ - offset) {
    throw FormatError("image blob truncated: sample " + std::to_string(s.id) + " needs " + std::to_string(nbytes) +
                          " bytes", std::min(offset, blob_size_));
  }
  pixels_.resize(nbytes);
  blob_.seekg(static_cast<std::streamoff>(offset));
  blob_.read(pixels_.data(), static_cast<std::streamsize>(nbytes));
  if (static_cast<std::uint64_t>(blob_.gcount()) != nbytes) {
    throw FormatError("image blob truncated", offset + static_cast<std::uint64_t>(blob_.gcount()));
  }
  s.image = Tensor3<float>(height_, width_, channels_);
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    s.image.data()[i] = read_le_f32(reinterpret_cast<const std::byte*>(pixels_.data()) + 4 * i);
  }
  return s;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples) {
  DatasetWriter w(dir);
  for (const auto& s : samples) w.write(s);
  w.close();
}

std::vector<SceneSample> read_dataset(const std::filesystem::path& dir) {
  DatasetReader r(dir);
  std::vector<SceneSample> out;
  while (auto s = r.next()) out.push_back(std::move(*s));
  return out;
}

}  // namespace blink
