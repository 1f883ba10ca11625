#pragma once

// On-disk formats.
//
// TensorFile: "MCLR" | u32 version (1) | u32 rank | u32 dims[rank] | f32 data,
// every field little-endian, data row-major. Files are written to a sibling
// temporary and renamed into place.
//
// Checkpoint: a directory holding manifest.json, vocab.json and one TensorFile
// per named parameter under params/ (plus Adam moments under optim/ when
// saved with the optimizer).

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "mclr/dataset.hpp"
#include "mclr/diffusion.hpp"
#include "mclr/error.hpp"
#include "mclr/network.hpp"

namespace mclr {

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline Tensor to_tensor(const MatF& m) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

inline MatF to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw DataError("expected a rank-2 tensor, got rank " + std::to_string(t.dims.size()));
  MatF m(t.dims[0], t.dims[1]);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw DataError("tensor: truncated data");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  if (t.data.size() != t.numel()) throw DataError("tensor: data length does not match dims");
  std::string out = "MCLR";
  detail::put_u32(out, kTensorVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  out.reserve(out.size() + 4 * t.data.size());
  for (float f : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  return out;
}

inline Tensor decode_tensor(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "MCLR") != 0) throw DataError("tensor: bad magic");
  std::size_t pos = 4;
  const std::uint32_t version = detail::get_u32(bytes, pos);
  if (version != kTensorVersion) throw DataError("tensor: unsupported version " + std::to_string(version));
  const std::uint32_t rank = detail::get_u32(bytes, pos);
  if (rank > 16) throw DataError("tensor: implausible rank " + std::to_string(rank));
  Tensor t;
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(detail::get_u32(bytes, pos));
  const std::size_t n = t.numel();
  if (bytes.size() - pos != 4 * n) {
    throw DataError("tensor: payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " + std::to_string(4 * n));
  }
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::get_u32(bytes, pos);
    std::memcpy(&t.data[i], &bits, 4);
  }
  return t;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary in the same directory, then renames.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file_atomic(path, encode_tensor(t)); }

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

// ---------------------------------------------------------------------------
// base64 (RFC 4648, padded)
// ---------------------------------------------------------------------------

inline std::string base64_encode(const std::string& in) {
  static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                            static_cast<unsigned char>(in[i + 2]);
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += table[(v >> 6) & 63];
    out += table[v & 63];
  }
  if (i < in.size()) {
    std::uint32_t v = static_cast<unsigned char>(in[i]) << 16;
    if (i + 1 < in.size()) v |= static_cast<unsigned char>(in[i + 1]) << 8;
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += i + 1 < in.size() ? table[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(const std::string& in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw DataError("base64: length is not a multiple of 4");
  std::string out;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=' && i + 4 == in.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(c);
        if (v[k] < 0 || pad > 0) throw DataError("base64: invalid character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((w >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((w >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(w & 0xFF);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus (JSON lines)
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const Sample& s) {
  return {{"prompt", s.prompt},
          {"verb_indices", s.verb_indices},
          {"fps", s.motion.fps},
          {"frames", s.motion.features.rows()},
          {"features", base64_encode(encode_tensor(to_tensor(s.motion.features)))}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  try {
    s.prompt = j.at("prompt").get<std::string>();
    s.verb_indices = j.at("verb_indices").get<std::vector<int>>();
    s.motion.fps = j.at("fps").get<int>();
    s.motion.features = to_matrix(decode_tensor(base64_decode(j.at("features").get<std::string>())));
    if (s.motion.features.rows() != j.at("frames").get<int>()) throw DataError("corpus: frame count mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus: malformed sample: ") + e.what());
  }
  validate(s.motion);
  return s;
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<Sample>& corpus) {
  std::string text;
  for (const auto& s : corpus) text += sample_to_json(s).dump() + "\n";
  write_file_atomic(path, text);
}

inline std::vector<Sample> load_corpus(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON");
    }
    out.push_back(sample_from_json(j));
  }
  if (out.empty()) throw DataError(path.string() + ": empty corpus");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

struct Checkpoint {
  ModelConfig model;
  DiffusionConfig diffusion;
  TrainConfig train;
  Vocabulary vocab = Vocabulary::standard();
  NormStats stats;
  int step = 0;
  std::vector<Parameter<float>> params;  // values only
  std::vector<MatF> adam_m, adam_v;      // empty when not saved
  long long adam_step = 0;
};

inline nlohmann::json vector_json(const Eigen::VectorXf& v) { return std::vector<float>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXf vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<float>>();
  return Eigen::Map<const Eigen::VectorXf>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::string blob_name(const std::string& param) { return param + ".mclr"; }

inline void save_checkpoint(const std::filesystem::path& dir, const Denoiser<float>& model, const NormStats& stats,
                            const DiffusionConfig& diffusion, const TrainConfig& train, int step,
                            const AdamW<float>* optimizer = nullptr,
                            const Vocabulary& vocab = Vocabulary::standard()) {
  std::filesystem::create_directories(dir / "params");
  nlohmann::json table = nlohmann::json::array();
  int i = 0;
  for (const auto& p : model.params()) {
    write_tensor(dir / "params" / blob_name(p.name), to_tensor(p.value));
    table.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"file", "params/" + blob_name(p.name)}});
    if (optimizer != nullptr) {
      auto& opt = const_cast<AdamW<float>&>(*optimizer);
      write_tensor(dir / "optim" / (p.name + ".m.mclr"), to_tensor(opt.first_moments()[static_cast<std::size_t>(i)]));
      write_tensor(dir / "optim" / (p.name + ".v.mclr"), to_tensor(opt.second_moments()[static_cast<std::size_t>(i)]));
    }
    ++i;
  }
  write_file_atomic(dir / "vocab.json", nlohmann::json(vocab.words()).dump() + "\n");
  nlohmann::json manifest = {
      {"format_version", kCheckpointVersion},
      {"model", model.config().to_json()},
      {"diffusion", diffusion.to_json()},
      {"train", train.to_json()},
      {"vocab_hash", hex64(vocab.hash())},
      {"vocab_size", vocab.size()},
      {"attention_layers", model.attention_layers()},
      {"norm", {{"mean", vector_json(stats.mean)}, {"std", vector_json(stats.std)}}},
      {"step", step},
      {"parameters", table},
      {"optimizer", optimizer == nullptr ? nlohmann::json(nullptr) : nlohmann::json({{"step", optimizer->steps()}})},
  };
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("checkpoint directory " + dir.string() + " not found");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception&) {
    throw DataError("checkpoint manifest is not valid JSON");
  }
  Checkpoint ck;
  try {
    if (m.at("format_version").get<std::uint32_t>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    ck.model = ModelConfig::from_json(m.at("model"));
    ck.diffusion = DiffusionConfig::from_json(m.at("diffusion"));
    ck.train = TrainConfig::from_json(m.at("train"));
    ck.vocab = Vocabulary(nlohmann::json::parse(read_file(dir / "vocab.json")).get<std::vector<std::string>>());
    if (hex64(ck.vocab.hash()) != m.at("vocab_hash").get<std::string>()) throw DataError("vocabulary hash mismatch");
    if (ck.vocab.size() != ck.model.vocab_size) throw DataError("vocabulary size does not match the model");
    ck.stats.mean = vector_from_json(m.at("norm").at("mean"));
    ck.stats.std = vector_from_json(m.at("norm").at("std"));
    ck.step = m.at("step").get<int>();

    const Denoiser<float> shape(ck.model, 0);
    const auto& table = m.at("parameters");
    if (static_cast<int>(table.size()) != shape.params().size()) throw DataError("checkpoint parameter count mismatch");
    const bool with_optimizer = !m.at("optimizer").is_null();
    std::size_t i = 0;
    for (const auto& expected : shape.params()) {
      const auto& row = table.at(i++);
      const auto name = row.at("name").get<std::string>();
      const auto dims = row.at("shape").get<std::vector<Eigen::Index>>();
      if (name != expected.name || dims.size() != 2 || dims[0] != expected.value.rows() || dims[1] != expected.value.cols()) {
        throw DataError("checkpoint shape table mismatch at '" + name + "'");
      }
      const std::filesystem::path blob = dir / row.at("file").get<std::string>();
      if (!std::filesystem::exists(blob)) throw DataError("missing parameter blob " + blob.string());
      Parameter<float> p{name, to_matrix(read_tensor(blob)), {}};
      if (p.value.rows() != dims[0] || p.value.cols() != dims[1]) throw DataError("blob shape mismatch for '" + name + "'");
      if (!all_finite(p.value)) throw NumericError("non-finite values in '" + name + "'");
      ck.params.push_back(std::move(p));
      if (with_optimizer) {
        ck.adam_m.push_back(to_matrix(read_tensor(dir / "optim" / (name + ".m.mclr"))));
        ck.adam_v.push_back(to_matrix(read_tensor(dir / "optim" / (name + ".v.mclr"))));
      }
    }
    if (with_optimizer) ck.adam_step = m.at("optimizer").at("step").get<long long>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ck;
}

// Builds a model from a loaded checkpoint.
inline Denoiser<float> instantiate(const Checkpoint& ck) {
  Denoiser<float> model(ck.model, 0);
  std::size_t i = 0;
  for (auto& p : model.params()) p.value = ck.params[i++].value;
  return model;
}

// Copies saved Adam moments into an optimizer built for the same model.
inline void restore_optimizer(const Checkpoint& ck, AdamW<float>& opt) {
  if (ck.adam_m.empty()) return;
  opt.first_moments() = ck.adam_m;
  opt.second_moments() = ck.adam_v;
  opt.set_steps(ck.adam_step);
}

// Stable digest of every parameter value; reported by the service.
inline std::string checkpoint_hash(const Denoiser<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : model.params()) {
    for (char c : p.name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.value.size()) * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return hex64(h);
}

// ---------------------------------------------------------------------------
// Motion export
// ---------------------------------------------------------------------------

inline nlohmann::json export_motion(const MotionSequence& motion) {
  const auto& skel = Skeleton::desk();
  const MatF pos = forward_kinematics(motion.features);
  nlohmann::json positions = nlohmann::json::array();
  for (Eigen::Index f = 0; f < pos.rows(); ++f) {
    nlohmann::json frame = nlohmann::json::array();
    for (int j = 0; j < kJoints; ++j) frame.push_back({pos(f, 3 * j), pos(f, 3 * j + 1), pos(f, 3 * j + 2)});
    positions.push_back(frame);
  }
  nlohmann::json features = nlohmann::json::array();
  for (Eigen::Index f = 0; f < motion.features.rows(); ++f) {
    features.push_back(std::vector<float>(motion.features.row(f).data(), motion.features.row(f).data() + motion.features.cols()));
  }
  return {{"fps", motion.fps},
          {"frames", motion.features.rows()},
          {"joint_names", skel.joint_names},
          {"positions", positions},
          {"features", features}};
}

struct ImportedMotion {
  MotionSequence motion;
  MatF positions;  // frames x (joints * 3)
};

inline ImportedMotion import_motion(const nlohmann::json& j) {
  ImportedMotion out;
  try {
    out.motion.fps = j.at("fps").get<int>();
    const int frames = j.at("frames").get<int>();
    const auto& pos = j.at("positions");
    const auto& feat = j.at("features");
    if (static_cast<int>(pos.size()) != frames || static_cast<int>(feat.size()) != frames) throw DataError("motion: frame count mismatch");
    out.positions.resize(frames, kJoints * 3);
    out.motion.features.resize(frames, kFeatureDim);
    for (int f = 0; f < frames; ++f) {
      if (pos[f].size() != kJoints) throw DataError("motion: wrong joint count");
      for (int k = 0; k < kJoints; ++k) {
        for (int c = 0; c < 3; ++c) out.positions(f, 3 * k + c) = pos[f][k][c].get<float>();
      }
      const auto row = feat[f].get<std::vector<float>>();
      if (static_cast<int>(row.size()) != kFeatureDim) throw DataError("motion: wrong feature width");
      for (int c = 0; c < kFeatureDim; ++c) out.motion.features(f, c) = row[static_cast<std::size_t>(c)];
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("motion: malformed JSON: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention dumps
// ---------------------------------------------------------------------------

inline std::string attention_file_name(AttentionKind kind, int layer, int step, bool conditional) {
  std::ostringstream ss;
  ss << "attn_l" << std::setw(2) << std::setfill('0') << layer << "_s" << std::setw(2) << std::setfill('0') << step << '_'
     << to_string(kind) << '_' << (conditional ? "cond" : "null") << ".mclr";
  return ss.str();
}

// Stacks the per-head pre-edit maps of each (layer, step, pass) into a
// heads x rows x cols tensor and writes one file per group. Returns the paths.
inline std::vector<std::filesystem::path> dump_attention(const std::filesystem::path& dir,
                                                         const std::vector<AttentionRecord>& records) {
  std::map<std::tuple<int, int, bool>, std::vector<const AttentionRecord*>> groups;
  for (const auto& r : records) groups[{r.layer, r.step, r.conditional}].push_back(&r);
  std::vector<std::filesystem::path> written;
  for (const auto& [key, heads] : groups) {
    const auto& first = *heads.front();
    Tensor t;
    t.dims = {static_cast<std::uint32_t>(heads.size()), static_cast<std::uint32_t>(first.map.rows()),
              static_cast<std::uint32_t>(first.map.cols())};
    std::vector<const AttentionRecord*> ordered = heads;
    std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->head < b->head; });
    for (const auto* r : ordered) t.data.insert(t.data.end(), r->map.data(), r->map.data() + r->map.size());
    const auto path = dir / attention_file_name(first.kind, std::get<0>(key), std::get<1>(key), std::get<2>(key));
    write_tensor(path, t);
    written.push_back(path);
  }
  return written;
}

}  // namespace mclr
