#pragma once

// Weight-matrix ingestion: .npy and safetensors readers, parameter-name mapping,
// fused QKV splitting and checkpoint-directory discovery.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "spectral/error.hpp"

namespace spectral {

static_assert(std::endian::native == std::endian::little,
              "tensor readers assume a little-endian host");

enum class MatrixType { Q, K, V, O, MlpUp, MlpDown, FusedQkv, Other };

inline constexpr std::array<MatrixType, 6> kTrackedTypes = {
    MatrixType::Q, MatrixType::K, MatrixType::V,
    MatrixType::O, MatrixType::MlpUp, MatrixType::MlpDown};

inline std::string_view to_string(MatrixType t) {
  switch (t) {
    case MatrixType::Q: return "Q";
    case MatrixType::K: return "K";
    case MatrixType::V: return "V";
    case MatrixType::O: return "O";
    case MatrixType::MlpUp: return "MLP_UP";
    case MatrixType::MlpDown: return "MLP_DOWN";
    case MatrixType::FusedQkv: return "FUSED_QKV";
    case MatrixType::Other: return "OTHER";
  }
  return "OTHER";
}

inline std::optional<MatrixType> parse_matrix_type(std::string_view s) {
  std::string up(s);
  std::transform(up.begin(), up.end(), up.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (up == "Q") return MatrixType::Q;
  if (up == "K") return MatrixType::K;
  if (up == "V") return MatrixType::V;
  if (up == "O") return MatrixType::O;
  if (up == "MLP_UP") return MatrixType::MlpUp;
  if (up == "MLP_DOWN") return MatrixType::MlpDown;
  if (up == "FUSED_QKV") return MatrixType::FusedQkv;
  if (up == "OTHER") return MatrixType::Other;
  return std::nullopt;
}

/// Location of a parameter in the (layer, matrix-type) grid. `fused_slot` is set
/// only for blocks that were split out of a fused QKV projection.
struct ParamCoord {
  int layer = 0;
  MatrixType matrix_type = MatrixType::Other;
  std::optional<MatrixType> fused_slot;

  friend bool operator==(const ParamCoord&, const ParamCoord&) = default;
  friend auto operator<=>(const ParamCoord& a, const ParamCoord& b) {
    auto slot = [](const ParamCoord& c) { return c.fused_slot ? static_cast<int>(*c.fused_slot) : -1; };
    if (auto c = a.layer <=> b.layer; c != 0) return c;
    if (auto c = static_cast<int>(a.matrix_type) <=> static_cast<int>(b.matrix_type); c != 0) return c;
    return slot(a) <=> slot(b);
  }
};

enum class NamingScheme { Custom, Gpt2, Pythia };

inline std::string_view to_string(NamingScheme s) {
  switch (s) {
    case NamingScheme::Custom: return "custom";
    case NamingScheme::Gpt2: return "gpt2";
    case NamingScheme::Pythia: return "pythia";
  }
  return "custom";
}

inline std::optional<NamingScheme> parse_naming_scheme(std::string_view s) {
  std::string low(s);
  std::transform(low.begin(), low.end(), low.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (low == "custom") return NamingScheme::Custom;
  if (low == "gpt2" || low == "gpt-2") return NamingScheme::Gpt2;
  if (low == "pythia" || low == "gpt_neox" || low == "gpt-neox") return NamingScheme::Pythia;
  return std::nullopt;
}

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Immutable named 2-D matrix, stored row-major in 64-bit.
class TensorView {
 public:
  TensorView(std::string name, std::size_t rows, std::size_t cols, std::vector<double> values,
             std::string source_path = {})
      : name_(std::move(name)),
        rows_(rows),
        cols_(cols),
        values_(std::move(values)),
        source_path_(std::move(source_path)) {
    if (rows_ == 0 || cols_ == 0) {
      throw SpectralError(ErrorCode::DimensionMismatch, "tensor '" + name_ + "' has an empty dimension");
    }
    if (values_.size() != rows_ * cols_) {
      throw SpectralError(ErrorCode::DimensionMismatch,
                          "tensor '" + name_ + "' holds " + std::to_string(values_.size()) +
                              " values, expected " + std::to_string(rows_ * cols_));
    }
    for (double v : values_) {
      if (!std::isfinite(v)) {
        throw SpectralError(ErrorCode::NonFiniteValue, "tensor '" + name_ + "' contains NaN or Inf");
      }
    }
  }

  static TensorView from_matrix(std::string name, const Eigen::Ref<const Eigen::MatrixXd>& m,
                                std::string source_path = {}) {
    std::vector<double> values(static_cast<std::size_t>(m.size()));
    Eigen::Map<RowMajorMatrix>(values.data(), m.rows(), m.cols()) = m;
    return TensorView(std::move(name), static_cast<std::size_t>(m.rows()),
                      static_cast<std::size_t>(m.cols()), std::move(values), std::move(source_path));
  }

  const std::string& name() const noexcept { return name_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::string& source_path() const noexcept { return source_path_; }
  double at(std::size_t r, std::size_t c) const { return values_.at(r * cols_ + c); }

  Eigen::Map<const RowMajorMatrix> matrix() const {
    return {values_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

 private:
  std::string name_;
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> values_;
  std::string source_path_;
};

namespace detail {

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SpectralError(ErrorCode::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> buf(size);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  if (!in) throw SpectralError(ErrorCode::Io, "short read on " + path.string());
  return buf;
}

template <typename T>
T read_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename Float>
std::vector<double> widen(const char* p, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = static_cast<double>(read_le<Float>(p + i * sizeof(Float)));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// .npy v1.0

/// Parse an in-memory .npy v1.0 buffer holding a 2-D little-endian f4/f8 array.
inline TensorView parse_npy(std::span<const char> buf, std::string name, std::string source_path = {}) {
  static constexpr char kMagic[] = "\x93NUMPY";
  if (buf.size() < 10 || std::memcmp(buf.data(), kMagic, 6) != 0) {
    throw SpectralError(ErrorCode::MalformedHeader, "missing \\x93NUMPY magic");
  }
  if (buf[6] != 1 || buf[7] != 0) {
    throw SpectralError(ErrorCode::MalformedHeader, "only .npy format version 1.0 is supported");
  }
  const std::size_t header_len = detail::read_le<std::uint16_t>(buf.data() + 8);
  if (10 + header_len > buf.size()) {
    throw SpectralError(ErrorCode::MalformedHeader, "header length exceeds file size");
  }
  const std::string header(buf.data() + 10, header_len);

  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  std::smatch m;
  if (!std::regex_search(header, m, descr_re)) {
    throw SpectralError(ErrorCode::MalformedHeader, "header lacks 'descr'");
  }
  const std::string descr = m[1];
  if (!std::regex_search(header, m, order_re)) {
    throw SpectralError(ErrorCode::MalformedHeader, "header lacks 'fortran_order'");
  }
  if (m[1] == "True") {
    throw SpectralError(ErrorCode::MalformedHeader, "Fortran-ordered arrays are not supported");
  }
  if (!std::regex_search(header, m, shape_re)) {
    throw SpectralError(ErrorCode::MalformedHeader, "header lacks 'shape'");
  }
  std::vector<std::size_t> shape;
  {
    const std::string dims = m[1];
    static const std::regex int_re(R"(\d+)");
    for (auto it = std::sregex_iterator(dims.begin(), dims.end(), int_re); it != std::sregex_iterator(); ++it) {
      shape.push_back(std::stoull(it->str()));
    }
  }

  std::size_t item = 0;
  if (descr == "<f4") {
    item = 4;
  } else if (descr == "<f8") {
    item = 8;
  } else {
    throw SpectralError(ErrorCode::UnsupportedDtype, "dtype '" + descr + "' (expected <f4 or <f8)");
  }
  if (shape.size() != 2) {
    throw SpectralError(ErrorCode::UnsupportedRank,
                        "expected a 2-D array, got rank " + std::to_string(shape.size()));
  }
  const std::size_t count = shape[0] * shape[1];
  const std::size_t offset = 10 + header_len;
  if (buf.size() - offset < count * item) {
    throw SpectralError(ErrorCode::MalformedHeader, "payload shorter than the declared shape");
  }
  auto values = item == 4 ? detail::widen<float>(buf.data() + offset, count)
                          : detail::widen<double>(buf.data() + offset, count);
  return TensorView(std::move(name), shape[0], shape[1], std::move(values), std::move(source_path));
}

inline TensorView load_npy(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  std::string name = path.filename().string();
  if (name.size() > 4 && name.ends_with(".npy")) name.resize(name.size() - 4);
  return parse_npy(buf, std::move(name), path.string());
}

enum class NpyDtype { F4, F8 };

/// Write a .npy v1.0 file; the header is padded so the payload starts on a 64-byte boundary.
inline void write_npy(const std::filesystem::path& path, const TensorView& t, NpyDtype dtype = NpyDtype::F8) {
  std::string header = std::string("{'descr': '") + (dtype == NpyDtype::F4 ? "<f4" : "<f8") +
                       "', 'fortran_order': False, 'shape': (" + std::to_string(t.rows()) + ", " +
                       std::to_string(t.cols()) + "), }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw SpectralError(ErrorCode::Io, "cannot write " + path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double v : t.values()) {
    if (dtype == NpyDtype::F4) {
      const auto f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), 4);
    } else {
      out.write(reinterpret_cast<const char*>(&v), 8);
    }
  }
  if (!out) throw SpectralError(ErrorCode::Io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// safetensors

struct SafetensorsEntry {
  std::string name;
  std::string dtype;
  std::vector<std::size_t> shape;
  std::size_t begin = 0;  // relative to the data section
  std::size_t end = 0;
};

struct SafetensorsIndex {
  std::size_t data_offset = 0;  // 8 + header length
  std::vector<SafetensorsEntry> entries;

  bool extractable(const SafetensorsEntry& e) const { return e.dtype == "F32" && e.shape.size() == 2; }
};

inline std::size_t dtype_size(std::string_view dtype) {
  if (dtype == "F64" || dtype == "I64" || dtype == "U64") return 8;
  if (dtype == "F32" || dtype == "I32" || dtype == "U32") return 4;
  if (dtype == "F16" || dtype == "BF16" || dtype == "I16" || dtype == "U16") return 2;
  if (dtype == "I8" || dtype == "U8" || dtype == "BOOL" || dtype == "F8_E4M3" || dtype == "F8_E5M2") return 1;
  return 0;
}

/// Parse and validate a safetensors header. `file_size` bounds every data range.
inline SafetensorsIndex parse_safetensors_header(std::span<const char> prefix, std::size_t file_size) {
  if (prefix.size() < 8) throw SpectralError(ErrorCode::MalformedContainer, "file shorter than 8 bytes");
  const auto header_len = detail::read_le<std::uint64_t>(prefix.data());
  if (header_len > file_size - 8 || header_len > prefix.size() - 8) {
    throw SpectralError(ErrorCode::MalformedContainer, "header length exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(prefix.begin() + 8, prefix.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw SpectralError(ErrorCode::MalformedContainer, std::string("header is not JSON: ") + e.what());
  }
  if (!header.is_object()) throw SpectralError(ErrorCode::MalformedContainer, "header is not a JSON object");

  SafetensorsIndex index;
  index.data_offset = 8 + header_len;
  const std::size_t data_size = file_size - index.data_offset;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    try {
      SafetensorsEntry e;
      e.name = name;
      e.dtype = info.at("dtype").get<std::string>();
      e.shape = info.at("shape").get<std::vector<std::size_t>>();
      const auto offsets = info.at("data_offsets").get<std::vector<std::size_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1]) {
        throw SpectralError(ErrorCode::MalformedContainer, "bad data_offsets for '" + name + "'");
      }
      e.begin = offsets[0];
      e.end = offsets[1];
      if (e.end > data_size) {
        throw SpectralError(ErrorCode::OffsetOutOfBounds,
                            "tensor '" + name + "' ends at " + std::to_string(e.end) +
                                " but the data section holds " + std::to_string(data_size) + " bytes");
      }
      std::size_t numel = 1;
      for (auto d : e.shape) numel *= d;
      const auto item = dtype_size(e.dtype);
      if (item != 0 && numel * item != e.end - e.begin) {
        throw SpectralError(ErrorCode::MalformedContainer, "byte range of '" + name + "' disagrees with its shape");
      }
      index.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw SpectralError(ErrorCode::MalformedContainer, "entry '" + name + "': " + ex.what());
    }
  }

  std::vector<const SafetensorsEntry*> by_offset;
  for (const auto& e : index.entries) {
    if (e.end > e.begin) by_offset.push_back(&e);
  }
  std::sort(by_offset.begin(), by_offset.end(),
            [](const auto* a, const auto* b) { return a->begin < b->begin; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i]->begin < by_offset[i - 1]->end) {
      throw SpectralError(ErrorCode::OverlappingRanges,
                          "'" + by_offset[i - 1]->name + "' overlaps '" + by_offset[i]->name + "'");
    }
  }
  return index;
}

inline SafetensorsIndex read_safetensors_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SpectralError(ErrorCode::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  char len_bytes[8] = {};
  in.read(len_bytes, 8);
  if (!in) throw SpectralError(ErrorCode::MalformedContainer, "file shorter than 8 bytes");
  const auto header_len = detail::read_le<std::uint64_t>(len_bytes);
  if (header_len > file_size - 8) {
    throw SpectralError(ErrorCode::MalformedContainer, "header length exceeds file size");
  }
  std::vector<char> prefix(8 + header_len);
  std::memcpy(prefix.data(), len_bytes, 8);
  in.read(prefix.data() + 8, static_cast<std::streamsize>(header_len));
  return parse_safetensors_header(prefix, file_size);
}

namespace detail {

inline TensorView read_safetensors_entry(std::ifstream& in, const SafetensorsIndex& index,
                                         const SafetensorsEntry& e, const std::string& source) {
  std::vector<char> bytes(e.end - e.begin);
  in.seekg(static_cast<std::streamoff>(index.data_offset + e.begin));
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw SpectralError(ErrorCode::Io, "short read of '" + e.name + "' in " + source);
  return TensorView(e.name, e.shape[0], e.shape[1], widen<float>(bytes.data(), e.shape[0] * e.shape[1]), source);
}

}  // namespace detail

struct SafetensorsContents {
  std::map<std::string, TensorView> tensors;
  std::vector<std::string> skipped;  // non-F32 or non-2-D entries
};

inline SafetensorsContents load_safetensors(const std::filesystem::path& path) {
  const auto index = read_safetensors_index(path);
  std::ifstream in(path, std::ios::binary);
  SafetensorsContents out;
  for (const auto& e : index.entries) {
    if (!index.extractable(e)) {
      out.skipped.push_back(e.name);
      continue;
    }
    out.tensors.emplace(e.name, detail::read_safetensors_entry(in, index, e, path.string()));
  }
  return out;
}

/// Load one named 2-D F32 tensor without materializing the rest of the file.
inline TensorView load_safetensors_tensor(const std::filesystem::path& path, const std::string& name) {
  const auto index = read_safetensors_index(path);
  auto it = std::find_if(index.entries.begin(), index.entries.end(),
                         [&](const auto& e) { return e.name == name; });
  if (it == index.entries.end()) {
    throw SpectralError(ErrorCode::MalformedContainer, "no tensor '" + name + "' in " + path.string());
  }
  if (it->shape.size() != 2) throw SpectralError(ErrorCode::UnsupportedRank, "'" + name + "' is not 2-D");
  if (it->dtype != "F32") throw SpectralError(ErrorCode::UnsupportedDtype, "'" + name + "' has dtype " + it->dtype);
  std::ifstream in(path, std::ios::binary);
  return detail::read_safetensors_entry(in, index, *it, path.string());
}

// ---------------------------------------------------------------------------
// Parameter names

/// Map a checkpoint parameter name to its (layer, type) coordinate. Embeddings,
/// norms, biases and anything else outside the tracked set map to nullopt.
inline std::optional<ParamCoord> map_parameter_name(std::string_view name, NamingScheme scheme) {
  struct Rule {
    std::regex pattern;
    MatrixType type;
  };
  // group 1 is always the layer index
  static const std::vector<Rule> custom = {
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:attn|attention|self_attn)\.(?:q_proj|c_q|wq|query)\.weight$)"), MatrixType::Q},
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:attn|attention|self_attn)\.(?:k_proj|c_k|wk|key)\.weight$)"), MatrixType::K},
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:attn|attention|self_attn)\.(?:v_proj|c_v|wv|value)\.weight$)"), MatrixType::V},
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:attn|attention|self_attn)\.(?:o_proj|out_proj|c_proj|wo)\.weight$)"), MatrixType::O},
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:attn|attention|self_attn)\.(?:qkv|qkv_proj|c_attn)\.weight$)"), MatrixType::FusedQkv},
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:mlp|ffn|feed_forward)\.(?:up_proj|c_fc|fc1|w1)\.weight$)"), MatrixType::MlpUp},
      {std::regex(R"(^(?:.*\.)?(?:layers|blocks|h)\.(\d+)\.(?:mlp|ffn|feed_forward)\.(?:down_proj|c_proj|fc2|w2)\.weight$)"), MatrixType::MlpDown},
  };
  static const std::vector<Rule> gpt2 = {
      {std::regex(R"(^(?:transformer\.)?h\.(\d+)\.attn\.c_attn\.weight$)"), MatrixType::FusedQkv},
      {std::regex(R"(^(?:transformer\.)?h\.(\d+)\.attn\.c_proj\.weight$)"), MatrixType::O},
      {std::regex(R"(^(?:transformer\.)?h\.(\d+)\.mlp\.c_fc\.weight$)"), MatrixType::MlpUp},
      {std::regex(R"(^(?:transformer\.)?h\.(\d+)\.mlp\.c_proj\.weight$)"), MatrixType::MlpDown},
  };
  static const std::vector<Rule> pythia = {
      {std::regex(R"(^(?:gpt_neox\.)?layers\.(\d+)\.attention\.query_key_value\.weight$)"), MatrixType::FusedQkv},
      {std::regex(R"(^(?:gpt_neox\.)?layers\.(\d+)\.attention\.dense\.weight$)"), MatrixType::O},
      {std::regex(R"(^(?:gpt_neox\.)?layers\.(\d+)\.mlp\.dense_h_to_4h\.weight$)"), MatrixType::MlpUp},
      {std::regex(R"(^(?:gpt_neox\.)?layers\.(\d+)\.mlp\.dense_4h_to_h\.weight$)"), MatrixType::MlpDown},
  };

  const auto& rules = scheme == NamingScheme::Gpt2 ? gpt2 : scheme == NamingScheme::Pythia ? pythia : custom;
  const std::string s(name);
  std::smatch m;
  for (const auto& rule : rules) {
    if (std::regex_match(s, m, rule.pattern)) {
      const auto digits = m[1].str();
      if (digits.size() > 6) return std::nullopt;
      return ParamCoord{std::stoi(digits), rule.type, std::nullopt};
    }
  }
  return std::nullopt;
}

/// Split a fused QKV projection into its Q, K and V blocks.
///
/// Layouts per scheme:
///  - GPT2 (Conv1D, stored in x out): columns [0,d), [d,2d), [2d,3d).
///  - PYTHIA (Linear, out x in): rows grouped per head as [head][q|k|v][head_dim],
///    so each output gathers `n_heads` stripes of `d_model / n_heads` rows.
///  - CUSTOM (Linear, out x in): rows [0,d), [d,2d), [2d,3d).
inline std::array<TensorView, 3> split_fused_qkv(const TensorView& t, NamingScheme scheme, std::size_t d_model,
                                                 std::size_t n_heads = 1) {
  const bool by_columns = scheme == NamingScheme::Gpt2;
  const std::size_t fused = by_columns ? t.cols() : t.rows();
  if (d_model == 0 || fused != 3 * d_model) {
    throw SpectralError(ErrorCode::DimensionMismatch,
                        "fused dimension " + std::to_string(fused) + " != 3 x d_model (" +
                            std::to_string(3 * d_model) + ")");
  }
  const auto src = t.matrix();
  static constexpr std::array<const char*, 3> kSuffix = {".q", ".k", ".v"};

  auto make = [&](std::size_t slot, const RowMajorMatrix& block) {
    return TensorView::from_matrix(t.name() + kSuffix[slot], block, t.source_path());
  };

  if (by_columns) {
    const auto d = static_cast<Eigen::Index>(d_model);
    return {make(0, src.middleCols(0, d)), make(1, src.middleCols(d, d)), make(2, src.middleCols(2 * d, d))};
  }
  if (scheme == NamingScheme::Pythia) {
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw SpectralError(ErrorCode::DimensionMismatch,
                          "d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    }
    const auto hd = static_cast<Eigen::Index>(d_model / n_heads);
    std::array<RowMajorMatrix, 3> blocks;
    for (auto& b : blocks) b.resize(static_cast<Eigen::Index>(d_model), src.cols());
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n_heads); ++h) {
      for (int slot = 0; slot < 3; ++slot) {
        blocks[slot].middleRows(h * hd, hd) = src.middleRows((3 * h + slot) * hd, hd);
      }
    }
    return {make(0, blocks[0]), make(1, blocks[1]), make(2, blocks[2])};
  }
  const auto d = static_cast<Eigen::Index>(d_model);
  return {make(0, src.middleRows(0, d)), make(1, src.middleRows(d, d)), make(2, src.middleRows(2 * d, d))};
}

// ---------------------------------------------------------------------------
// Run manifests and checkpoint discovery

struct Manifest {
  std::string run_id;
  int layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  NamingScheme scheme = NamingScheme::Custom;
  std::int64_t svd_interval = 0;
};

inline Manifest parse_manifest(const nlohmann::json& j) {
  try {
    Manifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.layers = j.at("layers").get<int>();
    m.d_model = j.value("d_model", std::size_t{0});
    m.n_heads = j.value("n_heads", std::size_t{1});
    const auto scheme = j.value("scheme", std::string("custom"));
    auto parsed = parse_naming_scheme(scheme);
    if (!parsed) throw SpectralError(ErrorCode::MalformedManifest, "unknown scheme '" + scheme + "'");
    m.scheme = *parsed;
    m.svd_interval = j.value("svd_interval", std::int64_t{0});
    if (m.layers <= 0) throw SpectralError(ErrorCode::MalformedManifest, "'layers' must be positive");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SpectralError(ErrorCode::MalformedManifest, e.what());
  }
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SpectralError(ErrorCode::Io, "cannot open manifest " + path.string());
  try {
    return parse_manifest(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw SpectralError(ErrorCode::MalformedManifest, e.what());
  }
}

/// Where a tensor lives: a .npy file, or a named entry inside a safetensors file.
struct FileLocator {
  std::filesystem::path path;
  std::string tensor_name;
  bool safetensors = false;
};

struct CheckpointEntry {
  ParamCoord coord;
  FileLocator locator;
};

struct CheckpointSeries {
  std::string run_id;
  std::vector<std::int64_t> steps;
  std::map<std::int64_t, std::vector<CheckpointEntry>> entries;
  NamingScheme naming_scheme = NamingScheme::Custom;
};

inline TensorView load_tensor(const FileLocator& loc) {
  if (loc.safetensors) return load_safetensors_tensor(loc.path, loc.tensor_name);
  auto t = load_npy(loc.path);
  return TensorView(loc.tensor_name, t.rows(), t.cols(), {t.values().begin(), t.values().end()}, t.source_path());
}

namespace detail {

inline std::optional<std::int64_t> parse_step_name(std::string stem) {
  static const std::regex step_re(R"(^step_(\d+)$)");
  std::smatch m;
  if (!std::regex_match(stem, m, step_re)) return std::nullopt;
  return std::stoll(m[1].str());
}

inline void add_entries(std::vector<CheckpointEntry>& out, const std::filesystem::path& file, NamingScheme scheme) {
  if (file.extension() == ".npy") {
    const auto name = file.stem().string();
    if (auto coord = map_parameter_name(name, scheme)) out.push_back({*coord, {file, name, false}});
  } else if (file.extension() == ".safetensors") {
    for (const auto& e : read_safetensors_index(file).entries) {
      if (auto coord = map_parameter_name(e.name, scheme)) out.push_back({*coord, {file, e.name, true}});
    }
  }
}

}  // namespace detail

/// Discover checkpoints under `root`: either `step_<N>/` directories holding
/// `.npy` / `.safetensors` files, or `step_<N>.safetensors` files.
inline CheckpointSeries discover_series(const Manifest& manifest, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw SpectralError(ErrorCode::Io, "checkpoint root " + root.string() + " is not a directory");
  CheckpointSeries series;
  series.run_id = manifest.run_id;
  series.naming_scheme = manifest.scheme;
  for (const auto& item : fs::directory_iterator(root)) {
    const auto& p = item.path();
    if (item.is_directory()) {
      auto step = detail::parse_step_name(p.filename().string());
      if (!step) continue;
      std::vector<fs::path> files;
      for (const auto& f : fs::directory_iterator(p)) {
        if (f.is_regular_file()) files.push_back(f.path());
      }
      std::sort(files.begin(), files.end());
      auto& entries = series.entries[*step];
      for (const auto& f : files) detail::add_entries(entries, f, manifest.scheme);
    } else if (item.is_regular_file() && p.extension() == ".safetensors") {
      auto step = detail::parse_step_name(p.stem().string());
      if (!step) continue;
      detail::add_entries(series.entries[*step], p, manifest.scheme);
    }
  }
  for (auto& [step, entries] : series.entries) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.coord < b.coord; });
    series.steps.push_back(step);
  }
  return series;
}

}  // namespace spectral
