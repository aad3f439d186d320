#pragma once

// Single-file container used for checkpoints, calibration batches and
// quantized artifacts:
//
//   "RPIQ" | u32 format_version | u64 header_length | header | blob
//
// The header is UTF-8 JSON with a fixed key order; every binary payload lives
// in the blob and is addressed by (blob_offset, blob_length). All integers and
// floats are little-endian. The header carries a CRC-32 of the blob.

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/crc.hpp>
#include <json.hpp>

#include "rpiq/error.hpp"
#include "rpiq/numerics.hpp"
#include "rpiq/quantgrid.hpp"

namespace rpiq {

inline constexpr std::array<char, 4> kMagic = {'R', 'P', 'I', 'Q'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kPreambleBytes = 4 + 4 + 8;

using Json = nlohmann::ordered_json;

namespace io {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::vector<std::uint8_t>& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }
inline double get_f64(const std::uint8_t* p) { return std::bit_cast<double>(get_u64(p)); }

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

// Writes to a sibling temporary and renames it over the destination.
inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// Accumulates a header and blob, then writes the file in one go.
class ContainerWriter {
 public:
  explicit ContainerWriter(std::string kind) {
    header_["format_version"] = kFormatVersion;
    header_["kind"] = std::move(kind);
  }

  Json& header() { return header_; }

  // Appends raw bytes to the blob and returns their offset.
  std::uint64_t append(const std::vector<std::uint8_t>& bytes) {
    const std::uint64_t offset = blob_.size();
    blob_.insert(blob_.end(), bytes.begin(), bytes.end());
    return offset;
  }

  std::vector<std::uint8_t> serialize() {
    header_["blob_length"] = blob_.size();
    header_["blob_crc32"] = crc32(blob_.data(), blob_.size());
    const std::string text = header_.dump();
    std::vector<std::uint8_t> out;
    out.reserve(kPreambleBytes + text.size() + blob_.size());
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    put_u32(out, kFormatVersion);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob_.begin(), blob_.end());
    return out;
  }

  void write(const std::filesystem::path& path) { write_file(path, serialize()); }

 private:
  Json header_;
  std::vector<std::uint8_t> blob_;
};

// Opens a container, validates preamble, version, entry bounds and checksum,
// then serves blob ranges on demand without loading the whole blob.
class ContainerReader {
 public:
  ContainerReader(const std::filesystem::path& path, const std::string& expected_kind)
      : path_(path), file_(path, std::ios::binary) {
    if (!file_) throw IoError("cannot open " + path.string());
    std::array<std::uint8_t, kPreambleBytes> pre{};
    if (!file_.read(reinterpret_cast<char*>(pre.data()), pre.size())) {
      throw CorruptFileError(path.string() + ": truncated preamble");
    }
    if (std::memcmp(pre.data(), kMagic.data(), kMagic.size()) != 0) {
      throw CorruptFileError(path.string() + ": bad magic");
    }
    const std::uint32_t version = get_u32(pre.data() + 4);
    if (version != kFormatVersion) {
      throw VersionError(path.string() + ": unsupported format_version " + std::to_string(version));
    }
    const std::uint64_t header_length = get_u64(pre.data() + 8);
    const auto file_size = std::filesystem::file_size(path);
    if (kPreambleBytes + header_length > file_size) {
      throw CorruptFileError(path.string() + ": truncated header");
    }
    std::string text(header_length, '\0');
    file_.read(text.data(), static_cast<std::streamsize>(header_length));
    try {
      header_ = Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError(path.string() + ": header does not parse: " + e.what());
    }
    try {
      if (header_.at("format_version").get<std::uint32_t>() != version) {
        throw CorruptFileError(path.string() + ": header version disagrees with preamble");
      }
      const auto kind = header_.at("kind").get<std::string>();
      if (kind != expected_kind) {
        throw CorruptFileError(path.string() + ": expected a " + expected_kind + " file, found " + kind);
      }
      blob_start_ = kPreambleBytes + header_length;
      blob_size_ = file_size - blob_start_;
      declared_blob_ = header_.at("blob_length").get<std::uint64_t>();
      declared_crc_ = header_.at("blob_crc32").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError(path.string() + ": malformed header: " + e.what());
    }
  }

  const Json& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }

  // Every (offset, length) must fit the blob actually on disk.
  void require_range(const std::string& what, std::uint64_t offset, std::uint64_t length) const {
    if (offset + length > blob_size_ || offset + length < offset) {
      throw CorruptFileError(path_.string() + ": blob truncated inside " + what);
    }
  }

  void verify_checksum() {
    if (declared_blob_ != blob_size_) {
      throw CorruptFileError(path_.string() + ": blob is " + std::to_string(blob_size_) +
                             " bytes, header declares " + std::to_string(declared_blob_));
    }
    boost::crc_32_type crc;
    std::vector<char> chunk(1 << 16);
    file_.clear();
    file_.seekg(static_cast<std::streamoff>(blob_start_));
    std::uint64_t left = blob_size_;
    while (left > 0) {
      const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(left, chunk.size()));
      if (!file_.read(chunk.data(), static_cast<std::streamsize>(n))) {
        throw CorruptFileError(path_.string() + ": short read");
      }
      crc.process_bytes(chunk.data(), n);
      left -= n;
    }
    if (crc.checksum() != declared_crc_) throw CorruptFileError(path_.string() + ": checksum mismatch");
  }

  std::vector<std::uint8_t> read(std::uint64_t offset, std::uint64_t length) {
    require_range("read", offset, length);
    std::vector<std::uint8_t> out(length);
    file_.clear();
    file_.seekg(static_cast<std::streamoff>(blob_start_ + offset));
    if (!file_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(length))) {
      throw CorruptFileError(path_.string() + ": short read");
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  std::ifstream file_;
  Json header_;
  std::uint64_t blob_start_ = 0;
  std::uint64_t blob_size_ = 0;
  std::uint64_t declared_blob_ = 0;
  std::uint32_t declared_crc_ = 0;
};

inline std::vector<std::uint8_t> encode_f32(const Matrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(m.size() * 4);
  for (double v : m.values()) put_f32(out, static_cast<float>(v));
  return out;
}

inline std::vector<std::uint8_t> encode_f64(const Matrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(m.size() * 8);
  for (double v : m.values()) put_f64(out, v);
  return out;
}

inline Matrix decode_matrix(const std::vector<std::uint8_t>& bytes, std::size_t rows, std::size_t cols,
                            const std::string& dtype) {
  const std::size_t width = dtype == "f32" ? 4 : 8;
  std::vector<double> data(rows * cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = width == 4 ? static_cast<double>(get_f32(bytes.data() + 4 * i)) : get_f64(bytes.data() + 8 * i);
  }
  return Matrix(rows, cols, std::move(data));
}

}  // namespace io

// ---------------------------------------------------------------------------
// Matrix collections: checkpoints and calibration batches.

struct LayerRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string dtype = "f32";
  std::uint64_t blob_offset = 0;
  std::uint64_t blob_length = 0;

  bool operator==(const LayerRecord&) const = default;
};

struct ModelManifest {
  std::uint32_t format_version = kFormatVersion;
  std::vector<LayerRecord> layers;
};

struct NamedMatrix {
  std::string name;
  Matrix value;
};

inline constexpr const char* kCheckpointKind = "checkpoint";
inline constexpr const char* kCalibrationKind = "calibration";
inline constexpr const char* kQuantizedKind = "quantized";

// Matrices are stored as f32 row-major.
inline void save_matrices(const std::filesystem::path& path, const std::string& kind,
                          const std::vector<NamedMatrix>& matrices) {
  io::ContainerWriter w(kind);
  Json layers = Json::array();
  for (const auto& [name, m] : matrices) {
    for (const auto& l : layers) {
      if (l["name"] == name) throw ArgumentError("duplicate layer name " + name);
    }
    const auto bytes = io::encode_f32(m);
    Json rec;
    rec["name"] = name;
    rec["rows"] = m.rows();
    rec["cols"] = m.cols();
    rec["dtype"] = "f32";
    rec["blob_offset"] = w.append(bytes);
    rec["blob_length"] = bytes.size();
    layers.push_back(std::move(rec));
  }
  w.header()["layers"] = std::move(layers);
  w.write(path);
}

// Lazily reads matrices out of a checkpoint or calibration container.
class MatrixFile {
 public:
  MatrixFile(const std::filesystem::path& path, const std::string& kind) : reader_(path, kind) {
    try {
      for (const auto& rec : reader_.header().at("layers")) {
        LayerRecord r;
        r.name = rec.at("name").get<std::string>();
        r.rows = rec.at("rows").get<std::size_t>();
        r.cols = rec.at("cols").get<std::size_t>();
        r.dtype = rec.at("dtype").get<std::string>();
        r.blob_offset = rec.at("blob_offset").get<std::uint64_t>();
        r.blob_length = rec.at("blob_length").get<std::uint64_t>();
        manifest_.layers.push_back(std::move(r));
      }
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError(path.string() + ": malformed layer record: " + e.what());
    }
    std::uint64_t prev_end = 0;
    for (std::size_t i = 0; i < manifest_.layers.size(); ++i) {
      const auto& r = manifest_.layers[i];
      if (r.dtype != "f32") throw CorruptFileError(path.string() + ": layer " + r.name + " has dtype " + r.dtype);
      if (r.blob_length != r.rows * r.cols * 4) {
        throw CorruptFileError(path.string() + ": layer " + r.name + " length disagrees with its shape");
      }
      if (r.blob_offset < prev_end) {
        throw CorruptFileError(path.string() + ": layer " + r.name + " overlaps its predecessor");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (manifest_.layers[j].name == r.name) throw CorruptFileError(path.string() + ": duplicate layer " + r.name);
      }
      reader_.require_range("layer " + r.name, r.blob_offset, r.blob_length);
      prev_end = r.blob_offset + r.blob_length;
    }
    reader_.verify_checksum();
  }

  const ModelManifest& manifest() const noexcept { return manifest_; }
  std::size_t size() const noexcept { return manifest_.layers.size(); }

  Matrix load(std::size_t i) {
    const auto& r = manifest_.layers.at(i);
    return io::decode_matrix(reader_.read(r.blob_offset, r.blob_length), r.rows, r.cols, "f32");
  }

 private:
  io::ContainerReader reader_;
  ModelManifest manifest_;
};

struct Checkpoint {
  ModelManifest manifest;
  std::vector<Matrix> layers;
};

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedMatrix>& layers) {
  save_matrices(path, kCheckpointKind, layers);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  MatrixFile file(path, kCheckpointKind);
  Checkpoint ckpt{file.manifest(), {}};
  for (std::size_t i = 0; i < file.size(); ++i) ckpt.layers.push_back(file.load(i));
  return ckpt;
}

// ---------------------------------------------------------------------------
// Quantized artifacts.

struct TraceSummary {
  double gamma_init = 0.0;
  double gamma_final = 0.0;
  std::size_t iterations = 0;
  bool stopped_early = false;

  bool operator==(const TraceSummary&) const = default;
};

struct StoredSnapshot {
  Matrix x_orig;
  Matrix y_orig;

  bool operator==(const StoredSnapshot&) const = default;
};

struct QuantizedLayer {
  std::string name;
  QuantGrid grid;
  PackedBlock codes;
  TraceSummary trace;
  std::optional<StoredSnapshot> snapshot;

  Matrix dequantized() const { return decode(unpack(codes), grid); }

  bool operator==(const QuantizedLayer&) const = default;
};

struct QuantizedArtifact {
  std::vector<QuantizedLayer> layers;

  bool operator==(const QuantizedArtifact&) const = default;
};

namespace io {

inline std::vector<std::uint8_t> encode_grid(const QuantGrid& grid) {
  std::vector<std::uint8_t> out;
  out.reserve(grid.params().size() * 5);
  for (const auto& p : grid.params()) {
    put_f32(out, static_cast<float>(p.scale));
    out.push_back(static_cast<std::uint8_t>(p.zero_point));
  }
  return out;
}

inline Json matrix_ref(ContainerWriter& w, const Matrix& m) {
  const auto bytes = encode_f64(m);
  Json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["dtype"] = "f64";
  j["blob_offset"] = w.append(bytes);
  j["blob_length"] = bytes.size();
  return j;
}

}  // namespace io

inline std::vector<std::uint8_t> serialize_quantized(const QuantizedArtifact& artifact) {
  io::ContainerWriter w(kQuantizedKind);
  Json layers = Json::array();
  for (const auto& layer : artifact.layers) {
    if (layer.codes.bits != layer.grid.bits() || layer.codes.count != layer.grid.rows() * layer.grid.cols()) {
      throw ArgumentError("save_quantized: codes of layer " + layer.name + " do not match its grid");
    }
    Json rec;
    rec["name"] = layer.name;
    rec["rows"] = layer.grid.rows();
    rec["cols"] = layer.grid.cols();
    rec["bits"] = layer.grid.bits();
    rec["group_size"] = layer.grid.group_size();
    const auto grid_bytes = io::encode_grid(layer.grid);
    rec["grid_offset"] = w.append(grid_bytes);
    rec["grid_length"] = grid_bytes.size();
    rec["codes_offset"] = w.append(layer.codes.bytes);
    rec["codes_length"] = layer.codes.bytes.size();
    Json trace;
    trace["gamma_init"] = layer.trace.gamma_init;
    trace["gamma_final"] = layer.trace.gamma_final;
    trace["iterations"] = layer.trace.iterations;
    trace["stopped_early"] = layer.trace.stopped_early;
    rec["trace"] = std::move(trace);
    if (layer.snapshot) {
      Json snap;
      snap["x_orig"] = io::matrix_ref(w, layer.snapshot->x_orig);
      snap["y_orig"] = io::matrix_ref(w, layer.snapshot->y_orig);
      rec["snapshot"] = std::move(snap);
    }
    layers.push_back(std::move(rec));
  }
  w.header()["layers"] = std::move(layers);
  return w.serialize();
}

inline void save_quantized(const QuantizedArtifact& artifact, const std::filesystem::path& path) {
  io::write_file(path, serialize_quantized(artifact));
}

inline QuantizedArtifact load_quantized(const std::filesystem::path& path) {
  io::ContainerReader reader(path, kQuantizedKind);
  QuantizedArtifact artifact;
  try {
    // Bounds first so a truncated file names the offending layer.
    for (const auto& rec : reader.header().at("layers")) {
      const auto name = rec.at("name").get<std::string>();
      reader.require_range("layer " + name + " grid", rec.at("grid_offset").get<std::uint64_t>(),
                           rec.at("grid_length").get<std::uint64_t>());
      reader.require_range("layer " + name + " codes", rec.at("codes_offset").get<std::uint64_t>(),
                           rec.at("codes_length").get<std::uint64_t>());
    }
    reader.verify_checksum();
    for (const auto& rec : reader.header().at("layers")) {
      QuantizedLayer layer;
      layer.name = rec.at("name").get<std::string>();
      const auto rows = rec.at("rows").get<std::size_t>();
      const auto cols = rec.at("cols").get<std::size_t>();
      const auto bits = rec.at("bits").get<int>();
      const auto group_size = rec.at("group_size").get<std::size_t>();
      const auto grid_bytes =
          reader.read(rec.at("grid_offset").get<std::uint64_t>(), rec.at("grid_length").get<std::uint64_t>());
      if (grid_bytes.size() % 5 != 0) throw CorruptFileError(path.string() + ": grid payload of " + layer.name);
      std::vector<GroupParams> params;
      for (std::size_t off = 0; off < grid_bytes.size(); off += 5) {
        params.push_back({static_cast<double>(io::get_f32(grid_bytes.data() + off)), grid_bytes[off + 4], bits});
      }
      try {
        layer.grid = QuantGrid(rows, cols, bits, group_size, std::move(params));
      } catch (const Error& e) {
        throw CorruptFileError(path.string() + ": layer " + layer.name + ": " + e.what());
      }
      layer.codes.bits = bits;
      layer.codes.count = rows * cols;
      layer.codes.bytes =
          reader.read(rec.at("codes_offset").get<std::uint64_t>(), rec.at("codes_length").get<std::uint64_t>());
      if (layer.codes.bytes.size() != packed_size(layer.codes.count, bits)) {
        throw CorruptFileError(path.string() + ": code payload size of " + layer.name);
      }
      const auto& tr = rec.at("trace");
      layer.trace.gamma_init = tr.at("gamma_init").get<double>();
      layer.trace.gamma_final = tr.at("gamma_final").get<double>();
      layer.trace.iterations = tr.at("iterations").get<std::size_t>();
      layer.trace.stopped_early = tr.at("stopped_early").get<bool>();
      if (rec.contains("snapshot")) {
        auto load_ref = [&](const Json& j) {
          const auto off = j.at("blob_offset").get<std::uint64_t>();
          const auto len = j.at("blob_length").get<std::uint64_t>();
          const auto r = j.at("rows").get<std::size_t>();
          const auto c = j.at("cols").get<std::size_t>();
          if (len != r * c * 8) throw CorruptFileError(path.string() + ": snapshot size of " + layer.name);
          return io::decode_matrix(reader.read(off, len), r, c, "f64");
        };
        const auto& snap = rec.at("snapshot");
        layer.snapshot = StoredSnapshot{load_ref(snap.at("x_orig")), load_ref(snap.at("y_orig"))};
      }
      artifact.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(path.string() + ": malformed header: " + e.what());
  }
  return artifact;
}

}  // namespace rpiq
