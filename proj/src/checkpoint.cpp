#include "avatar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "avatar/errors.hpp"

namespace av {

static_assert(std::endian::native == std::endian::little, "raw tensor files assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

void write_file_atomic(const fs::path& file, const std::string& bytes) {
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw IoError("short write to " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename " + tmp.string() + " to " + file.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_raw_f32(const fs::path& file, std::span<const float> values) {
  std::string bytes(values.size() * sizeof(float), '\0');
  std::memcpy(bytes.data(), values.data(), bytes.size());
  write_file_atomic(file, bytes);
}

std::vector<float> read_raw_f32(const fs::path& file, std::size_t expected_count) {
  const std::string bytes = read_file(file);
  if (bytes.size() != expected_count * sizeof(float))
    throw IoError(file.string() + ": expected " + std::to_string(expected_count * sizeof(float)) + " bytes, found " +
                  std::to_string(bytes.size()));
  std::vector<float> v(expected_count);
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

void save_checkpoint(const fs::path& dir, const NamedTensors& tensors) {
  fs::create_directories(dir);
  json index = json::object();
  for (const auto& [name, t] : tensors) {
    if (index.contains(name)) throw std::invalid_argument("duplicate checkpoint tensor name " + name);
    const std::string file = name + ".bin";
    std::string bytes;
    if (t.dtype() == ad::DType::F32) {
      auto d = t.data<float>();
      bytes.assign(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
    } else {
      auto d = t.data<double>();
      bytes.assign(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    }
    write_file_atomic(dir / file, bytes);
    index[name] = {{"shape", t.shape()}, {"dtype", std::string(ad::dtype_name(t.dtype()))}, {"file", file}};
  }
  write_file_atomic(dir / "index.json", index.dump(2) + "\n");
}

std::map<std::string, ad::Tensor> load_checkpoint(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path)) throw IoError("checkpoint index not found: " + index_path.string());
  json index;
  try {
    index = json::parse(read_file(index_path));
  } catch (const json::parse_error& e) {
    throw SchemaError(index_path.string() + ": " + e.what());
  }
  std::map<std::string, ad::Tensor> out;
  for (const auto& [name, entry] : index.items()) {
    if (!entry.contains("shape") || !entry.contains("dtype") || !entry.contains("file"))
      throw SchemaError(index_path.string() + ": entry '" + name + "' needs shape, dtype and file");
    const auto shape = entry["shape"].get<ad::Shape>();
    const auto dtype = entry["dtype"].get<std::string>();
    const std::string bytes = read_file(dir / entry["file"].get<std::string>());
    const std::size_t n = ad::numel_of(shape);
    if (dtype == "f32") {
      if (bytes.size() != n * sizeof(float)) throw IoError("checkpoint tensor '" + name + "' has wrong byte size");
      std::vector<float> v(n);
      std::memcpy(v.data(), bytes.data(), bytes.size());
      out.emplace(name, ad::Tensor(shape, std::move(v)));
    } else if (dtype == "f64") {
      if (bytes.size() != n * sizeof(double)) throw IoError("checkpoint tensor '" + name + "' has wrong byte size");
      std::vector<double> v(n);
      std::memcpy(v.data(), bytes.data(), bytes.size());
      out.emplace(name, ad::Tensor(shape, std::move(v)));
    } else {
      throw SchemaError(index_path.string() + ": entry '" + name + "' has unknown dtype '" + dtype + "'");
    }
  }
  return out;
}

}  // namespace av
