#include "ctsft/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "ctsft/errors.hpp"
#include "ctsft/hash.hpp"

namespace ctsft {

namespace fs = std::filesystem;

const std::string& TensorFile::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) {
      return v;
    }
  }
  throw IoError("manifest has no '" + key + "' entry");
}

const NamedTensor& TensorFile::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) {
      return t;
    }
  }
  throw IoError("manifest has no tensor '" + name + "'");
}

void write_tensor_file(const fs::path& manifest, const TensorFile& file) {
  const fs::path blob = fs::path(manifest.string() + ".bin");
  if (manifest.has_parent_path()) {
    fs::create_directories(manifest.parent_path());
  }
  std::ofstream data(blob, std::ios::binary | std::ios::trunc);
  std::ofstream text(manifest, std::ios::trunc);
  if (!data || !text) {
    throw IoError("cannot write " + manifest.string());
  }
  text << "# ctsft tensor manifest v1\n";
  text << "blob " << blob.filename().string() << "\n";
  for (const auto& [k, v] : file.metadata) {
    text << "meta " << k << " " << v << "\n";
  }
  std::uint64_t offset = 0;
  for (const auto& t : file.tensors) {
    if (t.data.size() != static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols)) {
      throw IoError("tensor '" + t.name + "' size does not match its shape");
    }
    const std::uint64_t length = t.data.size() * 4;
    text << "tensor " << t.name << " " << t.rows << " " << t.cols << " " << offset << " " << length << "\n";
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      const char le[4] = {static_cast<char>(bits & 0xFFU), static_cast<char>((bits >> 8U) & 0xFFU),
                          static_cast<char>((bits >> 16U) & 0xFFU), static_cast<char>((bits >> 24U) & 0xFFU)};
      data.write(le, 4);
    }
    offset += length;
  }
  if (!data || !text) {
    throw IoError("short write to " + manifest.string());
  }
}

TensorFile read_tensor_file(const fs::path& manifest) {
  std::ifstream text(manifest);
  if (!text) {
    throw IoError("cannot open " + manifest.string());
  }
  TensorFile file;
  std::string blob_name;
  struct Entry {
    std::string name;
    int rows;
    int cols;
    std::uint64_t offset;
    std::uint64_t length;
  };
  std::vector<Entry> entries;
  std::string line;
  while (std::getline(text, line)) {
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "blob") {
      in >> blob_name;
    } else if (kind == "meta") {
      std::string key;
      in >> key;
      std::string value;
      std::getline(in >> std::ws, value);
      file.metadata.emplace_back(key, value);
    } else if (kind == "tensor") {
      Entry e{};
      in >> e.name >> e.rows >> e.cols >> e.offset >> e.length;
      if (!in) {
        throw IoError("malformed tensor line in " + manifest.string() + ": " + line);
      }
      entries.push_back(e);
    } else {
      throw IoError("unknown manifest line in " + manifest.string() + ": " + line);
    }
  }
  if (blob_name.empty()) {
    throw IoError("manifest " + manifest.string() + " names no blob");
  }
  std::ifstream data(manifest.parent_path() / blob_name, std::ios::binary);
  if (!data) {
    throw IoError("cannot open blob " + blob_name);
  }
  for (const auto& e : entries) {
    if (e.length != static_cast<std::uint64_t>(e.rows) * static_cast<std::uint64_t>(e.cols) * 4) {
      throw IoError("tensor '" + e.name + "' length does not match its shape");
    }
    NamedTensor t{e.name, e.rows, e.cols, std::vector<float>(e.length / 4)};
    data.seekg(static_cast<std::streamoff>(e.offset));
    std::vector<unsigned char> raw(e.length);
    data.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!data) {
      throw IoError("blob truncated while reading '" + e.name + "'");
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8U) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16U) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24U);
      t.data[i] = std::bit_cast<float>(bits);
    }
    file.tensors.push_back(std::move(t));
  }
  return file;
}

std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c) {
  std::string labels;
  for (std::size_t i = 0; i < c.label_tokens.size(); ++i) {
    labels += (i == 0 ? "" : ",") + std::to_string(c.label_tokens[i]);
  }
  std::ostringstream scale;
  scale.precision(9);
  scale << c.init_scale;
  return {{"config.n_layers", std::to_string(c.n_layers)},
          {"config.n_heads", std::to_string(c.n_heads)},
          {"config.d_model", std::to_string(c.d_model)},
          {"config.d_mlp", std::to_string(c.d_mlp)},
          {"config.vocab_size", std::to_string(c.vocab_size)},
          {"config.max_seq_len", std::to_string(c.max_seq_len)},
          {"config.linear_mode", c.linear_mode ? "1" : "0"},
          {"config.label_tokens", labels},
          {"config.init_scale", scale.str()}};
}

ModelConfig config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries) {
  auto get = [&](const std::string& key) -> const std::string& {
    for (const auto& [k, v] : entries) {
      if (k == key) {
        return v;
      }
    }
    throw IoError("missing '" + key + "'");
  };
  ModelConfig c;
  try {
    c.n_layers = std::stoi(get("config.n_layers"));
    c.n_heads = std::stoi(get("config.n_heads"));
    c.d_model = std::stoi(get("config.d_model"));
    c.d_mlp = std::stoi(get("config.d_mlp"));
    c.vocab_size = std::stoi(get("config.vocab_size"));
    c.max_seq_len = std::stoi(get("config.max_seq_len"));
    c.linear_mode = get("config.linear_mode") == "1";
    c.init_scale = std::stof(get("config.init_scale"));
    std::istringstream labels(get("config.label_tokens"));
    std::string tok;
    while (std::getline(labels, tok, ',')) {
      c.label_tokens.push_back(std::stoi(tok));
    }
  } catch (const std::logic_error& e) {
    throw IoError(std::string("malformed config entry: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Parameters& params, const fs::path& manifest) {
  TensorFile file;
  file.metadata = config_entries(params.config());
  file.metadata.emplace_back("checkpoint.hash", checkpoint_hash(params));
  for (const auto& info : params.layout().tensors()) {
    const auto span = params.values().subspan(info.offset, info.size());
    file.tensors.push_back({info.name, info.rows, info.cols, {span.begin(), span.end()}});
  }
  write_tensor_file(manifest, file);
}

Parameters load_checkpoint(const fs::path& manifest) {
  const auto file = read_tensor_file(manifest);
  Parameters params(config_from_entries(file.metadata));
  for (const auto& info : params.layout().tensors()) {
    const auto& t = file.find(info.name);
    if (t.rows != info.rows || t.cols != info.cols) {
      throw IoError("tensor '" + info.name + "' has unexpected shape");
    }
    std::copy(t.data.begin(), t.data.end(), params.values().begin() + static_cast<std::ptrdiff_t>(info.offset));
  }
  return params;
}

std::string checkpoint_hash(const Parameters& params) {
  Fingerprint fp;
  for (const auto& [k, v] : config_entries(params.config())) {
    fp.text(k).text(v);
  }
  fp.floats(params.values());
  return fp.hex();
}

}  // namespace ctsft
