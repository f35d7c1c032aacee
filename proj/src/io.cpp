#include "circuitedit/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "circuitedit/errors.hpp"

namespace circuitedit {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kMagic = "circuitedit-container 1\n";

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void append_block(std::string& out, const Tensor& t) {
  for (double v : t.storage()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

Tensor read_block(std::string_view bytes, std::size_t& offset, const Shape& shape) {
  Tensor t(shape);
  const std::size_t need = t.numel() * 8;
  if (offset + need > bytes.size()) throw IoError("container is truncated");
  for (double& v : t.storage()) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)]))
              << (8 * i);
    }
    std::memcpy(&v, &bits, sizeof v);
    offset += 8;
  }
  return t;
}

std::string pack(const nlohmann::json& header, const std::string& payload) {
  const std::string h = header.dump();
  std::string out(kMagic);
  out += std::to_string(h.size()) + "\n" + h + "\n";
  out += payload;
  return out;
}

std::pair<nlohmann::json, std::size_t> unpack(std::string_view bytes, const fs::path& path) {
  if (bytes.substr(0, kMagic.size()) != kMagic) throw IoError(path.string() + " is not a circuitedit container");
  std::size_t pos = kMagic.size();
  const std::size_t nl = bytes.find('\n', pos);
  if (nl == std::string_view::npos) throw IoError(path.string() + ": missing header length");
  std::size_t len = 0;
  try {
    len = std::stoul(std::string(bytes.substr(pos, nl - pos)));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": bad header length");
  }
  pos = nl + 1;
  if (pos + len + 1 > bytes.size()) throw IoError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": header is not valid JSON (" + e.what() + ")");
  }
  return {header, pos + len + 1};
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},   {"heads", c.heads},     {"d_model", c.d_model},
          {"d_ff", c.d_ff},       {"vocab", c.vocab},     {"max_seq_len", c.max_seq_len},
          {"seed", c.seed},       {"variant", to_string(c.variant)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.d_model = j.at("d_model");
    c.d_ff = j.at("d_ff");
    c.vocab = j.at("vocab");
    c.max_seq_len = j.at("max_seq_len");
    c.seed = j.at("seed");
    c.variant = model_variant_from_string(j.at("variant"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_checkpoint(const fs::path& path, const Parameters& params, const nlohmann::json& extra) {
  ParamLayout lay(params.config);
  nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
  header["schema"] = "checkpoint/1";
  header["model"] = model_config_to_json(params.config);
  nlohmann::json blocks = nlohmann::json::array();
  std::string payload;
  for (std::size_t i = 0; i < lay.count(); ++i) {
    blocks.push_back({{"name", lay.name(i)}, {"shape", lay.shape(i)}});
    append_block(payload, params[i]);
  }
  header["blocks"] = blocks;
  write_file_atomic(path, pack(header, payload));
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  auto [header, offset] = unpack(bytes, path);
  if (header.value("schema", "") != "checkpoint/1") throw IoError(path.string() + " is not a checkpoint/1 file");
  LoadedCheckpoint out;
  out.params.config = model_config_from_json(header.at("model"));
  ParamLayout lay(out.params.config);
  const auto& blocks = header.at("blocks");
  if (blocks.size() != lay.count()) throw IoError(path.string() + ": block count does not match the model");
  for (std::size_t i = 0; i < lay.count(); ++i) {
    if (blocks[i].at("name") != lay.name(i) || blocks[i].at("shape").get<Shape>() != lay.shape(i)) {
      throw IoError(path.string() + ": block " + std::to_string(i) + " does not match layout entry " + lay.name(i));
    }
    out.params.blocks.push_back(read_block(bytes, offset, lay.shape(i)));
  }
  if (offset != bytes.size()) throw IoError(path.string() + ": trailing bytes after the last block");
  out.header = std::move(header);
  return out;
}

void save_adapters(const fs::path& path, const ModelConfig& model, const AdapterSet& adapters, const EditPlan& plan,
                   const nlohmann::json& extra) {
  nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
  header["schema"] = "adapters/1";
  header["model"] = model_config_to_json(model);
  header["alpha"] = adapters.alpha;
  header["rank"] = adapters.rank;
  header["plan"] = plan_to_json(plan);
  nlohmann::json list = nlohmann::json::array();
  std::string payload;
  for (const Adapter& ad : adapters.adapters) {
    list.push_back({{"matrix", to_string(ad.matrix)},
                    {"r_eff", ad.rank},
                    {"scale", ad.scale},
                    {"a_shape", ad.a.shape()},
                    {"b_shape", ad.b.shape()}});
    append_block(payload, ad.a);
    append_block(payload, ad.b);
  }
  header["blocks"] = list;
  write_file_atomic(path, pack(header, payload));
}

LoadedAdapters load_adapters(const fs::path& path) {
  const std::string bytes = read_file(path);
  auto [header, offset] = unpack(bytes, path);
  if (header.value("schema", "") != "adapters/1") throw IoError(path.string() + " is not an adapters/1 file");
  LoadedAdapters out;
  try {
    out.model = model_config_from_json(header.at("model"));
    out.adapters.alpha = header.at("alpha");
    out.adapters.rank = header.at("rank");
    out.plan = plan_from_json(header.at("plan"));
    for (const auto& b : header.at("blocks")) {
      Adapter ad;
      ad.matrix = matrix_from_string(b.at("matrix"));
      ad.rank = b.at("r_eff");
      ad.scale = b.at("scale");
      ad.a = read_block(bytes, offset, b.at("a_shape").get<Shape>());
      ad.b = read_block(bytes, offset, b.at("b_shape").get<Shape>());
      out.adapters.adapters.push_back(std::move(ad));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed adapters header (" + e.what() + ")");
  }
  if (offset != bytes.size()) throw IoError(path.string() + ": trailing bytes after the last block");
  out.header = std::move(header);
  return out;
}

}  // namespace circuitedit
