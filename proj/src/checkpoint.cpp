#include "uniref/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace uniref {
namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

json config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"width", c.width},
          {"heads", c.heads},
          {"vocab", c.vocab},
          {"channels", c.channels},
          {"ff_mult", c.ff_mult},
          {"max_segments", c.max_segments},
          {"max_instruction", c.max_instruction},
          {"rope_base", c.rope_base},
          {"rope_heads", c.rope_heads}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.channels = j.at("channels").get<int>();
  c.ff_mult = j.at("ff_mult").get<int>();
  c.max_segments = j.at("max_segments").get<int>();
  c.max_instruction = j.at("max_instruction").get<int>();
  c.rope_base = j.at("rope_base").get<double>();
  // Older checkpoints rotate every head.
  c.rope_heads = j.value("rope_heads", c.heads);
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, std::int64_t step) {
  json header;
  header["names"] = params.names();
  json shapes = json::array();
  for (const auto& a : params.arrays()) shapes.push_back({a.rows(), a.cols()});
  header["shapes"] = shapes;
  header["dtype"] = "float32";
  header["config"] = config_to_json(params.config());
  header["step"] = step;
  header["hash"] = hex64(params.content_hash());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp);
    out << kCheckpointMagic << '\n' << header.dump() << '\n';
    std::vector<float> buf;
    for (const auto& a : params.arrays()) {
      buf.resize(static_cast<std::size_t>(a.size()));
      for (Eigen::Index i = 0; i < a.size(); ++i) buf[i] = static_cast<float>(a.data()[i]);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw IoError(path + ": not a checkpoint (bad magic)");
  std::getline(in, header_line);
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed checkpoint header: " + e.what());
  }

  try {
    if (header.at("dtype").get<std::string>() != "float32") throw IoError(path + ": unsupported element type");
    const ModelConfig config = config_from_json(header.at("config"));
    config.validate();
    const auto expected_names = param_names(config);
    const auto expected_shapes = param_shapes(config);
    const auto names = header.at("names").get<std::vector<std::string>>();
    const auto& shapes = header.at("shapes");
    if (names != expected_names || shapes.size() != expected_shapes.size())
      throw IoError(path + ": array layout does not match the stored config");

    std::vector<Mat> arrays;
    std::vector<float> buf;
    for (std::size_t i = 0; i < expected_shapes.size(); ++i) {
      const int r = shapes[i].at(0).get<int>(), c = shapes[i].at(1).get<int>();
      if (r != expected_shapes[i].first || c != expected_shapes[i].second)
        throw IoError(path + ": shape mismatch for " + names[i]);
      buf.resize(std::size_t(r) * c);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!in) throw IoError(path + ": truncated payload in " + names[i]);
      Mat m(r, c);
      for (std::size_t k = 0; k < buf.size(); ++k) m.data()[k] = buf[k];
      arrays.push_back(std::move(m));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw IoError(path + ": trailing bytes after payload");

    ModelParams params(config, std::move(arrays));
    const auto want = header.at("hash").get<std::string>();
    if (hex64(params.content_hash()) != want)
      throw IoError(path + ": content hash mismatch (header " + want + ", payload " +
                    hex64(params.content_hash()) + ")");
    return {std::move(params), header.at("step").get<std::int64_t>()};
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed checkpoint header: " + e.what());
  }
}

}  // namespace uniref
