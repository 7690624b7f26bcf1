#include "probgrowth/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "probgrowth/error.hpp"

namespace probgrowth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic{'P', 'G', 'C', 'K', 'P', 'T', '\0', '\1'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_doubles(std::string& out, const std::vector<double>& values) {
  for (double d : values) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::string payload;
  json arrays = json::array();
  auto add = [&](const std::string& name, const std::vector<int>& shape,
                 const std::vector<double>& values) {
    arrays.push_back(
        {{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", values.size()}});
    put_doubles(payload, values);
  };

  const auto params = ckpt.model.parameters();
  for (const Param* p : params) add(p->name, p->shape, p->value);
  const bool has_moments = ckpt.optimizer.m.size() == params.size();
  if (has_moments) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      add("adam.m/" + params[k]->name, params[k]->shape, ckpt.optimizer.m[k]);
      add("adam.v/" + params[k]->name, params[k]->shape, ckpt.optimizer.v[k]);
    }
  }

  const json header = {
      {"format", "probgrowth-checkpoint"},
      {"network", to_json(ckpt.model.config())},
      {"meta", ckpt.meta},
      {"global_step", ckpt.global_step},
      {"rng_state", ckpt.rng.serialize()},
      {"optimizer",
       {{"type", "adam"},
        {"learning_rate", ckpt.optimizer.learning_rate},
        {"beta1", ckpt.optimizer.beta1},
        {"beta2", ckpt.optimizer.beta2},
        {"epsilon", ckpt.optimizer.epsilon},
        {"step", ckpt.optimizer.step},
        {"has_moments", has_moments}}},
      {"payload_bytes", payload.size()},
      {"checksum", hex(fnv1a(payload))},
      {"arrays", arrays}};
  const std::string header_text = header.dump();

  std::string blob(kMagic.begin(), kMagic.end());
  put_u64(blob, header_text.size());
  blob += header_text;
  blob += payload;

  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto corrupt = [&](const std::string& why) {
    return DataError("checkpoint " + path.string() + " is corrupt (" + why +
                     "); delete it to retrain");
  };
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic.data(), kMagic.size()) != 0) {
    throw corrupt("bad magic or truncated header");
  }
  const std::uint64_t header_len = get_u64(blob.data() + 8);
  if (blob.size() < 16 + header_len) throw corrupt("truncated header");

  json header;
  try {
    header = json::parse(blob.substr(16, header_len));
  } catch (const json::exception&) {
    throw corrupt("unparseable header");
  }
  const std::string payload = blob.substr(16 + header_len);
  try {
    if (payload.size() != header.at("payload_bytes").get<std::size_t>()) {
      throw corrupt("payload size mismatch");
    }
    if (hex(fnv1a(payload)) != header.at("checksum").get<std::string>()) {
      throw corrupt("checksum mismatch");
    }

    Checkpoint ckpt;
    ckpt.model = ProbUNet(network_config_from_json(header.at("network")));
    ckpt.meta = header.at("meta");
    ckpt.global_step = header.at("global_step").get<std::int64_t>();
    ckpt.rng = Rng::deserialize(header.at("rng_state").get<std::string>());

    const json& opt = header.at("optimizer");
    ckpt.optimizer.learning_rate = opt.at("learning_rate").get<double>();
    ckpt.optimizer.beta1 = opt.at("beta1").get<double>();
    ckpt.optimizer.beta2 = opt.at("beta2").get<double>();
    ckpt.optimizer.epsilon = opt.at("epsilon").get<double>();
    ckpt.optimizer.step = opt.at("step").get<std::int64_t>();

    std::map<std::string, std::vector<double>> arrays;
    for (const auto& a : header.at("arrays")) {
      const auto offset = a.at("offset").get<std::size_t>();
      const auto count = a.at("count").get<std::size_t>();
      if (offset + count * 8 > payload.size()) throw corrupt("array out of bounds");
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<double>(get_u64(payload.data() + offset + 8 * i));
      }
      arrays[a.at("name").get<std::string>()] = std::move(values);
    }

    auto params = ckpt.model.parameters();
    auto take = [&](const std::string& name, std::size_t expected) {
      auto it = arrays.find(name);
      if (it == arrays.end()) throw corrupt("missing array " + name);
      if (it->second.size() != expected) throw corrupt("size mismatch for " + name);
      return std::move(it->second);
    };
    for (Param* p : params) p->value = take(p->name, p->size());
    if (opt.at("has_moments").get<bool>()) {
      for (Param* p : params) {
        ckpt.optimizer.m.push_back(take("adam.m/" + p->name, p->size()));
        ckpt.optimizer.v.push_back(take("adam.v/" + p->name, p->size()));
      }
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw corrupt(std::string("header field: ") + e.what());
  }
}

}  // namespace probgrowth
