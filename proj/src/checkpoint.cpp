// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/checkpoint.hpp"

#include "cilab/error.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace cilab {

namespace fs = std::filesystem;
using nlohmann::json;

std::array<std::uint8_t, 8> encode_f64_le(double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<std::uint8_t, 8> out{};
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(bits >> (8 * i));
  return out;
}

double decode_f64_le(std::span<const std::uint8_t, 8> bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i)]) << (8 * i);
  return std::bit_cast<double>(bits);
}

void write_f64_le(std::ostream& os, std::span<const double> values) {
  std::vector<char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto b = encode_f64_le(values[i]);
    std::copy(b.begin(), b.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * 8));
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> read_f64_le(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) throw PersistenceError(path.string() + ": length is not a multiple of 8 bytes");
  std::vector<double> values(bytes.size() / 8);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = decode_f64_le(std::span<const std::uint8_t, 8>(bytes.data() + i * 8, 8));
  return values;
}

fs::path blob_path(const fs::path& manifest) {
  fs::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

void save_checkpoint(const EmbeddingNet& net, const AdamState& state, const fs::path& path) {
  const auto params = net.parameters();
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("save_checkpoint: optimizer state does not mirror the network");

  json records = json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    records.push_back({{"name", p.name}, {"shape", p.value.shape}, {"offset", offset}, {"length", p.value.size()}});
    offset += p.value.size() * 8;
  }
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"config", net.config()},
                {"frozen", std::vector<std::string>(net.frozen().begin(), net.frozen().end())},
                {"params", records},
                {"adam", {{"t", state.t}, {"lr", state.lr}, {"beta1", state.beta1}, {"beta2", state.beta2}, {"eps", state.eps}}},
                {"blob", blob_path(path).filename().string()}};

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream blob(blob_path(path), std::ios::binary);
  if (!blob) throw PersistenceError("cannot write " + blob_path(path).string());
  for (const auto& p : params) write_f64_le(blob, std::span<const double>(p.value.data.data(), p.value.size()));
  for (const auto& m : state.m) write_f64_le(blob, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
  for (const auto& v : state.v) write_f64_le(blob, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  if (!blob) throw PersistenceError("short write to " + blob_path(path).string());

  std::ofstream out(path);
  if (!out) throw PersistenceError("cannot write " + path.string());
  out << manifest.dump(2) << '\n';
}

std::pair<EmbeddingNet, AdamState> load_checkpoint(const fs::path& path) {
  json manifest;
  {
    std::ifstream in(path);
    if (!in) throw PersistenceError("cannot open checkpoint " + path.string());
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw PersistenceError("corrupt checkpoint manifest " + path.string() + ": " + e.what());
    }
  }
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw PersistenceError("unsupported checkpoint format_version");
    auto config = manifest.at("config").get<NetConfig>();
    const auto values = read_f64_le(path.parent_path() / manifest.at("blob").get<std::string>());

    std::vector<Parameter> params;
    std::size_t expected_offset = 0, total = 0;
    for (const auto& rec : manifest.at("params")) {
      const auto shape = rec.at("shape").get<Shape>();
      const auto length = rec.at("length").get<std::size_t>();
      const auto offset = rec.at("offset").get<std::size_t>();
      if (shape.empty() || numel(shape) != length)
        throw PersistenceError("checkpoint: shape of " + rec.at("name").get<std::string>() + " disagrees with length");
      if (offset != expected_offset)
        throw PersistenceError("checkpoint: offset of " + rec.at("name").get<std::string>() + " is inconsistent");
      expected_offset += length * 8;
      total += length;
      if (total > values.size()) throw PersistenceError("checkpoint: blob too short");
      Eigen::VectorXd data = Eigen::Map<const Eigen::VectorXd>(values.data() + (offset / 8), static_cast<Eigen::Index>(length));
      params.push_back({rec.at("name").get<std::string>(), "", Tensor(shape, std::move(data))});
    }
    if (values.size() != 3 * total)
      throw PersistenceError("checkpoint: blob holds " + std::to_string(values.size()) + " values, expected " +
                             std::to_string(3 * total));

    EmbeddingNet net(std::move(config), std::move(params));
    const auto frozen = manifest.value("frozen", std::vector<std::string>{});
    net.freeze(frozen);

    AdamState state;
    const auto& adam = manifest.at("adam");
    state.t = adam.at("t").get<std::uint64_t>();
    state.lr = adam.at("lr").get<double>();
    state.beta1 = adam.at("beta1").get<double>();
    state.beta2 = adam.at("beta2").get<double>();
    state.eps = adam.value("eps", 1e-8);
    std::size_t cursor = total;
    for (auto* moments : {&state.m, &state.v})
      for (const auto& p : net.parameters()) {
        const auto n = static_cast<Eigen::Index>(p.value.size());
        moments->push_back(Eigen::Map<const Eigen::VectorXd>(values.data() + cursor, n));
        cursor += p.value.size();
      }
    return {std::move(net), std::move(state)};
  } catch (const json::exception& e) {
    throw PersistenceError("corrupt checkpoint manifest " + path.string() + ": " + e.what());
  } catch (const SnapshotError& e) {
    throw PersistenceError("checkpoint does not match its config: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw PersistenceError("checkpoint config invalid: " + std::string(e.what()));
  } catch (const DimensionError& e) {
    throw PersistenceError("checkpoint tensor invalid: " + std::string(e.what()));
  }
}

}  // namespace cilab
