// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/dataset.hpp"

#include "cilab/checkpoint.hpp"
#include "cilab/error.hpp"

#include <fstream>

namespace cilab {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::size_t> InstanceDataset::instance_ids() const {
  std::set<std::size_t> ids;
  for (const auto& s : samples) ids.insert(s.instance);
  return {ids.begin(), ids.end()};
}

std::map<std::size_t, std::vector<std::size_t>> InstanceDataset::positions_by_instance() const {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].instance].push_back(i);
  return out;
}

void InstanceDataset::validate() const {
  if (samples.empty()) throw ConfigError("dataset is empty");
  std::set<std::size_t> ids;
  std::map<std::size_t, std::set<std::size_t>> views;
  for (const auto& s : samples) {
    if (s.image.shape != samples.front().image.shape) throw ConfigError("dataset images differ in shape");
    if (!ids.insert(s.id).second) throw ConfigError("duplicate sample id " + std::to_string(s.id));
    if (!views[s.instance].insert(s.view).second)
      throw ConfigError("instance " + std::to_string(s.instance) + " repeats view " + std::to_string(s.view));
  }
  for (const auto& [inst, v] : views)
    if (v.size() < 2) throw ConfigError("instance " + std::to_string(inst) + " has fewer than 2 samples");
}

InstanceDataset InstanceDataset::restrict_to(const std::set<std::size_t>& instances) const {
  InstanceDataset out;
  out.generator = generator;
  for (const auto& s : samples)
    if (instances.count(s.instance)) out.samples.push_back(s);
  for (const auto& [inst, latent] : latents)
    if (instances.count(inst)) out.latents.emplace(inst, latent);
  for (auto inst : outlier_instances)
    if (instances.count(inst)) out.outlier_instances.insert(inst);
  return out;
}

std::set<std::size_t> RetrievalSplit::instances() const {
  std::set<std::size_t> out;
  for (const auto& s : queries) out.insert(s.instance);
  for (const auto& s : gallery) out.insert(s.instance);
  return out;
}

void RetrievalSplit::validate() const {
  if (queries.empty()) throw ProtocolError("retrieval split has no queries");
  std::set<std::size_t> gallery_instances, gallery_ids;
  for (const auto& s : gallery) {
    gallery_instances.insert(s.instance);
    gallery_ids.insert(s.id);
  }
  for (const auto& q : queries) {
    if (!gallery_instances.count(q.instance))
      throw ProtocolError("query " + std::to_string(q.id) + " has no gallery match");
    if (gallery_ids.count(q.id)) throw ProtocolError("sample " + std::to_string(q.id) + " is both query and gallery");
  }
}

void save_dataset(const InstanceDataset& ds, const fs::path& manifest) {
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  json samples = json::array();
  for (const auto& s : ds.samples) samples.push_back({s.id, s.instance, s.view});
  json latents = json::object();
  for (const auto& [inst, l] : ds.latents)
    latents[std::to_string(inst)] = std::vector<double>(l.data(), l.data() + l.size());
  const auto& shape = ds.samples.empty() ? Shape{} : ds.samples.front().image.shape;
  json j{{"format_version", 1},
         {"generator", ds.generator},
         {"image_shape", shape},
         {"samples", samples},
         {"latents", latents},
         {"outlier_instances", ds.outlier_instances},
         {"blob", blob_path(manifest).filename().string()}};

  std::ofstream blob(blob_path(manifest), std::ios::binary);
  if (!blob) throw PersistenceError("cannot write " + blob_path(manifest).string());
  for (const auto& s : ds.samples) write_f64_le(blob, std::span<const double>(s.image.data.data(), s.image.size()));
  std::ofstream out(manifest);
  if (!out) throw PersistenceError("cannot write " + manifest.string());
  out << j.dump(1) << '\n';
}

InstanceDataset load_dataset(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw PersistenceError("cannot open dataset " + manifest.string());
  try {
    json j;
    in >> j;
    if (j.at("format_version").get<int>() != 1) throw PersistenceError("unsupported dataset format_version");
    const auto shape = j.at("image_shape").get<Shape>();
    const auto pixels = numel(shape);
    const auto values = read_f64_le(manifest.parent_path() / j.at("blob").get<std::string>());
    const auto& recs = j.at("samples");
    if (values.size() != recs.size() * pixels)
      throw PersistenceError("dataset blob holds " + std::to_string(values.size()) + " values, expected " +
                             std::to_string(recs.size() * pixels));
    InstanceDataset ds;
    ds.generator = j.at("generator");
    std::size_t cursor = 0;
    for (const auto& r : recs) {
      Eigen::VectorXd img = Eigen::Map<const Eigen::VectorXd>(values.data() + cursor, static_cast<Eigen::Index>(pixels));
      cursor += pixels;
      ds.samples.push_back({Tensor(shape, std::move(img)), r.at(1).get<std::size_t>(), r.at(2).get<std::size_t>(),
                            r.at(0).get<std::size_t>()});
    }
    for (auto it = j.at("latents").begin(); it != j.at("latents").end(); ++it) {
      auto v = it.value().get<std::vector<double>>();
      ds.latents.emplace(std::stoul(it.key()), Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    ds.outlier_instances = j.at("outlier_instances").get<std::set<std::size_t>>();
    return ds;
  } catch (const json::exception& e) {
    throw PersistenceError("corrupt dataset manifest " + manifest.string() + ": " + e.what());
  } catch (const DimensionError& e) {
    throw PersistenceError("dataset manifest inconsistent: " + std::string(e.what()));
  }
}

}  // namespace cilab
