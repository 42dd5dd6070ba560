#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsemb/common.hpp"
#include "vsemb/tensor.hpp"
#include "vsemb/tensor_io.hpp"

namespace vsemb {

enum class CodebookKind { semantic, visual_structured, visual_flat };

inline const char* to_string(CodebookKind k) {
  switch (k) {
    case CodebookKind::semantic: return "semantic";
    case CodebookKind::visual_structured: return "visual-structured";
    case CodebookKind::visual_flat: return "visual-flat";
  }
  return "?";
}

// Per-class signatures: semantic attribute vectors, structured MxK visual
// signatures, or flattened visual signatures of length M*K.
struct Codebook {
  CodebookKind kind = CodebookKind::semantic;
  std::map<int, Tensor> entries;

  bool has(int class_id) const { return entries.count(class_id) > 0; }

  const Tensor& at(int class_id) const {
    auto it = entries.find(class_id);
    if (it == entries.end())
      throw EvalError("codebook: missing class " + std::to_string(class_id));
    return it->second;
  }

  std::vector<int> class_ids() const {
    std::vector<int> ids;
    ids.reserve(entries.size());
    for (const auto& [id, _] : entries) ids.push_back(id);
    return ids;
  }

  void validate() const {
    if (entries.empty()) throw ConfigError("codebook: empty");
    const Tensor& first = entries.begin()->second;
    for (const auto& [id, t] : entries) {
      if (!t.same_shape(first))
        throw ConfigError("codebook: entry shape mismatch at class " +
                          std::to_string(id));
      if (!t.all_finite())
        throw ConfigError("codebook: non-finite entry at class " +
                          std::to_string(id));
      if (kind == CodebookKind::visual_structured) {
        if (t.rank() != 2)
          throw ConfigError("codebook: structured visual entries must be rank 2");
        for (std::size_t m = 0; m < t.dim(0); ++m) {
          double s = 0.0;
          for (std::size_t k = 0; k < t.dim(1); ++k) {
            if (t(m, k) < -1e-12)
              throw ConfigError("codebook: negative visual entry");
            s += t(m, k);
          }
          if (std::fabs(s - 1.0) > 1e-6)
            throw ConfigError("codebook: visual row not stochastic at class " +
                              std::to_string(id));
        }
      } else if (kind == CodebookKind::visual_flat) {
        if (t.rank() != 1)
          throw ConfigError("codebook: flat visual entries must be rank 1");
        double s = 0.0;
        for (double v : t.values()) {
          if (v < -1e-12) throw ConfigError("codebook: negative visual entry");
          s += v;
        }
        if (std::fabs(s - 1.0) > 1e-6)
          throw ConfigError("codebook: flat visual entry not normalized at class " +
                            std::to_string(id));
      }
    }
  }
};

struct SplitSpec {
  std::set<int> seen_classes;
  std::set<int> unseen_classes;
  std::set<std::string> train_instances;
  std::set<std::string> test_instances;
  std::string name = "default";
};

struct Instance {
  std::string id;
  int class_id = 0;
  Tensor feature_map;            // W x H x C
  std::optional<Tensor> parts;   // M x C raw part features, when provided
};

struct Dataset {
  std::vector<Instance> instances;  // sorted by instance id
  std::vector<int> classes;         // sorted, contiguous from 0
  Codebook codebook;
  SplitSpec split;

  const Instance& instance(const std::string& id) const {
    auto it = std::lower_bound(
        instances.begin(), instances.end(), id,
        [](const Instance& a, const std::string& b) { return a.id < b; });
    if (it == instances.end() || it->id != id)
      throw ConfigError("dataset: unknown instance " + id);
    return *it;
  }

  std::vector<std::size_t> train_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < instances.size(); ++i)
      if (split.train_instances.count(instances[i].id)) idx.push_back(i);
    return idx;
  }

  std::vector<std::size_t> test_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < instances.size(); ++i)
      if (split.test_instances.count(instances[i].id)) idx.push_back(i);
    return idx;
  }

  void validate() const {
    std::set<int> class_set(classes.begin(), classes.end());
    if (class_set.size() != classes.size())
      throw ConfigError("dataset: duplicate class ids");
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (!class_set.count(int(i)))
        throw ConfigError("dataset: class ids must be contiguous from 0");

    std::set<std::string> ids;
    const Tensor* ref = nullptr;
    for (const Instance& inst : instances) {
      if (!ids.insert(inst.id).second)
        throw ConfigError("dataset: duplicate instance id " + inst.id);
      if (!class_set.count(inst.class_id))
        throw ConfigError("dataset: instance " + inst.id +
                          " has unknown class " + std::to_string(inst.class_id));
      if (ref == nullptr) ref = &inst.feature_map;
      if (!inst.feature_map.same_shape(*ref))
        throw ConfigError("dataset: feature map shape mismatch at " + inst.id +
                          " " + inst.feature_map.shape_str() + " vs " +
                          ref->shape_str());
      if (inst.feature_map.rank() != 3)
        throw ConfigError("dataset: feature maps must be rank 3 (W,H,C)");
    }

    for (int c : split.seen_classes)
      if (split.unseen_classes.count(c))
        throw ConfigError("dataset: class " + std::to_string(c) +
                          " is both seen and unseen");
    for (int c : split.seen_classes)
      if (!class_set.count(c))
        throw ConfigError("dataset: unknown seen class " + std::to_string(c));
    for (int c : split.unseen_classes)
      if (!class_set.count(c))
        throw ConfigError("dataset: unknown unseen class " + std::to_string(c));

    std::map<std::string, int> class_of;
    for (const Instance& inst : instances) class_of[inst.id] = inst.class_id;
    for (const std::string& id : split.train_instances) {
      auto it = class_of.find(id);
      if (it == class_of.end())
        throw ConfigError("dataset: train instance " + id + " has no features");
      if (!split.seen_classes.count(it->second))
        throw ConfigError("dataset: train instance " + id +
                          " belongs to unseen class " +
                          std::to_string(it->second));
    }
    for (const std::string& id : split.test_instances)
      if (!class_of.count(id))
        throw ConfigError("dataset: test instance " + id + " has no features");

    codebook.validate();
    for (int c : classes)
      if (!codebook.has(c))
        throw ConfigError("dataset: codebook missing class " + std::to_string(c));
  }
};

struct PartitionCounts {
  std::size_t n_classes = 0;
  std::size_t n_seen = 0;
  std::size_t n_unseen = 0;
  std::size_t n_images = 0;
};

inline PartitionCounts class_partition_counts(const Dataset& ds) {
  return PartitionCounts{ds.classes.size(), ds.split.seen_classes.size(),
                         ds.split.unseen_classes.size(), ds.instances.size()};
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::map<std::string, int> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing labels file: " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      detail::split_csv_line(line) != std::vector<std::string>{"instance_id", "class_id"})
    throw FormatError(path.string() + ": expected header instance_id,class_id");
  std::map<std::string, int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 2)
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    labels[cells[0]] = std::stoi(cells[1]);
  }
  return labels;
}

inline void write_labels_csv(const std::map<std::string, int>& labels,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  out << "instance_id,class_id\n";
  for (const auto& [id, cls] : labels) out << id << "," << cls << "\n";
}

inline SplitSpec read_split_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing split file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  for (const char* key : {"seen", "unseen", "train", "test"})
    if (!j.contains(key))
      throw FormatError(path.string() + ": missing key '" + key + "'");
  SplitSpec s;
  for (const auto& v : j["seen"]) s.seen_classes.insert(v.get<int>());
  for (const auto& v : j["unseen"]) s.unseen_classes.insert(v.get<int>());
  for (const auto& v : j["train"]) s.train_instances.insert(v.get<std::string>());
  for (const auto& v : j["test"]) s.test_instances.insert(v.get<std::string>());
  if (j.contains("name")) s.name = j["name"].get<std::string>();
  return s;
}

inline void write_split_json(const SplitSpec& s, const std::filesystem::path& path) {
  nlohmann::json j;
  j["seen"] = s.seen_classes;
  j["unseen"] = s.unseen_classes;
  j["train"] = s.train_instances;
  j["test"] = s.test_instances;
  j["name"] = s.name;
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
}

inline Codebook read_semantic_codebook_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing codebook file: " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(path.string() + ": empty file");
  auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "class_id")
    throw FormatError(path.string() + ": expected header class_id,a1,...");
  const std::size_t dim = header.size() - 1;
  Codebook cb;
  cb.kind = CodebookKind::semantic;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != dim + 1)
      throw FormatError(path.string() + ": row width mismatch");
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < dim; ++i) v[i] = std::stod(cells[i + 1]);
    cb.entries[std::stoi(cells[0])] = Tensor::vector_of(std::move(v));
  }
  cb.validate();
  return cb;
}

inline void write_semantic_codebook_csv(const Codebook& cb,
                                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  const std::size_t dim = cb.entries.begin()->second.numel();
  out << "class_id";
  for (std::size_t i = 1; i <= dim; ++i) out << ",a" << i;
  out << "\n";
  for (const auto& [id, t] : cb.entries) {
    out << id;
    for (double v : t.values()) out << "," << detail::format_double(v);
    out << "\n";
  }
}

// Visual codebooks travel as one tensor indexed by sorted class id:
// rank 3 (n_classes, M, K) structured, rank 2 (n_classes, M*K) flat.
inline Codebook read_visual_codebook_vsef(const std::filesystem::path& path) {
  const Tensor t = read_tensor_file(path);
  Codebook cb;
  if (t.rank() == 3) {
    cb.kind = CodebookKind::visual_structured;
    for (std::size_t c = 0; c < t.dim(0); ++c) {
      Tensor e({t.dim(1), t.dim(2)});
      for (std::size_t m = 0; m < t.dim(1); ++m)
        for (std::size_t k = 0; k < t.dim(2); ++k) e(m, k) = t(c, m, k);
      cb.entries[int(c)] = std::move(e);
    }
  } else if (t.rank() == 2) {
    cb.kind = CodebookKind::visual_flat;
    for (std::size_t c = 0; c < t.dim(0); ++c) {
      std::vector<double> v(t.dim(1));
      for (std::size_t i = 0; i < t.dim(1); ++i) v[i] = t(c, i);
      cb.entries[int(c)] = Tensor::vector_of(std::move(v));
    }
  } else {
    throw FormatError(path.string() + ": visual codebook must be rank 2 or 3");
  }
  cb.validate();
  return cb;
}

inline void write_visual_codebook_vsef(const Codebook& cb,
                                       const std::filesystem::path& path) {
  const auto ids = cb.class_ids();
  const Tensor& first = cb.entries.begin()->second;
  if (cb.kind == CodebookKind::visual_structured) {
    Tensor t({ids.size(), first.dim(0), first.dim(1)});
    for (std::size_t c = 0; c < ids.size(); ++c) {
      const Tensor& e = cb.at(ids[c]);
      for (std::size_t m = 0; m < e.dim(0); ++m)
        for (std::size_t k = 0; k < e.dim(1); ++k) t(c, m, k) = e(m, k);
    }
    write_tensor_file(t, path);
  } else if (cb.kind == CodebookKind::visual_flat) {
    Tensor t({ids.size(), first.numel()});
    for (std::size_t c = 0; c < ids.size(); ++c) {
      const Tensor& e = cb.at(ids[c]);
      for (std::size_t i = 0; i < e.numel(); ++i) t(c, i) = e[i];
    }
    write_tensor_file(t, path);
  } else {
    throw ConfigError("write_visual_codebook_vsef: semantic codebook given");
  }
}

inline Codebook read_codebook_auto(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".csv") return read_semantic_codebook_csv(path);
  return read_visual_codebook_vsef(path);
}

// Loads a dataset directory:
//   features/<id>.vsef   rank-3 feature maps (required)
//   parts/<id>.vsef      rank-2 raw part features (optional, all-or-none)
//   labels.csv           header instance_id,class_id
//   split.json           keys seen, unseen, train, test
//   codebook_semantic.csv or codebook_visual.vsef
inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw ConfigError("dataset directory not found: " + dir.string());

  const auto labels = read_labels_csv(dir / "labels.csv");
  if (labels.empty()) throw ConfigError("dataset: labels.csv has no rows");

  Dataset ds;
  ds.split = read_split_json(dir / "split.json");

  const bool have_parts = fs::is_directory(dir / "parts");
  for (const auto& [id, cls] : labels) {
    Instance inst;
    inst.id = id;
    inst.class_id = cls;
    const fs::path fpath = dir / "features" / (id + ".vsef");
    if (!fs::exists(fpath))
      throw ConfigError("dataset: missing feature file " + fpath.string());
    inst.feature_map = read_tensor_file(fpath);
    if (have_parts) {
      const fs::path ppath = dir / "parts" / (id + ".vsef");
      if (!fs::exists(ppath))
        throw ConfigError("dataset: missing part file " + ppath.string());
      Tensor p = read_tensor_file(ppath);
      if (p.rank() != 2)
        throw ConfigError("dataset: part features must be rank 2 (M,C)");
      inst.parts = std::move(p);
    }
    ds.instances.push_back(std::move(inst));
  }
  // std::map iteration is ordered, so instances are already sorted by id.

  std::set<int> class_set;
  for (const auto& [_, cls] : labels) class_set.insert(cls);
  for (int c : ds.split.seen_classes) class_set.insert(c);
  for (int c : ds.split.unseen_classes) class_set.insert(c);
  ds.classes.assign(class_set.begin(), class_set.end());

  if (fs::exists(dir / "codebook_semantic.csv"))
    ds.codebook = read_semantic_codebook_csv(dir / "codebook_semantic.csv");
  else if (fs::exists(dir / "codebook_visual.vsef"))
    ds.codebook = read_visual_codebook_vsef(dir / "codebook_visual.vsef");
  else
    throw ConfigError("dataset: no codebook_semantic.csv or codebook_visual.vsef in " +
                      dir.string());

  ds.validate();
  return ds;
}

}  // namespace vsemb
