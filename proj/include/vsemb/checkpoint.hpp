#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsemb/common.hpp"
#include "vsemb/oracle.hpp"
#include "vsemb/tensor_io.hpp"
#include "vsemb/trainer.hpp"

namespace vsemb {

// Checkpoint container, all little-endian:
//   magic "VSECK" | version u8 | kind u8 (0 learner, 1 oracle) |
//   section count u32 | sections: name (u32 len + bytes), payload (u64 len + bytes)
// Model payloads store f64 values, so save -> load -> save is byte-stable.

inline constexpr char kCheckpointMagic[5] = {'V', 'S', 'E', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor64(std::string& out, const Tensor& t) {
  put_u32(out, std::uint32_t(t.rank()));
  for (std::size_t d : t.dims()) put_u32(out, std::uint32_t(d));
  for (double v : t.values()) put_f64(out, v);
}

inline Tensor get_tensor64(ByteReader& r) {
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError("checkpoint: implausible tensor rank");
  std::vector<std::size_t> dims(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims[i] = r.u32();
    numel *= dims[i];
  }
  std::vector<double> data(numel);
  for (std::size_t i = 0; i < numel; ++i) data[i] = r.f64();
  return Tensor(std::move(dims), std::move(data));
}

inline void put_string(std::string& out, const std::string& s) {
  put_u32(out, std::uint32_t(s.size()));
  out.append(s);
}

inline std::string get_string(ByteReader& r) { return r.raw(r.u32()); }

struct Section {
  std::string name;
  std::string payload;
};

inline std::string encode_container(std::uint8_t kind,
                                    const std::vector<Section>& sections) {
  std::string out;
  out.append(kCheckpointMagic, 5);
  out.push_back(char(kCheckpointVersion));
  out.push_back(char(kind));
  put_u32(out, std::uint32_t(sections.size()));
  for (const Section& s : sections) {
    put_string(out, s.name);
    put_u64(out, s.payload.size());
    out.append(s.payload);
  }
  return out;
}

inline std::vector<Section> decode_container(const std::string& bytes,
                                             const std::string& origin,
                                             std::uint8_t expected_kind) {
  ByteReader r(bytes, origin);
  const std::string magic = r.raw(5);
  if (std::memcmp(magic.data(), kCheckpointMagic, 5) != 0)
    throw FormatError(origin + ": bad magic, not a VSECK checkpoint");
  const std::uint8_t ver = r.u8();
  if (ver != kCheckpointVersion)
    throw FormatError(origin + ": unsupported checkpoint version " +
                      std::to_string(ver));
  const std::uint8_t kind = r.u8();
  if (kind != expected_kind)
    throw FormatError(origin + ": checkpoint kind mismatch (expected " +
                      (expected_kind == 0 ? std::string("learner") : std::string("oracle")) +
                      ")");
  const std::uint32_t count = r.u32();
  std::vector<Section> sections(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    sections[i].name = get_string(r);
    const std::uint64_t len = r.u64();
    sections[i].payload = r.raw(len);
  }
  r.expect_exhausted();
  return sections;
}

inline std::string encode_grouping(const GroupingModel& g) {
  std::string out;
  put_u32(out, std::uint32_t(g.parts));
  put_u32(out, std::uint32_t(g.channels));
  put_tensor64(out, g.weight);
  put_tensor64(out, g.bias);
  return out;
}

inline GroupingModel decode_grouping(const std::string& bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  const std::uint32_t parts = r.u32();
  const std::uint32_t channels = r.u32();
  GroupingModel g(parts, channels);
  g.weight = get_tensor64(r);
  g.bias = get_tensor64(r);
  if (g.weight.dims() != std::vector<std::size_t>{parts, channels})
    throw FormatError(origin + ": grouping shape mismatch");
  r.expect_exhausted();
  return g;
}

inline std::string encode_mixture(const MixtureModel& m) {
  std::string out;
  put_u32(out, std::uint32_t(m.parts.size()));
  for (const PartMixture& p : m.parts) {
    put_u32(out, std::uint32_t(p.source_part));
    put_tensor64(out, p.prototypes);
    put_u32(out, std::uint32_t(p.priors.size()));
    for (double v : p.priors) put_f64(out, v);
    put_f64(out, p.variance);
  }
  return out;
}

inline MixtureModel decode_mixture(const std::string& bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  MixtureModel m;
  const std::uint32_t n = r.u32();
  m.parts.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    m.parts[i].source_part = r.u32();
    m.parts[i].prototypes = get_tensor64(r);
    const std::uint32_t k = r.u32();
    m.parts[i].priors.resize(k);
    for (std::uint32_t j = 0; j < k; ++j) m.parts[i].priors[j] = r.f64();
    m.parts[i].variance = r.f64();
  }
  r.expect_exhausted();
  return m;
}

inline std::string encode_classifier(const Classifier& c) {
  std::string out;
  put_u32(out, std::uint32_t(c.classes.size()));
  for (int id : c.classes) put_u32(out, std::uint32_t(id));
  put_tensor64(out, c.weight);
  put_tensor64(out, c.bias);
  return out;
}

inline Classifier decode_classifier(const std::string& bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  const std::uint32_t n = r.u32();
  std::vector<int> ids(n);
  for (std::uint32_t i = 0; i < n; ++i) ids[i] = int(r.u32());
  Tensor w = get_tensor64(r);
  Classifier c(ids, w.dim(1));
  c.weight = std::move(w);
  c.bias = get_tensor64(r);
  r.expect_exhausted();
  return c;
}

inline std::string encode_mapper(const SemanticMapper& m) {
  std::string out;
  put_tensor64(out, m.w1);
  put_tensor64(out, m.b1);
  put_tensor64(out, m.w2);
  put_tensor64(out, m.b2);
  return out;
}

inline SemanticMapper decode_mapper(const std::string& bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  Tensor w1 = get_tensor64(r);
  Tensor b1 = get_tensor64(r);
  Tensor w2 = get_tensor64(r);
  Tensor b2 = get_tensor64(r);
  r.expect_exhausted();
  SemanticMapper m(w1.dim(1), w1.dim(0), w2.dim(0));
  m.w1 = std::move(w1);
  m.b1 = std::move(b1);
  m.w2 = std::move(w2);
  m.b2 = std::move(b2);
  return m;
}

inline std::string encode_log(const std::vector<EpochLog>& log) {
  std::string out;
  put_u32(out, std::uint32_t(log.size()));
  for (const EpochLog& e : log) {
    put_u32(out, std::uint32_t(e.epoch));
    put_f64(out, e.l_prt);
    put_f64(out, e.mix_nll);
    put_f64(out, e.phi_xy);
    put_f64(out, e.phi_sx);
  }
  return out;
}

inline std::vector<EpochLog> decode_log(const std::string& bytes,
                                        const std::string& origin) {
  ByteReader r(bytes, origin);
  std::vector<EpochLog> log(r.u32());
  for (EpochLog& e : log) {
    e.epoch = r.u32();
    e.l_prt = r.f64();
    e.mix_nll = r.f64();
    e.phi_xy = r.f64();
    e.phi_sx = r.f64();
  }
  r.expect_exhausted();
  return log;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::vector<detail::Section> sections;
  sections.push_back({"config", train_config_json(ck.config).dump()});
  if (ck.config.mode != TrainMode::baseline) {
    sections.push_back({"grouping", detail::encode_grouping(ck.grouping)});
    sections.push_back({"mixture", detail::encode_mixture(ck.mixture)});
    sections.push_back({"classifier", detail::encode_classifier(ck.classifier)});
  }
  if (ck.mapper) sections.push_back({"mapper", detail::encode_mapper(*ck.mapper)});
  if (ck.baseline) {
    std::string payload;
    detail::put_tensor64(payload, ck.baseline->weight);
    detail::put_f64(payload, ck.baseline->margin);
    sections.push_back({"baseline", std::move(payload)});
  }
  sections.push_back({"log", detail::encode_log(ck.log)});
  return detail::encode_container(0, sections);
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  Checkpoint ck;
  bool have_config = false;
  for (const auto& s : detail::decode_container(bytes, origin, 0)) {
    if (s.name == "config") {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(s.payload);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": config section: " + e.what());
      }
      train_config_apply_json(ck.config, j);
      have_config = true;
    } else if (s.name == "grouping") {
      ck.grouping = detail::decode_grouping(s.payload, origin);
    } else if (s.name == "mixture") {
      ck.mixture = detail::decode_mixture(s.payload, origin);
    } else if (s.name == "classifier") {
      ck.classifier = detail::decode_classifier(s.payload, origin);
    } else if (s.name == "mapper") {
      ck.mapper = detail::decode_mapper(s.payload, origin);
    } else if (s.name == "baseline") {
      detail::ByteReader r(s.payload, origin);
      CompatibilityBaseline b;
      b.weight = detail::get_tensor64(r);
      b.margin = r.f64();
      r.expect_exhausted();
      ck.baseline = std::move(b);
    } else if (s.name == "log") {
      ck.log = detail::decode_log(s.payload, origin);
    } else {
      throw FormatError(origin + ": unknown checkpoint section '" + s.name + "'");
    }
  }
  if (!have_config) throw FormatError(origin + ": missing config section");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path), path.string());
}

inline std::string encode_oracle(const VisualOracle& oracle) {
  std::vector<detail::Section> sections;
  nlohmann::json meta;
  meta["flat"] = oracle.flat;
  meta["use_raw_parts"] = oracle.use_raw_parts;
  meta["seed"] = oracle.seed;
  meta["feature_source"] = oracle.feature_source;
  meta["channel_perm"] = oracle.channel_perm;
  sections.push_back({"oracle_meta", meta.dump()});
  if (!oracle.use_raw_parts)
    sections.push_back({"grouping", detail::encode_grouping(oracle.grouping)});
  sections.push_back({"mixture", detail::encode_mixture(oracle.mixture)});
  return detail::encode_container(1, sections);
}

inline VisualOracle decode_oracle(const std::string& bytes, const std::string& origin) {
  VisualOracle oracle;
  bool have_meta = false;
  for (const auto& s : detail::decode_container(bytes, origin, 1)) {
    if (s.name == "oracle_meta") {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(s.payload);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": oracle_meta section: " + e.what());
      }
      oracle.flat = j["flat"].get<bool>();
      oracle.use_raw_parts = j["use_raw_parts"].get<bool>();
      oracle.seed = j["seed"].get<std::uint64_t>();
      oracle.feature_source = j["feature_source"].get<std::string>();
      oracle.channel_perm = j["channel_perm"].get<std::vector<std::size_t>>();
      have_meta = true;
    } else if (s.name == "grouping") {
      oracle.grouping = detail::decode_grouping(s.payload, origin);
    } else if (s.name == "mixture") {
      oracle.mixture = detail::decode_mixture(s.payload, origin);
    } else {
      throw FormatError(origin + ": unknown oracle section '" + s.name + "'");
    }
  }
  if (!have_meta) throw FormatError(origin + ": missing oracle_meta section");
  return oracle;
}

inline void save_oracle(const VisualOracle& oracle, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_oracle(oracle));
}

inline VisualOracle load_oracle(const std::filesystem::path& path) {
  return decode_oracle(detail::read_file_bytes(path), path.string());
}

}  // namespace vsemb
