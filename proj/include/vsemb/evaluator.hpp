#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vsemb/checkpoint.hpp"
#include "vsemb/common.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/potentials.hpp"
#include "vsemb/trainer.hpp"

namespace vsemb {

enum class EvalSetting { zsl, gzsl };

inline const char* to_string(EvalSetting s) {
  return s == EvalSetting::zsl ? "zsl" : "gzsl";
}

inline EvalSetting eval_setting_from_string(const std::string& s) {
  if (s == "zsl") return EvalSetting::zsl;
  if (s == "gzsl") return EvalSetting::gzsl;
  throw ConfigError("unknown setting '" + s + "'");
}

struct EvalReport {
  std::map<int, double> per_class;  // percent
  double ts = 0.0;   // unseen average (the accuracy in ZSL)
  double tr = 0.0;   // seen average (GZSL only)
  double H = 0.0;
  EvalSetting setting = EvalSetting::gzsl;
  std::string split_id = "default";
  std::size_t n_evaluated = 0;
};

// Mean over classes of within-class top-1 accuracy, in percent.
inline double per_class_top1(const std::vector<int>& predictions,
                             const std::vector<int>& labels,
                             const std::set<int>& classes) {
  if (predictions.size() != labels.size())
    throw EvalError("per_class_top1: prediction/label count mismatch");
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!classes.count(labels[i])) continue;
    auto& t = tally[labels[i]];
    t.second += 1;
    if (predictions[i] == labels[i]) t.first += 1;
  }
  double acc = 0.0;
  for (int c : classes) {
    auto it = tally.find(c);
    if (it == tally.end() || it->second.second == 0)
      throw EvalError("per_class_top1: class " + std::to_string(c) +
                      " has no test instances");
    acc += double(it->second.first) / double(it->second.second);
  }
  return 100.0 * acc / double(classes.size());
}

inline double harmonic_mean(double ts, double tr) {
  if (ts < 0.0 || tr < 0.0) throw EvalError("harmonic_mean: negative input");
  if (ts == 0.0 || tr == 0.0) return 0.0;
  return 2.0 * ts * tr / (ts + tr);
}

namespace detail {

inline Codebook flatten_visual_codebook(const Codebook& cb) {
  Codebook out;
  out.kind = CodebookKind::visual_flat;
  for (const auto& [id, t] : cb.entries) {
    PiEmbedding pi;
    pi.pi = t;
    out.entries[id] = flatten_pi(pi).pi;
  }
  return out;
}

inline Codebook subset_codebook(const Codebook& cb, const std::set<int>& keep) {
  Codebook out;
  out.kind = cb.kind;
  std::vector<int> missing;
  for (int id : keep) {
    if (cb.has(id))
      out.entries[id] = cb.at(id);
    else
      missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: codebook missing classes:";
    for (int id : missing) msg += " " + std::to_string(id);
    throw EvalError(msg);
  }
  return out;
}

}  // namespace detail

// Runs the checkpoint's prediction rule over the test split against the
// candidate label set implied by the setting (GZSL: seen + unseen, ZSL:
// unseen only, with seen-class test instances excluded from scoring).
inline EvalReport evaluate(const Checkpoint& ck, const Dataset& ds,
                           const Codebook& codebook, EvalSetting setting,
                           int threads = 1) {
  EvalReport report;
  report.setting = setting;
  report.split_id = ds.split.name;

  std::set<int> candidates;
  if (setting == EvalSetting::gzsl) {
    candidates.insert(ds.split.seen_classes.begin(), ds.split.seen_classes.end());
    candidates.insert(ds.split.unseen_classes.begin(), ds.split.unseen_classes.end());
  } else {
    candidates = ds.split.unseen_classes;
  }
  if (candidates.empty()) throw EvalError("evaluate: empty candidate class set");

  // Resolve the codebook form the checkpoint predicts against.
  const TrainMode mode = ck.config.mode;
  Codebook cand_cb;
  if (mode == TrainMode::visual || mode == TrainMode::visual_flat ||
      (mode == TrainMode::baseline && codebook.kind != CodebookKind::semantic)) {
    Codebook vis = codebook;
    const bool want_flat = mode != TrainMode::visual;
    if (codebook.kind == CodebookKind::semantic)
      throw EvalError("evaluate: visual checkpoint needs a visual codebook");
    if (want_flat && vis.kind == CodebookKind::visual_structured)
      vis = detail::flatten_visual_codebook(vis);
    if (!want_flat && vis.kind != CodebookKind::visual_structured)
      throw EvalError("evaluate: structured visual codebook required");
    cand_cb = detail::subset_codebook(vis, candidates);
  } else {
    if (codebook.kind != CodebookKind::semantic)
      throw EvalError("evaluate: semantic checkpoint needs a semantic codebook");
    cand_cb = detail::subset_codebook(codebook, candidates);
  }

  std::optional<ScoringCodebook> scoring;
  if (mode == TrainMode::semantic || mode == TrainMode::baseline)
    scoring = ScoringCodebook::build(
        cand_cb, cand_cb.kind == CodebookKind::semantic && ck.config.normalize_codebook);

  std::vector<std::size_t> eval_idx;
  for (std::size_t i : ds.test_indices()) {
    const int y = ds.instances[i].class_id;
    if (setting == EvalSetting::zsl && !ds.split.unseen_classes.count(y)) continue;
    eval_idx.push_back(i);
  }

  std::vector<int> predictions(eval_idx.size());
  std::vector<int> labels(eval_idx.size());
  parallel_for(eval_idx.size(), threads, [&](std::size_t j) {
    const Instance& inst = ds.instances[eval_idx[j]];
    labels[j] = inst.class_id;
    if (mode == TrainMode::baseline) {
      predictions[j] = baseline_predict(*ck.baseline, inst.feature_map.values(), *scoring);
    } else if (mode == TrainMode::semantic) {
      predictions[j] = predict_semantic(*ck.mapper, checkpoint_pi(ck, inst), *scoring);
    } else {
      predictions[j] = predict_visual(checkpoint_pi(ck, inst), cand_cb);
    }
  });

  report.n_evaluated = eval_idx.size();
  for (int c : candidates) {
    std::size_t correct = 0, total = 0;
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[j] == c) {
        total += 1;
        correct += predictions[j] == c ? 1 : 0;
      }
    if (total == 0)
      throw EvalError("evaluate: class " + std::to_string(c) +
                      " has no test instances");
    report.per_class[c] = 100.0 * double(correct) / double(total);
  }

  auto class_mean = [&](const std::set<int>& cls) {
    double acc = 0.0;
    for (int c : cls) acc += report.per_class.at(c);
    return cls.empty() ? 0.0 : acc / double(cls.size());
  };

  report.ts = class_mean(ds.split.unseen_classes);
  if (setting == EvalSetting::gzsl) {
    report.tr = class_mean(ds.split.seen_classes);
    report.H = harmonic_mean(report.ts, report.tr);
  }
  return report;
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "setting,split,ts,tr,H,n\n";
  os << to_string(r.setting) << "," << r.split_id << ","
     << detail::format_double(r.ts) << "," << detail::format_double(r.tr) << ","
     << detail::format_double(r.H) << "," << r.n_evaluated << "\n";
  return os.str();
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "setting  split     ts     tr      H      n\n";
  os << std::left << std::setw(8) << to_string(r.setting) << " "
     << std::setw(8) << r.split_id << std::right << " " << std::setw(6) << r.ts
     << " " << std::setw(6) << r.tr << " " << std::setw(6) << r.H << " "
     << std::setw(6) << r.n_evaluated << "\n";
  return os.str();
}

}  // namespace vsemb
