#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabdu/dataset.hpp"
#include "dabdu/metrics.hpp"
#include "dabdu/model.hpp"
#include "dabdu/optim.hpp"

namespace dabdu {

inline constexpr int kReportVersion = 1;

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double grad_clip = 1.0;  // max joint gradient L2 norm per step; 0 disables
  double threshold = 0.5;
  std::uint64_t seed = 0;  // data order

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    Sgd(learning_rate, momentum);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, epochs, batch_size, learning_rate, momentum, grad_clip, threshold, seed)

struct DcSummary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::vector<double> per_sample;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_dc_mean = 0.0;
  double val_dc_std = 0.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EpochRecord, epoch, train_loss, val_dc_mean, val_dc_std)

struct RunReport {
  std::string variant;
  std::string status = "ok";  // ok | diverged | failed
  std::string error;
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  std::size_t parameter_count = 0;
  double baseline_dc = 0.0;  // best constant-mask DC on the validation split
  std::vector<EpochRecord> epochs;
  double final_dc_mean = 0.0;
  double final_dc_std = 0.0;
  double wall_clock_seconds = 0.0;
};

/// Wall-clock time is excluded unless asked for so that reports of identical
/// runs are byte-identical.
inline nlohmann::json report_json(const RunReport& r, bool include_timing = false) {
  nlohmann::json j{{"report_version", kReportVersion},
                   {"variant", r.variant},
                   {"status", r.status},
                   {"seed", r.seed},
                   {"model", r.model},
                   {"train", r.train},
                   {"parameter_count", r.parameter_count},
                   {"baseline_dc", r.baseline_dc},
                   {"epochs", r.epochs},
                   {"final_val_dc_mean", r.final_dc_mean},
                   {"final_val_dc_std", r.final_dc_std}};
  if (!r.error.empty()) j["error"] = r.error;
  if (include_timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  if (j.value("report_version", 0) != kReportVersion) throw FormatError("unsupported report_version", 0);
  RunReport r;
  r.variant = j.at("variant").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.error = j.value("error", std::string{});
  r.seed = j.at("seed").get<std::uint64_t>();
  r.model = j.at("model").get<ModelConfig>();
  r.train = j.at("train").get<TrainConfig>();
  r.parameter_count = j.at("parameter_count").get<std::size_t>();
  r.baseline_dc = j.at("baseline_dc").get<double>();
  r.epochs = j.at("epochs").get<std::vector<EpochRecord>>();
  r.final_dc_mean = j.at("final_val_dc_mean").get<double>();
  r.final_dc_std = j.at("final_val_dc_std").get<double>();
  r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  return r;
}

/// Training stopped on a non-finite loss; carries the partial report.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, RunReport snapshot) : Error(what), snapshot_(std::move(snapshot)) {}
  const RunReport& snapshot() const noexcept { return snapshot_; }

 private:
  RunReport snapshot_;
};

// ---------------------------------------------------------------------------

inline Tensor stack(const std::vector<const Tensor*>& planes) {
  const Shape& s = planes.front()->shape();
  std::vector<double> values;
  values.reserve(planes.size() * planes.front()->numel());
  for (const Tensor* t : planes) {
    if (t->shape() != s) throw ShapeError("cannot stack tensors of different shapes");
    values.insert(values.end(), t->values().begin(), t->values().end());
  }
  Shape out{planes.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor(std::move(out), std::move(values));
}

inline Tensor predict(const Model& model, const Tensor& image) {
  Tape tape(false);
  return model.forward(tape, stack({&image})).prob;
}

/// Per-sample forward passes (one sample per pass, so results do not depend on
/// batching), thresholded and scored.
inline DcSummary evaluate(const Model& model, const std::vector<data::Sample>& samples, double threshold = 0.5) {
  DcSummary out;
  for (const auto& s : samples) {
    const Tensor prob = predict(model, s.image);
    const Tensor pred(s.mask.shape(), std::vector<double>(prob.values().begin(), prob.values().end()));
    out.per_sample.push_back(dice_coefficient(binarize(pred, threshold), s.mask).dc);
  }
  if (out.per_sample.empty()) return out;
  double total = 0.0;
  for (double d : out.per_sample) total += d;
  out.mean = total / static_cast<double>(out.per_sample.size());
  double sq = 0.0;
  for (double d : out.per_sample) sq += (d - out.mean) * (d - out.mean);
  out.std = std::sqrt(sq / static_cast<double>(out.per_sample.size()));
  return out;
}

/// Mean DC of the better of the all-foreground and all-background predictions.
inline double constant_baseline_dc(const std::vector<data::Sample>& samples) {
  if (samples.empty()) return 0.0;
  double fg = 0.0, bg = 0.0;
  for (const auto& s : samples) {
    fg += dice_coefficient(Tensor::full(s.mask.shape(), 1.0), s.mask).dc;
    bg += dice_coefficient(Tensor::zeros(s.mask.shape()), s.mask).dc;
  }
  return std::max(fg, bg) / static_cast<double>(samples.size());
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

/// Minibatch soft-Dice descent with SGD+momentum; validation DC is measured
/// after every epoch.
inline RunReport train(Model& model, const data::Dataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.train.empty()) throw ContractError("training set is empty");
  const auto started = std::chrono::steady_clock::now();

  RunReport report;
  const auto variant = variant_of(model.config());
  report.variant = variant ? std::string(variant_name(*variant)) : "custom";
  report.seed = cfg.seed;
  report.model = model.config();
  report.train = cfg;
  report.parameter_count = model.parameter_count();
  report.baseline_dc = constant_baseline_dc(dataset.val);

  Sgd optimizer(cfg.learning_rate, cfg.momentum);
  const std::size_t n = dataset.train.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = shuffled_order(n, cfg.seed, epoch);
    double loss_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<const Tensor*> images, masks;
      for (std::size_t k = start; k < std::min(n, start + cfg.batch_size); ++k) {
        images.push_back(&dataset.train[order[k]].image);
        masks.push_back(&dataset.train[order[k]].mask);
      }
      Tape tape;
      model.parameters().zero_grad();
      const auto out = model.forward(tape, stack(images));
      const Tensor loss = soft_dice_loss(tape, out.prob, stack(masks));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        report.status = "diverged";
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch << ", batch " << batches + 1;
        report.error = msg.str();
        report.wall_clock_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        throw DivergenceError(report.error, report);
      }
      tape.backward(loss);
      clip_grad_norm(model.parameters(), cfg.grad_clip);
      optimizer.step(model.parameters());
      loss_total += value;
      ++batches;
    }
    const auto val = evaluate(model, dataset.val, cfg.threshold);
    report.epochs.push_back({epoch, loss_total / static_cast<double>(batches), val.mean, val.std});
  }
  report.final_dc_mean = report.epochs.back().val_dc_mean;
  report.final_dc_std = report.epochs.back().val_dc_std;
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

struct ReferenceDc {
  std::string model;  // row label in the published comparison
  double dc;
};

/// Published full-scale DC for each variant (private multi-phase CT cohort).
/// Kept for side-by-side display only; not reproducible with synthetic data.
inline std::optional<ReferenceDc> reference_dc(Variant v) {
  switch (v) {
    case Variant::UNetSkipConcat: return ReferenceDc{"DenUNet", 0.7989};
    case Variant::BDLSTMDenseUNet: return ReferenceDc{"BDLSTM-DenseUNet", 0.8435};
    case Variant::BDenseUNet1: return ReferenceDc{"BDense-UNet-1", 0.8482};
    case Variant::BDenseUNet2: return ReferenceDc{"BDense-UNet-2", 0.8498};
    case Variant::DABDenseUNet: return ReferenceDc{"DA-BDense-UNet", 0.8520};
  }
  return std::nullopt;
}

inline constexpr const char* kReferenceNote =
    "reference_dc values are published full-scale results on a private multi-phase liver CT cohort; they are "
    "shown for comparison only and are not reproducible with the synthetic data used here";

struct AblationTable {
  std::uint64_t seed = 0;
  std::vector<Variant> variants;
  std::vector<RunReport> rows;
};

/// Trains every variant from the same base config, seed and data order. A
/// failing variant is recorded and the rest still run.
inline AblationTable run_ablation(const ModelConfig& base, const data::Dataset& dataset,
                                  const std::vector<Variant>& variants, const TrainConfig& cfg) {
  if (variants.size() < 2) throw ContractError("an ablation needs at least two variants");
  AblationTable table;
  table.seed = cfg.seed;
  table.variants = variants;
  for (auto v : variants) {
    RunReport row;
    try {
      Model model(configure_variant(v, base));
      row = train(model, dataset, cfg);
    } catch (const DivergenceError& e) {
      row = e.snapshot();
    } catch (const std::exception& e) {
      row.status = "failed";
      row.error = e.what();
      row.seed = cfg.seed;
      row.model = configure_variant(v, base);
      row.train = cfg;
    }
    row.variant = std::string(variant_name(v));
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline nlohmann::json ablation_json(const AblationTable& t, bool include_timing = false) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    auto j = report_json(t.rows[i], include_timing);
    if (auto ref = reference_dc(t.variants[i])) {
      j["reference_dc"] = {{"model", ref->model}, {"dc", ref->dc}, {"reproducible", false}};
    }
    rows.push_back(std::move(j));
  }
  return {{"report_version", kReportVersion},
          {"kind", "ablation"},
          {"seed", t.seed},
          {"reference_note", kReferenceNote},
          {"rows", rows}};
}

inline std::string ablation_text(const AblationTable& t) {
  auto fixed = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  std::vector<std::array<std::string, 3>> cells{{"Model", "DC (synthetic, mean +/- std)", "Reference DC*"}};
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    std::string dc = r.status == "ok" ? fixed(r.final_dc_mean) + " +/- " + fixed(r.final_dc_std) : r.status;
    const auto ref = reference_dc(t.variants[i]);
    cells.push_back({r.variant, dc, ref ? fixed(ref->dc) : "-"});
  }
  std::array<std::size_t, 3> width{};
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < 3; ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  auto line = [&](const std::array<std::string, 3>& row) {
    for (std::size_t c = 0; c < 3; ++c) {
      out += (c ? " | " : "") + row[c] + std::string(width[c] - row[c].size(), ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += "\n";
  };
  line(cells[0]);
  out += std::string(width[0], '-') + "-+-" + std::string(width[1], '-') + "-+-" + std::string(width[2], '-') + "\n";
  for (std::size_t i = 1; i < cells.size(); ++i) line(cells[i]);
  out += "\n* " + std::string(kReferenceNote) + ".\n";
  out += "seed: " + std::to_string(t.seed) + "\n";
  return out;
}

}  // namespace dabdu
