#pragma once

// Command-line front end. Kept in a header so the test suite can drive the
// exact same code path in-process.

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dabdu/dabdu.hpp"

namespace dabdu::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

struct Options {
  data::DatasetSpec data;
  ModelConfig model;
  TrainConfig train;
  std::string variant = "DA-BDense-UNet";
  std::string cell_output = "identity";
  fs::path data_dir = "data";
  fs::path runs_dir = "runs";
  std::string name;  // defaults to the variant name
  bool emit_pgm = false;
  bool timing = false;

  // per-command
  fs::path weights;
  std::string split = "val";
  fs::path input;
  fs::path out;
  std::string variants = "all";
  std::size_t gradcheck_seeds = 5;
};

inline std::string run_name(const Options& o) { return o.name.empty() ? o.variant : o.name; }

inline ModelConfig model_config(const Options& o) {
  ModelConfig m = o.model;
  m.height = m.width = o.data.size;
  m.seed = o.train.seed;
  if (o.cell_output == "identity") {
    m.cell_output = nn::CellOutput::Identity;
  } else if (o.cell_output == "tanh") {
    m.cell_output = nn::CellOutput::Tanh;
  } else {
    throw ConfigError("cell_output must be identity or tanh");
  }
  return configure_variant(parse_variant(o.variant), m);
}

// Reads the dataset directory when it exists, otherwise generates the
// configured spec in memory.
inline data::Dataset load_or_generate(const Options& o, std::ostream& err) {
  if (fs::exists(o.data_dir / "train") && fs::exists(o.data_dir / "val")) return data::read_dataset(o.data_dir);
  err << "note: " << o.data_dir.string() << " not found; generating the configured dataset in memory\n";
  return data::generate_dataset(o.data);
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline void write_text(const fs::path& path, const std::string& text) { dtf::detail::spit(path, text); }

inline int cmd_gen(const Options& o, std::ostream& out) {
  const auto d = data::generate_dataset(o.data);
  data::write_dataset(o.data_dir, d, o.emit_pgm);
  out << "wrote " << d.train.size() << " train and " << d.val.size() << " val samples to " << o.data_dir.string()
      << "\n";
  return kOk;
}

inline int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  Model model(model_config(o));
  const auto dataset = load_or_generate(o, err);
  const fs::path dir = o.runs_dir / run_name(o);
  RunReport report;
  try {
    report = train(model, dataset, o.train);
  } catch (const DivergenceError& e) {
    write_text(dir / "report.json", dump(report_json(e.snapshot(), o.timing)));
    throw;
  }
  save_weights(model, dir / "weights.dtf");
  write_text(dir / "model.schema.json", dump(model.schema_json()));
  write_text(dir / "report.json", dump(report_json(report, o.timing)));
  out << std::setprecision(6);
  for (const auto& e : report.epochs) {
    out << "epoch " << e.epoch << "  loss " << e.train_loss << "  val DC " << e.val_dc_mean << "\n";
  }
  out << "final val DC " << report.final_dc_mean << " +/- " << report.final_dc_std << " (constant baseline "
      << report.baseline_dc << ")\n";
  out << "wrote " << dir.string() << "\n";
  return kOk;
}

inline fs::path weights_path(const Options& o) {
  return o.weights.empty() ? o.runs_dir / run_name(o) / "weights.dtf" : o.weights;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const Model model = load_weights(weights_path(o));
  if (o.split != "train" && o.split != "val") throw ConfigError("split must be train or val");
  const auto samples = data::read_split(o.data_dir / o.split);
  const auto dc = evaluate(model, samples, o.train.threshold);
  nlohmann::json j{{"split", o.split},
                   {"samples", samples.size()},
                   {"threshold", o.train.threshold},
                   {"dc_mean", dc.mean},
                   {"dc_std", dc.std}};
  out << dump(j);
  return kOk;
}

inline int cmd_infer(const Options& o, std::ostream& out) {
  const Model model = load_weights(weights_path(o));
  const fs::path input = o.input.empty() ? o.data_dir / o.split : o.input;
  const fs::path dest = o.out.empty() ? o.runs_dir / run_name(o) / "predictions" : o.out;
  std::size_t count = 0;
  for (auto index : data::list_indices(input)) {
    const Tensor image = dtf::read_tensor(data::image_path(input, index));
    const Tensor prob = predict(model, image);
    const Tensor mask = binarize(Tensor(image.shape(), std::vector<double>(prob.values().begin(), prob.values().end())),
                                 o.train.threshold);
    const std::string stem = std::to_string(index);
    dtf::write_tensor(dest / (stem + ".pred.dtf"), mask);
    if (o.emit_pgm) {
      data::write_pgm(dest / (stem + ".pred.pgm"), mask);
      data::write_overlay_pgm(dest / (stem + ".overlay.pgm"), image, mask);
    }
    ++count;
  }
  out << "wrote " << count << " predictions to " << dest.string() << "\n";
  return kOk;
}

inline std::vector<Variant> parse_variant_list(const std::string& text) {
  if (text == "all") return {kAllVariants.begin(), kAllVariants.end()};
  std::vector<Variant> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_variant(item));
  }
  return out;
}

inline int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  Options base = o;
  base.variant = "DA-BDense-UNet";
  const ModelConfig cfg = model_config(base);
  const auto variants = parse_variant_list(o.variants);
  const auto dataset = load_or_generate(o, err);
  const auto table = run_ablation(cfg, dataset, variants, o.train);
  const fs::path dest = o.out.empty() ? o.runs_dir / (o.name.empty() ? "ablation" : o.name) : o.out;
  write_text(dest / "ablation.json", dump(ablation_json(table, o.timing)));
  const std::string text = ablation_text(table);
  write_text(dest / "ablation.txt", text);
  out << text;
  return kOk;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  const auto results = run_gradient_suite(o.train.seed, o.gradcheck_seeds);
  bool ok = true;
  for (const auto& r : results) {
    out << (r.passed() ? "PASS " : "FAIL ") << r.name << "  max rel err " << std::scientific << std::setprecision(2)
        << r.max_error << " (tol " << r.tolerance << ", " << r.coordinates << " coords, " << r.seeds << " seeds)\n"
        << std::defaultfloat;
    ok = ok && r.passed();
  }
  return ok ? kOk : kRuntime;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"DA-BDense-UNet: dense U-Net with attention gates and BD-LSTM skip fusion", "dabdu"};
  app.set_config("--config", "", "TOML-style key = value file; keys are the long flag names");
  app.require_subcommand(1);
  app.fallthrough();

  auto* g = app.add_option_group("data");
  g->add_option("--data", o.data_dir, "dataset directory");
  g->add_option("--n_train", o.data.n_train);
  g->add_option("--n_val", o.data.n_val);
  g->add_option("--size", o.data.size, "image height and width");
  g->add_option("--blobs_min", o.data.blobs_min);
  g->add_option("--blobs_max", o.data.blobs_max);
  g->add_option("--radius_min", o.data.radius_min);
  g->add_option("--radius_max", o.data.radius_max);
  g->add_option("--contrast", o.data.contrast);
  g->add_option("--noise", o.data.noise);
  g->add_option("--data_seed", o.data.seed);
  g->add_flag("--emit-pgm,--emit_pgm", o.emit_pgm, "also write 8-bit PGM images");

  auto* m = app.add_option_group("model");
  m->add_option("--variant", o.variant);
  m->add_option("--levels", o.model.levels);
  m->add_option("--stem_channels", o.model.stem_channels);
  m->add_option("--growth_rate", o.model.growth_rate);
  m->add_option("--block_layers", o.model.block_layers);
  m->add_option("--compression", o.model.compression);
  m->add_option("--attention_dim", o.model.attention_dim);
  m->add_option("--cell_output", o.cell_output, "identity or tanh");

  auto* t = app.add_option_group("training");
  t->add_option("--epochs", o.train.epochs);
  t->add_option("--batch_size", o.train.batch_size);
  t->add_option("--lr", o.train.learning_rate);
  t->add_option("--momentum", o.train.momentum);
  t->add_option("--grad_clip", o.train.grad_clip, "max gradient L2 norm per step, 0 disables");
  t->add_option("--threshold", o.train.threshold);
  t->add_option("--seed", o.train.seed, "initialisation, data order and gradcheck seed");
  t->add_option("--runs", o.runs_dir, "output root for runs");
  t->add_option("--name", o.name, "run name (default: variant)");
  t->add_flag("--timing", o.timing, "record wall-clock time in reports");

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  auto* train_cmd = app.add_subcommand("train", "train one variant");
  auto* eval = app.add_subcommand("eval", "Dice coefficient of saved weights on a split");
  eval->add_option("--weights", o.weights);
  eval->add_option("--split", o.split);
  auto* infer = app.add_subcommand("infer", "write predicted masks (and overlays with --emit-pgm)");
  infer->add_option("--weights", o.weights);
  infer->add_option("--split", o.split);
  infer->add_option("--input", o.input, "directory of <index>.img.dtf files");
  infer->add_option("--out", o.out);
  auto* ablate = app.add_subcommand("ablate", "train several variants on identical data and seed");
  ablate->add_option("--variants", o.variants, "all, or a comma-separated list");
  ablate->add_option("--out", o.out);
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seeds", o.gradcheck_seeds, "random draws per case");

  std::vector<const char*> argv{"dabdu"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run 'dabdu --help' for usage\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out);
    if (infer->parsed()) return cmd_infer(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out, err);
    if (gradcheck->parsed()) return cmd_gradcheck(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace dabdu::cli
