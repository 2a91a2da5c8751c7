// calseg: generate-data | train | eval | report

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "calseg/datagen.hpp"
#include "calseg/errors.hpp"
#include "calseg/harness.hpp"
#include "calseg/report.hpp"
#include "calseg/uncertainty.hpp"

using namespace calseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TrainOverrides {
  std::string config;
  std::optional<std::string> profile, manifest, output_dir;
  std::optional<int> epochs, batch_size, latent_dim, k_train, s_eval, base_width, threads;
  std::optional<double> learning_rate, beta, gamma;
  std::optional<std::uint64_t> seed;
  std::optional<bool> variational_dropout;

  TrainConfig resolve() const {
    json j = json::object();
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw IoError("cannot read config " + config);
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError("config " + config + ": " + e.what());
      }
    }
    auto set = [&j](const char* key, const auto& opt) {
      if (opt) j[key] = *opt;
    };
    set("profile", profile);
    set("manifest", manifest);
    set("output_dir", output_dir);
    set("epochs", epochs);
    set("batch_size", batch_size);
    set("latent_dim", latent_dim);
    set("k_train", k_train);
    set("s_eval", s_eval);
    set("base_width", base_width);
    set("threads", threads);
    set("learning_rate", learning_rate);
    set("beta", beta);
    set("gamma", gamma);
    set("seed", seed);
    set("variational_dropout", variational_dropout);
    // A profile given only on the command line still resets output_dir.
    return TrainConfig::from_json(j);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated probabilistic segmentation with aleatoric/epistemic uncertainty"};
  app.require_subcommand(1);

  GeneratorConfig gen;
  int size = 64;
  std::string gen_out = "data/synthetic";
  auto* generate = app.add_subcommand("generate-data", "Write a synthetic multi-grader dataset");
  generate->add_option("--n", gen.n_images, "Number of images")->check(CLI::PositiveNumber);
  generate->add_option("--graders", gen.graders, "Annotations per image")->check(CLI::PositiveNumber);
  generate->add_option("--disagreement", gen.disagreement, "Grader boundary disagreement in [0, 1]");
  generate->add_option("--size", size, "Image height and width (multiple of 8)");
  generate->add_option("--seed", gen.seed, "Dataset seed");
  generate->add_option("--out", gen_out, "Output directory");

  TrainOverrides tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "JSON config mirroring TrainConfig fields");
  train_cmd->add_option("--profile", tr.profile, "lidc, miccai or desk");
  train_cmd->add_option("--manifest", tr.manifest, "Dataset manifest.json");
  train_cmd->add_option("--output_dir", tr.output_dir, "Run directory");
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--batch_size", tr.batch_size, "Images per batch");
  train_cmd->add_option("--learning_rate", tr.learning_rate);
  train_cmd->add_option("--beta", tr.beta);
  train_cmd->add_option("--gamma", tr.gamma);
  train_cmd->add_option("--latent_dim", tr.latent_dim);
  train_cmd->add_option("--k_train", tr.k_train);
  train_cmd->add_option("--s_eval", tr.s_eval);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--base_width", tr.base_width);
  train_cmd->add_option("--variational_dropout", tr.variational_dropout);
  train_cmd->add_option("--threads", tr.threads, "OpenMP threads (0 = default)");

  std::string checkpoint, manifest, split = "test", eval_out, label = "model";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int samples = 50;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint stem (without .bin/.json)")->required();
  eval_cmd->add_option("--manifest", manifest, "Dataset manifest.json")->required();
  eval_cmd->add_option("--split", split, "train, val or test");
  eval_cmd->add_option("--seeds", seeds, "Evaluation seeds");
  eval_cmd->add_option("--samples", samples, "Samples per image")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--label", label, "Row label in tables");
  eval_cmd->add_option("--out", eval_out, "Report prefix (writes .json and .csv)");

  std::vector<std::string> report_inputs;
  std::string table_out = "results/table", fig_checkpoint, fig_manifest, fig_dir;
  int fig_count = 3;
  auto* report_cmd = app.add_subcommand("report", "Emit metric tables and figures");
  report_cmd->add_option("--reports", report_inputs, "MetricsReport JSON files");
  report_cmd->add_option("--out", table_out, "Table prefix (writes .csv and .json)");
  report_cmd->add_option("--checkpoint", fig_checkpoint, "Checkpoint for figures");
  report_cmd->add_option("--manifest", fig_manifest, "Dataset for figures");
  report_cmd->add_option("--figures", fig_dir, "Figure directory");
  report_cmd->add_option("--count", fig_count, "Test images to render");
  report_cmd->add_option("--samples", samples, "Samples per figure");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      gen.height = gen.width = size;
      const Dataset d = generate_dataset(gen);
      std::cout << "wrote " << save_dataset(d, gen_out).string() << " (" << d.items.size() << " images)\n";
    } else if (*train_cmd) {
      const TrainConfig cfg = tr.resolve();
      const TrainResult r = train(cfg);
      std::cout << "checkpoint " << r.checkpoint.string() << "\nlog " << r.log.string() << '\n';
    } else if (*eval_cmd) {
      const MetricsReport r = evaluate(checkpoint, manifest, parse_split(split), seeds, samples, eval_out, label);
      std::cout << std::setprecision(4) << r.label << " (" << r.split << ", S=" << r.samples << "): GED^2 "
                << r.aggregate.ged_mean << " +- " << r.aggregate.ged_std << ", NCC " << r.aggregate.ncc_mean
                << " +- " << r.aggregate.ncc_std << '\n';
    } else if (*report_cmd) {
      if (!report_inputs.empty()) {
        std::vector<MetricsReport> reports;
        for (const auto& p : report_inputs) {
          std::ifstream in(p);
          if (!in) throw IoError("cannot read " + p);
          reports.push_back(MetricsReport::from_json(json::parse(in)));
        }
        emit_tables(reports, table_out);
        std::cout << "wrote " << table_out << ".{csv,json}\n";
      }
      if (!fig_checkpoint.empty()) {
        if (fig_manifest.empty() || fig_dir.empty()) throw ConfigError("figures need --manifest and --figures");
        const ProbUNet model = ProbUNet::load(fig_checkpoint);
        const Dataset d = load_dataset(fig_manifest);
        const auto items = d.select(Split::test);
        for (int i = 0; i < fig_count && i < static_cast<int>(items.size()); ++i) {
          const DatasetItem& item = *items[i];
          Rng rng = make_rng(0, static_cast<std::uint64_t>(i) + 1);
          const ProbMapSampleSet s = draw_samples(model, item.image, samples, rng);
          const UncertaintyMaps u = decompose(s);
          const auto masks = binarize_samples(s);
          const auto shown = std::span(masks).first(std::min<std::size_t>(masks.size(), 6));
          render_sample_grid(item.image, item.annotations.masks, shown, fs::path(fig_dir) / (item.image.id + "_samples.png"));
          render_uncertainty_panel(item.image, item.stats.variance_map, u.aleatoric, u.epistemic,
                                   fs::path(fig_dir) / (item.image.id + "_uncertainty.png"));
        }
        std::cout << "wrote figures to " << fig_dir << '\n';
      }
      if (report_inputs.empty() && fig_checkpoint.empty()) throw ConfigError("report needs --reports and/or --checkpoint");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
