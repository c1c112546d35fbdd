// Command-line driver for the diagnosis pipeline. Each subcommand runs one
// stage and communicates with the others only through checkpoint files.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "csr/errors.hpp"
#include "csr/pipeline.hpp"
#include "csr/service.hpp"

namespace {

csr::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("csr");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("CSR_LOG")) {
    const auto parsed = spdlog::level::from_str(level);
    // from_str maps unknown names to off; only accept it when asked for explicitly.
    if (parsed != spdlog::level::off || std::string(level) == "off") {
      spdlog::set_level(parsed);
    } else {
      spdlog::warn("CSR_LOG: unknown level '{}', keeping info", level);
    }
  }
}

std::vector<csr::PrototypeId> parse_ids(const std::string& list) {
  std::vector<csr::PrototypeId> ids;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) ids.push_back(csr::parse_prototype_id(item));
  }
  if (ids.empty()) throw csr::DomainError("no prototype ids given");
  return ids;
}

void write_report(const std::filesystem::path& path, const nlohmann::json& j) {
  csr::write_json_file(path, j);
  spdlog::info("report written to {}", path.string());
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Concept-based similarity reasoning pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string report_path;
  app.add_option("--config", config_path, "Pipeline config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for every stage (overrides the config)");
  app.add_option("--report-path", report_path, "Where evaluation reports are written");

  auto* gen = app.add_subcommand("gen-synthetic", "Generate the synthetic dataset");
  auto* train_concepts = app.add_subcommand("train-concepts", "Train the concept head");
  auto* extract = app.add_subcommand("extract-vectors", "Extract local concept vectors from the train split");
  auto* learn = app.add_subcommand("learn-prototypes", "Learn the projector and the concept prototypes");
  auto* train_head = app.add_subcommand("train-head", "Train the task head on similarity scores");
  auto* eval = app.add_subcommand("eval", "Macro F1 and explanation size on the test split");
  auto* pg_eval = app.add_subcommand("pg-eval", "Pointing-game hit rate on the test split");
  auto* interact_eval = app.add_subcommand("interact-eval", "Oracle interaction gain on the test split");
  auto* refine = app.add_subcommand("refine", "Discard (or restore) prototypes in the atlas checkpoint");
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");

  std::string discard_list, restore_list;
  auto* discard_opt = refine->add_option("--discard", discard_list, "Comma-separated k:m ids to discard");
  auto* restore_opt = refine->add_option("--restore", restore_list, "Comma-separated k:m ids to restore");
  discard_opt->excludes(restore_opt);
  refine->callback([&] {
    if (discard_list.empty() && restore_list.empty()) throw CLI::ValidationError("refine", "--discard or --restore is required");
  });

  std::optional<std::string> host;
  std::optional<int> port;
  serve->add_option("--host", host, "Bind address (overrides the config)");
  serve->add_option("--port", port, "Port; 0 picks a free one (overrides the config)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    csr::PipelineConfig cfg = config_path.empty() ? csr::PipelineConfig{} : csr::load_pipeline_config(config_path);
    if (seed) cfg.apply_seed(*seed);
    auto report_for = [&](const std::string& stage) {
      return report_path.empty() ? cfg.default_report_path(stage) : std::filesystem::path(report_path);
    };

    if (gen->parsed()) {
      const auto m = csr::stage_gen_synthetic(cfg);
      std::cout << "wrote " << m.samples.size() << " samples to " << cfg.data_dir.string() << "\n";
    } else if (train_concepts->parsed()) {
      const auto r = csr::stage_train_concepts(cfg);
      std::cout << "concept head: mean BCE " << r.loss_history.back() << "\n";
    } else if (extract->parsed()) {
      const auto v = csr::stage_extract_vectors(cfg);
      std::cout << "local concept vectors: " << v.size() << "\n";
    } else if (learn->parsed()) {
      const auto r = csr::stage_learn_prototypes(cfg);
      std::cout << "prototype loss: " << r.training.loss_history.back() << "\n";
      std::cout << "intra-inter gap: raw " << r.raw.gap() << ", projected " << r.projected.gap() << "\n";
    } else if (train_head->parsed()) {
      const auto r = csr::stage_train_head(cfg);
      std::cout << "task head: cross-entropy " << r.loss_history.back() << "\n";
    } else if (eval->parsed()) {
      const auto report = csr::stage_eval(cfg);
      write_report(report_for("eval"), report.to_json());
      const auto m = csr::require_manifest(cfg);
      std::cout << report.to_table(m.class_names);
    } else if (pg_eval->parsed()) {
      const auto report = csr::stage_eval(cfg);
      write_report(report_for("pg"), report.to_json());
      if (report.pg_hit_rate) {
        std::cout << "PG hit rate: " << *report.pg_hit_rate << " (" << report.pg_evaluated << " samples with boxes)\n";
      } else {
        std::cout << "PG hit rate: n/a (no test sample has boxes)\n";
      }
    } else if (interact_eval->parsed()) {
      const auto report = csr::stage_interact_eval(cfg);
      write_report(report_for("interact"), report.to_json());
      std::cout << "macro F1: " << report.macro_f1 << " -> " << *report.interacted_macro_f1 << " (" << report.interacted
                << " interacted)\n";
      std::cout << "interaction gain: " << *report.interaction_gain << "\n";
    } else if (refine->parsed()) {
      const bool discard = !discard_list.empty();
      const auto ids = parse_ids(discard ? discard_list : restore_list);
      const auto atlas = csr::stage_refine(cfg, ids, discard);
      std::size_t count = 0;
      for (std::size_t i = 0; i < atlas.size(); ++i) count += atlas.discarded[i] ? 1 : 0;
      std::cout << (discard ? "discarded " : "restored ") << ids.size() << " prototype(s); " << count << " of "
                << atlas.size() << " now discarded\n";
    } else if (serve->parsed()) {
      if (host) cfg.service.host = *host;
      if (port) cfg.service.port = *port;
      csr::Service service(cfg);
      const int bound = service.bind(cfg.service.host, cfg.service.port);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("listening on http://{}:{}", cfg.service.host, bound);
      std::cout << "listening on " << cfg.service.host << ":" << bound << std::endl;
      service.run();
      g_service = nullptr;
    }
  } catch (const csr::ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return 2;
  } catch (const csr::NotFoundError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
