#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "kcqrl/kcqrl.hpp"

using namespace kcqrl;

namespace {

void print_annotate_summary(const AnnotateSummary& s) {
  std::cout << "annotate: " << s.questions << " questions, " << s.failures.size() << " failed\n";
  for (int i = 0; i < 3; ++i) {
    std::cout << "  " << kStageNames[i] << ": " << s.calls[i] << " backend calls, " << s.hits[i] << " cache hits\n";
  }
  for (const auto& f : s.failures) std::cerr << "  question " << f.question_id << ": " << f.message << "\n";
}

void write_report(const EvalReport& rep, const std::filesystem::path& dir) {
  for (const auto& p : emit_report(rep, dir)) std::cout << "wrote " << p.string() << "\n";
  for (const auto& s : summarize(rep)) {
    std::cout << s.experiment << " " << s.variant << " fraction=" << s.fraction << " auc=" << s.mean << " +- " << s.std
              << " (" << s.aucs.size() << " folds)\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KC annotation, contrastive question representations and knowledge tracing"};
  app.require_subcommand(1);
  app.fallthrough();

  const RunConfig defaults;
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags override its values");
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_opts;
  for (const auto& f : config_fields()) {
    auto* opt = app.add_option("--" + f.key, flag_values[f.key], f.help);
    opt->default_str(config_value_string(defaults, f));
    flag_opts[f.key] = opt;
  }

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus, interactions and mock fixture to out_dir");
  auto* annotate = app.add_subcommand("annotate", "annotate questions with steps, KCs and step-KC pairs");
  auto* cluster = app.add_subcommand("cluster", "cluster KC texts into clusters.json");
  auto* train_enc = app.add_subcommand("train-encoder", "contrastive training of the question encoder");
  auto* embed = app.add_subcommand("embed", "export question embeddings");
  auto* train_kt_cmd = app.add_subcommand("train-kt", "train one KT model (kt.arch, kt.mode) on all students");
  auto* evaluate = app.add_subcommand("evaluate", "k-fold next-step and multi-step evaluation");
  auto* sweep = app.add_subcommand("sweep", "student-count sensitivity sweep");
  auto* ablate = app.add_subcommand("ablate", "ablation grid over embedding variants");
  auto* pipeline = app.add_subcommand("pipeline", "cluster, train-encoder, embed, train-kt, evaluate, report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_config_file(cfg, config_path);
    for (const auto& f : config_fields()) {
      if (flag_opts[f.key]->count() > 0) set_config_string(cfg, f.key, flag_values[f.key]);
    }

    if (synth->parsed()) {
      const auto o = stage_synth(cfg);
      for (const auto& p : {o.questions, o.corpus, o.interactions, o.fixture}) std::cout << "wrote " << p.string() << "\n";
    } else if (annotate->parsed()) {
      const auto backend = make_backend(cfg);
      const auto s = with_stage("annotate", [&] { return stage_annotate(cfg, *backend); });
      print_annotate_summary(s);
      if (!s.failures.empty()) {
        for (const auto& f : s.failures)
          if (f.exit_code == 2) return 2;
        return 1;
      }
    } else if (cluster->parsed()) {
      const auto a = with_stage("cluster", [&] { return stage_cluster(cfg); });
      std::cout << "cluster: " << a.size() << " kcs in " << a.num_clusters() << " clusters -> "
                << clusters_path(cfg).string() << "\n";
    } else if (train_enc->parsed()) {
      const auto t = with_stage("train-encoder", [&] { return stage_train_encoder(cfg); });
      std::cout << "train-encoder: " << t.loss_trace.size() << " epochs, final loss "
                << (t.loss_trace.empty() ? 0.0 : t.loss_trace.back()) << " -> " << encoder_path(cfg).string() << "\n";
    } else if (embed->parsed()) {
      const auto t = with_stage("embed", [&] { return stage_embed(cfg); });
      std::cout << "embed: " << t.rows.size() << " questions, dim " << t.dim << " -> " << cfg.embeddings_path().string()
                << "\n";
    } else if (train_kt_cmd->parsed()) {
      const auto t = with_stage("train-kt", [&] {
        return stage_train_kt(cfg, parse_arch(cfg.kt_arch), parse_mode(cfg.kt_mode));
      });
      std::cout << "train-kt: final loss " << (t.loss_trace.empty() ? 0.0 : t.loss_trace.back()) << " -> "
                << t.checkpoint.string() << "\n";
    } else if (evaluate->parsed()) {
      auto rep = with_stage("evaluate", [&] { return stage_evaluate(cfg); });
      rep.config = config_snapshot(cfg);
      rep.provenance = provenance(cfg);
      write_report(rep, cfg.out() / "evaluate");
    } else if (sweep->parsed()) {
      write_report(with_stage("sweep", [&] { return stage_sweep(cfg); }), cfg.out() / "sweep");
    } else if (ablate->parsed()) {
      write_report(with_stage("ablate", [&] { return stage_ablate(cfg); }), cfg.out() / "ablation");
    } else if (pipeline->parsed()) {
      const auto rep = run_pipeline(cfg, std::cout);
      for (const auto& s : summarize(rep)) {
        std::cout << s.experiment << " " << s.variant << " auc=" << s.mean << " +- " << s.std << "\n";
      }
    }
    return 0;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
