#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "maskforge/errors.hpp"
#include "maskforge/maskkit.hpp"
#include "maskforge/pipeline.hpp"
#include "maskforge/studysvc.hpp"
#include "maskforge/synth.hpp"
#include "maskforge/verifybench.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace maskforge;

namespace {

void write_json(const json& doc, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << doc.dump(2) << '\n';
    return;
  }
  std::ofstream f(out);
  if (!f) throw IoError("cannot write " + out);
  f << doc.dump(2) << '\n';
}

StudyServer* running_server = nullptr;

void on_signal(int) {
  if (running_server) running_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maskforge: synthetic mask overlay, verification benchmark and realism study"};
  app.require_subcommand(1);

  std::string manifest_path, masks_dir, out_dir, layers_dir, records_path;
  double iou_threshold = 0.5;
  std::uint64_t seed = 0;
  bool no_fallback = false;
  unsigned jobs = 1;

  auto* enhance = app.add_subcommand("enhance", "Place masks on every manifest entry and write layers");
  enhance->add_option("--manifest", manifest_path, "Corpus manifest (JSON)")->required();
  enhance->add_option("--masks", masks_dir, "Mask template directory")->required();
  enhance->add_option("--iou-threshold", iou_threshold, "QA gate threshold")->check(CLI::Range(0.0, 1.0));
  enhance->add_option("--seed", seed, "Run seed");
  enhance->add_option("--out", out_dir, "Output directory")->required();
  enhance->add_flag("--no-fallback", no_fallback, "Disable the global affine fallback");
  enhance->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* overlay = app.add_subcommand("overlay", "Composite generated layers over the source images");
  overlay->add_option("--manifest", manifest_path)->required();
  overlay->add_option("--layers", layers_dir)->required();
  overlay->add_option("--out", out_dir)->required();

  auto* report = app.add_subcommand("report", "Summarize a records file");
  report->add_option("--records", records_path)->required();

  double fraction = 0.01;
  auto* sample = app.add_subcommand("sample", "Seeded sample of generated ids for manual inspection");
  sample->add_option("--records", records_path)->required();
  sample->add_option("--fraction", fraction)->check(CLI::Range(0.0, 1.0));
  sample->add_option("--seed", seed);

  std::string embeddings_path, pairs_path, out_path;
  double far = 0.001;
  int folds = 10;
  std::size_t make_pairs = 0;
  auto* bench = app.add_subcommand("bench", "Accuracy at a target FAR with k-fold calibration");
  bench->add_option("--embeddings", embeddings_path, "Binary (MFEB) or CSV embeddings")->required();
  bench->add_option("--pairs", pairs_path, "Pair list (JSON); written when --make-pairs is given")->required();
  bench->add_option("--far", far)->check(CLI::Range(0.0, 1.0));
  bench->add_option("--folds", folds)->check(CLI::Range(2, 1000));
  bench->add_option("--seed", seed);
  bench->add_option("--out", out_path, "Report JSON (stdout when omitted)");
  bench->add_option("--make-pairs", make_pairs, "Generate this many same pairs per identity first");

  auto* study = app.add_subcommand("study", "Pairwise realism study");
  study->require_subcommand(1);
  std::string dir_a, dir_b, label_a, label_b, votes_path, bind = "127.0.0.1:8080", ui_dir, counts_path;
  std::size_t n_pairs = 200, pairs_count = 200;
  bool allow_revote = false;
  auto* study_make = study->add_subcommand("make", "Sample a study manifest");
  study_make->add_option("--a", dir_a)->required();
  study_make->add_option("--b", dir_b)->required();
  study_make->add_option("--label-a", label_a)->required();
  study_make->add_option("--label-b", label_b)->required();
  study_make->add_option("--n", n_pairs);
  study_make->add_option("--seed", seed);
  study_make->add_option("--out", out_path)->required();
  auto* study_serve = study->add_subcommand("serve", "Serve the study over HTTP");
  study_serve->add_option("--manifest", manifest_path)->required();
  study_serve->add_option("--votes", votes_path)->required();
  study_serve->add_option("--bind", bind, "HOST:PORT");
  study_serve->add_option("--ui", ui_dir, "Static UI directory served at /");
  study_serve->add_flag("--allow-revote", allow_revote);
  auto* study_tally = study->add_subcommand("tally", "Tally a vote store, or raw per-annotator counts");
  study_tally->add_option("--manifest", manifest_path);
  study_tally->add_option("--votes", votes_path);
  study_tally->add_option("--counts", counts_path, "CSV annotator,votes_a,votes_b");
  study_tally->add_option("--pairs-count", pairs_count);

  auto* synth = app.add_subcommand("synth", "Synthetic fixtures");
  synth->require_subcommand(1);
  std::size_t n_faces = 100;
  auto* synth_masks = synth->add_subcommand("masks", "Write the shipped mask templates");
  synth_masks->add_option("--out", out_dir)->required();
  auto* synth_corpus = synth->add_subcommand("corpus", "Write a synthetic face corpus");
  synth_corpus->add_option("--n", n_faces);
  synth_corpus->add_option("--seed", seed);
  synth_corpus->add_option("--out", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (enhance->parsed()) {
      QaConfig qa;
      qa.iou_threshold = iou_threshold;
      qa.allow_fallback = !no_fallback;
      const BatchReport rep =
          enhance_corpus(load_manifest(manifest_path), load_registry(masks_dir), qa, seed, out_dir, {jobs});
      std::printf("generated %zu/%zu (fallback %zu, failed %zu)\n", rep.generated, rep.total, rep.fallback_count,
                  rep.failed);
    } else if (overlay->parsed()) {
      const OverlayResult r = overlay_corpus(load_manifest(manifest_path), layers_dir, out_dir);
      std::printf("composited %zu, skipped %zu\n", r.composited, r.skipped);
    } else if (report->parsed()) {
      const auto records = read_records(records_path);
      write_json(to_json(qa_report(records)), "-");
    } else if (sample->parsed()) {
      const auto records = read_records(records_path);
      for (const std::string& id : sample_for_annotation(records, fraction, seed)) std::cout << id << '\n';
    } else if (bench->parsed()) {
      const EmbeddingTable table = read_embeddings(embeddings_path);
      PairSet pairs;
      if (make_pairs > 0) {
        pairs = generate_pairs(table, make_pairs, seed);
        save_pairs(pairs, pairs_path);
      } else {
        pairs = load_pairs(pairs_path);
      }
      validate(pairs, table);
      const VerificationReport rep = evaluate(table, pairs, make_folds(pairs, folds, seed), far);
      json doc = to_json(rep);
      doc["seed"] = seed;
      doc["pair_count"] = pairs.pairs.size();
      write_json(doc, out_path);
      std::cerr << doc["metric"].get<std::string>() << " " << doc["accuracy_cell"].get<std::string>() << '\n';
    } else if (study_make->parsed()) {
      const StudyManifest m = make_study(dir_a, dir_b, label_a, label_b, n_pairs, seed);
      save_study(m, out_path);
      std::printf("%s: %zu pairs\n", m.study_id.c_str(), m.pairs.size());
    } else if (study_serve->parsed()) {
      ServerOptions opts;
      const auto colon = bind.rfind(':');
      if (colon == std::string::npos) throw ValidationError("--bind must be HOST:PORT");
      opts.host = bind.substr(0, colon);
      opts.port = std::stoi(bind.substr(colon + 1));
      opts.allow_revote = allow_revote;
      if (!ui_dir.empty()) opts.ui_dir = fs::path(ui_dir);
      StudyServer server(load_study(manifest_path), votes_path, opts);
      const int port = server.start();
      std::printf("serving on http://%s:%d\n", opts.host.c_str(), port);
      std::fflush(stdout);
      running_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.wait();
      running_server = nullptr;
    } else if (study_tally->parsed()) {
      TallyTable t;
      if (!counts_path.empty()) {
        const auto rows = read_tally_csv(counts_path);
        t = tally_counts(rows, pairs_count);
      } else {
        if (manifest_path.empty() || votes_path.empty())
          throw ValidationError("tally needs --manifest and --votes, or --counts");
        const auto votes = read_votes(votes_path);
        t = tally(votes, load_study(manifest_path));
      }
      write_json(to_json(t), "-");
    } else if (synth_masks->parsed()) {
      fs::create_directories(out_dir);
      for (const MaskTemplate& m : synth::make_mask_templates()) save_template(m, out_dir);
    } else if (synth_corpus->parsed()) {
      const auto files = synth::write_corpus(out_dir, n_faces, seed);
      std::printf("%s\n", files.manifest.string().c_str());
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
