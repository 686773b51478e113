// End-to-end run on a small synthetic corpus, entirely in memory:
// mock annotation -> KC clustering -> contrastive encoder -> KT with
// random and enriched item embeddings.
#include <iostream>
#include <sstream>

#include "kcqrl/kcqrl.hpp"

using namespace kcqrl;

int main() {
  SynthConfig sc;
  sc.num_students = 100;
  const auto data = generate_synthetic(sc, 1);

  // The mock replays the reference annotations through the real prompts.
  MockBackend backend;
  std::istringstream fixture(mock_fixture_for(data.questions));
  for (std::string line; std::getline(fixture, line);) {
    const auto j = nlohmann::json::parse(line);
    backend.script_hash(j.at("prompt_sha256").get<std::string>(), {j.at("response").get<std::string>()});
  }
  std::vector<Question> bare;
  for (const auto& q : data.questions) bare.push_back(q.question);
  AnnotationCache cache;
  const auto ann = annotate_corpus(backend, cache, bare, 1);
  std::cout << "annotated " << ann.questions.size() << " questions with " << backend.calls() << " backend calls\n";

  const auto clusters = cluster_corpus(ann.questions, HashedTokenProvider(256), {});
  std::cout << clusters.size() << " KC texts in " << clusters.num_clusters() << " clusters\n";

  ClTrainConfig cl;
  cl.epochs = 40;
  cl.lr = 3e-3;
  cl.batch_size = 16;
  cl.dropout = 0.0;
  const auto enc = train_encoder(ann.questions, clusters, cl, {32, 64, 32, 0.0});
  std::cout << "encoder loss " << enc.loss_trace.front() << " -> " << enc.loss_trace.back() << "\n";

  std::vector<QuestionEmbedding> es;
  for (const auto& q : ann.questions) es.push_back(embed_question(enc.encoder, q));
  const auto table = aggregated_table(es);

  KtTrainConfig kt;
  kt.lr = 1e-2;
  kt.epochs = 10;
  kt.emb_dim = 32;
  kt.hidden_dim = 32;
  kt.response_dim = 8;
  kt.head_dim = 32;
  for (EmbeddingMode mode : {EmbeddingMode::random_id, EmbeddingMode::enriched_frozen}) {
    const KtSpec spec{KtArch::recurrent, mode, ItemKind::question, kt};
    const auto r = run_kfold(spec, data.histories, &table, 5, 0, 1);
    std::cout << variant_name(spec) << " fold-0 AUC " << r.front().auc << "\n";
  }
}
