// Plants one detail in three of eight synthetic images, then finds it again
// by one-shot detection and by unsupervised discovery.

#include <cstdio>

#include "patternmine/patternmine.hpp"

using namespace patternmine;

int main() {
  auto cc = synth::discovery_corpus(7);
  cc.num_images = 8;
  cc.placements = {{0, 2, 5}};
  const auto corpus = synth::make_corpus(cc);

  Collection col;
  col.entries = corpus.entries;
  for (std::size_t i = 0; i < corpus.images.size(); ++i)
    col.pyramids.push_back(l2_normalize_pyramid(builtin_extract(corpus.images[i], corpus.entries[i].image_id)));

  const auto& query = corpus.annotations().front();
  const auto identity = AdapterParams::identity(kBuiltinChannels);
  const auto q = region_query(corpus.images[col.index_of(query.image_id)], query.image_id, query.box, identity);
  const auto hits = without_query(one_shot_detect(q, col), query, 0.3);
  std::printf("query %s [%.0f %.0f %.0f %.0f]\n", query.image_id.c_str(), query.box.x, query.box.y, query.box.w,
              query.box.h);
  for (std::size_t i = 0; i < std::min<std::size_t>(hits.size(), 5); ++i)
    std::printf("  %s [%.0f %.0f %.0f %.0f] %.3f\n", hits[i].image_id.c_str(), hits[i].box.x, hits[i].box.y,
                hits[i].box.w, hits[i].box.h, hits[i].score);

  const auto pairs = discover_all(col, DiscoveryConfig{});
  const auto clusters = extract_clusters(build_graph(pairs), pairs);
  std::printf("%zu scored pairs, %zu clusters\n", pairs.size(), clusters.size());
  for (const auto& c : clusters) {
    std::printf("cluster %d (%.3f):", c.id, c.aggregate_score);
    for (const auto& m : c.members) std::printf(" %s", m.image_id.c_str());
    std::printf("\n");
  }
  std::printf("planted in:");
  for (const auto& in : corpus.instances) std::printf(" %s", corpus.entries[in.image].image_id.c_str());
  std::printf("\n");
}
