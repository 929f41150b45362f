#pragma once

// Cross-modality retrieval evaluation: CMC and mAP over repeated random
// gallery draws, in both query directions.

#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "nn.hpp"

namespace cmnas {

/// One retrieval setting: which modality queries which, how many gallery
/// images each identity contributes per repeat, and how many repeats.
struct Protocol {
  int query_modality = 1;
  int gallery_modality = 0;
  int shots = 1;  // 1 (single-shot) and 10 (multi-shot) are the standard settings
  int repeats = 10;
  std::uint64_t seed = 1;
};

void validate_protocol(const Protocol& p);

struct CmcMap {
  std::vector<double> cmc;  // cmc[k-1] = fraction of queries matched within top k
  double map = 0.0;
};

/// Standard CMC/mAP over a dense q x g distance matrix (row-major). Gallery
/// ties break by gallery index, so results are deterministic. Every query
/// label must occur in the gallery.
CmcMap compute_cmc_map(const std::vector<double>& dist, std::int64_t q, std::int64_t g,
                       const std::vector<int>& query_labels,
                       const std::vector<int>& gallery_labels);

struct RetrievalRepeat {
  double rank1 = 0.0, rank10 = 0.0, rank20 = 0.0, map = 0.0;
};

struct RetrievalReport {
  std::vector<RetrievalRepeat> repeats;
  RetrievalRepeat mean, stddev;  // stddev is the population deviation over repeats
};

/// Embeds every test image in inference mode, L2-normalizes, and ranks by
/// negative cosine similarity. Queries are all query-modality images; each
/// repeat draws `shots` gallery images per identity (all of them when an
/// identity has fewer). Rank-k clamps k to the gallery size.
RetrievalReport evaluate(Network& net, const Dataset& test, const Protocol& p);

/// Rows `name,repeat,rank1,rank10,rank20,mAP` for every repeat plus `mean`
/// and `stddev` summary rows. The header is included.
std::string report_csv(const RetrievalReport& r, const std::string& protocol_name);

}  // namespace cmnas
