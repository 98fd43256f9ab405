#pragma once

#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "seqdiff/data.hpp"
#include "seqdiff/dsr.hpp"
#include "seqdiff/inference.hpp"
#include "seqdiff/metrics.hpp"
#include "seqdiff/sequence.hpp"

namespace seqdiff {

struct EvalOptions {
  bool exclude_seen = false;  // drop the user's history items (other than the target) from ranking
  bool keep_ranks = false;
};

namespace detail {

inline std::unordered_set<int> seen_items(const std::vector<int>& history, int target) {
  std::unordered_set<int> out(history.begin(), history.end());
  out.erase(target);
  return out;
}

}  // namespace detail

/// Full-ranking leave-one-out evaluation over every eligible user of `split`.
template <typename Scalar>
MetricsReport evaluate_model(const InteractionDataset& data, Split split, const DsrParams<Scalar>& params,
                             const ScheduleTable& schedule, const DsrConfig& config, const InferenceConfig& inference,
                             const EvalOptions& options = {}) {
  if (split == Split::Train) throw std::invalid_argument("evaluation runs on the valid or test split");
  std::vector<InferenceRequest> requests;
  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < data.user_count(); ++u) {
    if (!data.eligible(u, split)) continue;
    requests.push_back({prepare_inference_sequence(data.history(u, split), config.max_length), u});
    users.push_back(u);
  }
  if (requests.empty()) throw std::invalid_argument("split has no eligible users");
  const auto predictions = infer_batch<Scalar>(requests, params, schedule, config, inference);
  std::vector<int> ranks;
  ranks.reserve(users.size());
  for (std::size_t i = 0; i < users.size(); ++i) {
    const int target = data.target(users[i], split);
    const auto excluded =
        options.exclude_seen ? detail::seen_items(data.history(users[i], split), target) : std::unordered_set<int>{};
    ranks.push_back(rank_of_target(predictions[i].probabilities, target, excluded));
  }
  return MetricsReport::from_ranks(std::move(ranks), options.keep_ranks);
}

/// Item frequencies over every user's training prefix.
inline Vector<double> popularity_scores(const InteractionDataset& data) {
  Vector<double> counts = Vector<double>::Zero(data.vocab_size());
  for (std::size_t u = 0; u < data.user_count(); ++u) {
    if (!data.eligible(u, Split::Train)) continue;
    for (int id : data.history(u, Split::Train)) counts(id) += 1.0;
    counts(data.target(u, Split::Train)) += 1.0;
  }
  return counts;
}

/// Ranks every user's target against training-prefix popularity.
inline MetricsReport evaluate_popularity(const InteractionDataset& data, Split split, const EvalOptions& options = {}) {
  if (split == Split::Train) throw std::invalid_argument("evaluation runs on the valid or test split");
  const auto scores = popularity_scores(data);
  std::vector<int> ranks;
  for (std::size_t u = 0; u < data.user_count(); ++u) {
    if (!data.eligible(u, split)) continue;
    const int target = data.target(u, split);
    const auto excluded =
        options.exclude_seen ? detail::seen_items(data.history(u, split), target) : std::unordered_set<int>{};
    ranks.push_back(rank_of_target(scores, target, excluded));
  }
  return MetricsReport::from_ranks(std::move(ranks), options.keep_ranks);
}

}  // namespace seqdiff
