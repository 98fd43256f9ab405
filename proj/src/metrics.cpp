#include "seqdiff/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "seqdiff/diffusion.hpp"

namespace seqdiff {

int rank_of_target(const Vector<double>& scores, int target, const std::unordered_set<int>& excluded) {
  if (target == kPaddingId || target == kUnknownId) throw std::invalid_argument("target is a reserved id");
  if (target < 0 || target >= scores.size()) throw std::out_of_range("target outside the score vector");
  if (excluded.contains(target)) throw std::invalid_argument("target is excluded from ranking");
  const double t = scores(target);
  int rank = 1;
  for (int id = 2; id < scores.size(); ++id) {
    if (id == target || excluded.contains(id)) continue;
    if (scores(id) > t || (scores(id) == t && id < target)) ++rank;
  }
  return rank;
}

double ndcg_at_k(int rank, int k) { return rank >= 1 && rank <= k ? 1.0 / std::log2(rank + 1.0) : 0.0; }

namespace {

std::size_t cutoff_index(int k) {
  for (std::size_t i = 0; i < kCutoffs.size(); ++i)
    if (kCutoffs[i] == k) return i;
  throw std::invalid_argument("no metric recorded at K=" + std::to_string(k));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

double MetricsReport::hr_at(int k) const { return hr[cutoff_index(k)]; }
double MetricsReport::ndcg_at(int k) const { return ndcg[cutoff_index(k)]; }

MetricsReport MetricsReport::from_ranks(std::vector<int> ranks, bool keep_ranks) {
  if (ranks.empty()) throw std::invalid_argument("no users to evaluate");
  MetricsReport r;
  r.users = ranks.size();
  for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
    double h = 0.0;
    double n = 0.0;
    for (int rank : ranks) {
      h += hr_at_k(rank, kCutoffs[i]);
      n += ndcg_at_k(rank, kCutoffs[i]);
    }
    r.hr[i] = h / static_cast<double>(ranks.size());
    r.ndcg[i] = n / static_cast<double>(ranks.size());
  }
  if (keep_ranks) r.ranks = std::move(ranks);
  return r;
}

std::string MetricsReport::csv_header() const {
  std::string s = "users";
  for (int k : kCutoffs) s += ",HR@" + std::to_string(k);
  for (int k : kCutoffs) s += ",NDCG@" + std::to_string(k);
  return s;
}

std::string MetricsReport::csv_row() const {
  std::string s = std::to_string(users);
  for (double v : hr) s += "," + fmt(v);
  for (double v : ndcg) s += "," + fmt(v);
  return s;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["users"] = users;
  for (std::size_t i = 0; i < kCutoffs.size(); ++i) j["HR@" + std::to_string(kCutoffs[i])] = hr[i];
  for (std::size_t i = 0; i < kCutoffs.size(); ++i) j["NDCG@" + std::to_string(kCutoffs[i])] = ndcg[i];
  return j.dump(2);
}

}  // namespace seqdiff
