#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "epic/config.hpp"
#include "epic/tape.hpp"

namespace epic {

// Negatives for one triplet: positives of the other batch items plus the
// triplet's own hard negatives.
template <typename Vec>
struct NegativeSet {
  std::vector<Vec> in_batch;
  std::vector<Vec> hard;

  std::vector<Vec> all() const {
    std::vector<Vec> out = in_batch;
    out.insert(out.end(), hard.begin(), hard.end());
    return out;
  }
};

template <typename T>
T cosine_sim(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
  T dot = T(0), na = T(0), nb = T(0);
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == T(0) || nb == T(0)) throw std::domain_error("cosine_sim: zero vector");
  const T c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, T(-1), T(1));
}

template <typename T>
T phi(const std::vector<T>& q, const std::vector<T>& p, T tau) {
  if (tau <= T(0)) throw ConfigError("phi: temperature must be positive");
  return std::exp(cosine_sim(q, p) / tau);
}

// InfoNCE, computed in log space for stability: L = logsumexp(s) - s_plus
// where s are the temperature-scaled cosines with the positive first. The
// negative scores are reduced in their given order (deterministic).
template <typename T>
T info_nce(const std::vector<T>& q, const std::vector<T>& p_plus,
           const NegativeSet<std::vector<T>>& negatives, T tau) {
  if (tau <= T(0)) throw ConfigError("info_nce: temperature must be positive");
  const std::vector<std::vector<T>> negs = negatives.all();
  if (negs.empty()) return T(0);
  std::vector<T> s;
  s.reserve(negs.size() + 1);
  s.push_back(cosine_sim(q, p_plus) / tau);
  for (const auto& n : negs) s.push_back(cosine_sim(q, n) / tau);
  const T mx = *std::max_element(s.begin(), s.end());
  T sum = T(0);
  for (T v : s) sum += std::exp(v - mx);
  return mx + std::log(sum) - s[0];
}

// --- graph builders -------------------------------------------------------

template <typename T>
typename Tape<T>::NodeId cosine_node(Tape<T>& tp, typename Tape<T>::NodeId a,
                                     typename Tape<T>::NodeId b) {
  auto na = tp.sqrt_s(tp.dot(a, a));
  auto nb = tp.sqrt_s(tp.dot(b, b));
  return tp.div_s(tp.dot(a, b), tp.mul_s(na, nb));
}

template <typename T>
typename Tape<T>::NodeId info_nce_node(Tape<T>& tp, typename Tape<T>::NodeId q,
                                       typename Tape<T>::NodeId p_plus,
                                       const std::vector<typename Tape<T>::NodeId>& negatives,
                                       T tau) {
  if (tau <= T(0)) throw ConfigError("info_nce: temperature must be positive");
  if (negatives.empty()) return tp.constant(Matrix<T>(1, 1));
  std::vector<typename Tape<T>::NodeId> scores;
  scores.reserve(negatives.size() + 1);
  scores.push_back(tp.scale(cosine_node(tp, q, p_plus), T(1) / tau));
  for (auto n : negatives) scores.push_back(tp.scale(cosine_node(tp, q, n), T(1) / tau));
  auto stacked = tp.concat_cols(scores);
  return tp.sub(tp.logsumexp_row(stacked), scores[0]);
}

}  // namespace epic
