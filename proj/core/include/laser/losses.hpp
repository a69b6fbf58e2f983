#pragma once

// Training objectives. All scores are dot products of unit vectors, i.e.
// cosine similarities.

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "laser/autodiff.hpp"

namespace laser {

struct LossWeights {
  double lambda1 = 1.0;   // explicit-view contrastive
  double lambda2 = 10.0;  // output-level distillation
  double lambda3 = 0.1;   // trajectory alignment
  double tau = 0.02;
  double tau_kd = 0.02;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossReport {
  double cl_latent = 0;
  double cl_explicit = 0;
  double kd_out = 0;
  double kd_mid = 0;
  double total = 0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

void to_json(nlohmann::json& j, const LossReport& r);

// Pooled batch documents plus, for each query, the row of its positive.
template <typename T>
struct CandidateSet {
  ad::Tensor<T> doc_vectors;  // B x m, unit rows
  std::vector<std::size_t> positive_index;

  // Throws if a positive index is out of range or a row is not unit norm
  // within 1e-5 (float) / 1e-9 (double).
  void validate() const;
};

// Mean over query rows of -log softmax(q · Dᵀ / tau)[positive].
template <typename T>
ad::Tensor<T> info_nce(const ad::Tensor<T>& queries,
                       const CandidateSet<T>& candidates, T tau);

// Σ p_i log(p_i / q_i) with 0·log(0/·) = 0. Both arguments must be
// distributions (non-negative, summing to 1 within 1e-5).
double kl_div(std::span<const double> p, std::span<const double> q);

// Mean over rows of KL(softmax(teacher · Dᵀ / tau_kd) ‖ softmax(student · Dᵀ / tau_kd)).
// With detach_teacher the teacher scores are constants.
template <typename T>
ad::Tensor<T> kd_output(const ad::Tensor<T>& teacher, const ad::Tensor<T>& student,
                        const ad::Tensor<T>& doc_vectors, T tau_kd,
                        bool detach_teacher = true);

// 1-based segment index for each latent step: floor(i * M / K), clamped
// into [1, M].
std::vector<int> downsample_indices(int M, int K);

// Trajectory alignment for one query: latent state i is matched against
// explicit segment state j_i, both L2-normalized, through their score
// distributions over the documents.
template <typename T>
ad::Tensor<T> kd_trajectory(const ad::Tensor<T>& teacher_states,
                            const ad::Tensor<T>& student_states,
                            const ad::Tensor<T>& doc_vectors, T tau_kd,
                            bool detach_teacher = true);

// Per-term scalars; an invalid (default) handle means the term is absent.
template <typename T>
struct LossTerms {
  ad::Tensor<T> cl_latent;
  ad::Tensor<T> cl_explicit;
  ad::Tensor<T> kd_out;
  ad::Tensor<T> kd_mid;
};

// cl_latent + λ1·cl_explicit + λ2·kd_out + λ3·kd_mid. Terms with weight 0
// or absent are left out of the graph entirely. Throws std::domain_error
// naming the first non-finite term.
template <typename T>
ad::Tensor<T> total_loss(const LossTerms<T>& parts, const LossWeights& w);

// Same arithmetic on plain numbers.
double total_loss(const LossReport& parts, const LossWeights& w);

template <typename T>
LossReport make_report(const LossTerms<T>& parts, const ad::Tensor<T>& total);

}  // namespace laser
