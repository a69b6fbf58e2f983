#include "laser/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace laser {

using ad::Tensor;

void LossWeights::validate() const {
  if (!(tau > 0)) throw std::invalid_argument("loss weights: tau must be positive");
  if (!(tau_kd > 0)) throw std::invalid_argument("loss weights: tau_kd must be positive");
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) {
    throw std::invalid_argument("loss weights: lambdas must be non-negative");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3},
       {"tau", w.tau},         {"tau_kd", w.tau_kd}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.lambda1 = j.value("lambda1", d.lambda1);
  w.lambda2 = j.value("lambda2", d.lambda2);
  w.lambda3 = j.value("lambda3", d.lambda3);
  w.tau = j.value("tau", d.tau);
  w.tau_kd = j.value("tau_kd", d.tau_kd);
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = {{"cl_latent", r.cl_latent}, {"cl_explicit", r.cl_explicit},
       {"kd_out", r.kd_out},       {"kd_mid", r.kd_mid},
       {"total", r.total}};
}

template <typename T>
void CandidateSet<T>::validate() const {
  const auto& d = doc_vectors.value();
  if (d.rows == 0) throw std::invalid_argument("candidate set is empty");
  for (std::size_t i = 0; i < positive_index.size(); ++i) {
    if (positive_index[i] >= d.rows) {
      throw std::out_of_range("positive index " + std::to_string(positive_index[i]) +
                              " for query " + std::to_string(i) + " outside " +
                              std::to_string(d.rows) + " candidates");
    }
  }
  const double tol = sizeof(T) == sizeof(float) ? 1e-5 : 1e-9;
  for (std::size_t r = 0; r < d.rows; ++r) {
    double n = 0;
    for (auto v : d.row(r)) n += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(n) - 1.0) > tol) {
      throw std::invalid_argument("candidate row " + std::to_string(r) +
                                  " is not unit norm");
    }
  }
}

template <typename T>
Tensor<T> info_nce(const Tensor<T>& queries, const CandidateSet<T>& candidates,
                   T tau) {
  candidates.validate();
  if (queries.rows() != candidates.positive_index.size()) {
    throw std::invalid_argument("info_nce: " + std::to_string(queries.rows()) +
                                " queries but " +
                                std::to_string(candidates.positive_index.size()) +
                                " positive indices");
  }
  if (!(tau > 0)) throw std::invalid_argument("info_nce: tau must be positive");
  auto logp = ad::log_softmax_rows(ad::matmul_nt(queries, candidates.doc_vectors), tau);
  std::vector<Tensor<T>> picked;
  picked.reserve(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    picked.push_back(ad::element(logp, i, candidates.positive_index[i]));
  }
  return ad::scale(ad::mean_rows(ad::concat_rows<T>(picked)), T(-1));
}

double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw std::invalid_argument("kl_div: distributions must be non-empty and equal length");
  }
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw std::invalid_argument("kl_div: negative entry");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1) > 1e-5 || std::abs(sq - 1) > 1e-5) {
    throw std::invalid_argument("kl_div: arguments must sum to 1");
  }
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0) continue;
    if (q[i] == 0) throw std::domain_error("kl_div: q is zero where p is positive");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

namespace {

// Mean over rows of KL between the teacher and student score distributions.
template <typename T>
Tensor<T> score_kl(const Tensor<T>& teacher, const Tensor<T>& student,
                   const Tensor<T>& docs, T tau_kd, bool detach_teacher) {
  if (!(tau_kd > 0)) throw std::invalid_argument("kd: tau_kd must be positive");
  if (docs.rows() == 0) throw std::invalid_argument("kd: empty candidate set");
  if (teacher.rows() != student.rows()) {
    throw ad::ShapeError("kd: teacher has " + std::to_string(teacher.rows()) +
                         " rows, student " + std::to_string(student.rows()));
  }
  auto t_scores = ad::matmul_nt(teacher, docs);
  if (detach_teacher) t_scores = ad::detach(t_scores);
  auto t_logp = ad::log_softmax_rows(t_scores, tau_kd);
  auto t_p = ad::softmax_rows(t_scores, tau_kd);
  auto s_logp = ad::log_softmax_rows(ad::matmul_nt(student, docs), tau_kd);
  auto per_entry = ad::mul(t_p, ad::sub(t_logp, s_logp));
  return ad::scale(ad::sum_all(per_entry), T(1) / static_cast<T>(teacher.rows()));
}

template <typename T>
void require_dim(const char* what, const Tensor<T>& t, std::size_t m) {
  if (t.cols() != m) {
    throw ad::ShapeError(std::string("kd_trajectory: ") + what + " have dimension " +
                         std::to_string(t.cols()) + ", documents " + std::to_string(m));
  }
}

}  // namespace

template <typename T>
Tensor<T> kd_output(const Tensor<T>& teacher, const Tensor<T>& student,
                    const Tensor<T>& doc_vectors, T tau_kd, bool detach_teacher) {
  return score_kl(teacher, student, doc_vectors, tau_kd, detach_teacher);
}

std::vector<int> downsample_indices(int M, int K) {
  if (M < 1 || K < 1) {
    throw std::invalid_argument("downsample_indices: M and K must be >= 1");
  }
  std::vector<int> out(K);
  for (int i = 1; i <= K; ++i) {
    const int j = static_cast<int>((static_cast<long long>(i) * M) / K);
    out[i - 1] = std::clamp(j, 1, M);
  }
  return out;
}

template <typename T>
Tensor<T> kd_trajectory(const Tensor<T>& teacher_states,
                        const Tensor<T>& student_states,
                        const Tensor<T>& doc_vectors, T tau_kd,
                        bool detach_teacher) {
  const std::size_t m = doc_vectors.cols();
  require_dim("teacher states", teacher_states, m);
  require_dim("student states", student_states, m);
  const auto idx = downsample_indices(static_cast<int>(teacher_states.rows()),
                                      static_cast<int>(student_states.rows()));
  std::vector<std::size_t> rows(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) rows[i] = static_cast<std::size_t>(idx[i] - 1);
  auto teacher = ad::l2_normalize_rows(ad::select_rows<T>(teacher_states, rows));
  auto student = ad::l2_normalize_rows(student_states);
  return score_kl(teacher, student, doc_vectors, tau_kd, detach_teacher);
}

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& parts, const LossWeights& w) {
  w.validate();
  struct Term {
    const char* name;
    const Tensor<T>* t;
    double weight;
  };
  const Term terms[] = {{"cl_latent", &parts.cl_latent, 1.0},
                        {"cl_explicit", &parts.cl_explicit, w.lambda1},
                        {"kd_out", &parts.kd_out, w.lambda2},
                        {"kd_mid", &parts.kd_mid, w.lambda3}};
  Tensor<T> total;
  for (const auto& term : terms) {
    if (!term.t->valid()) continue;
    if (!std::isfinite(static_cast<double>(term.t->item()))) {
      throw std::domain_error(std::string("non-finite loss term ") + term.name);
    }
    if (term.weight == 0) continue;
    auto scaled = term.weight == 1.0 ? *term.t : ad::scale(*term.t, static_cast<T>(term.weight));
    total = total.valid() ? ad::add(total, scaled) : scaled;
  }
  if (!total.valid()) throw std::invalid_argument("total_loss: no active terms");
  return total;
}

double total_loss(const LossReport& p, const LossWeights& w) {
  const std::pair<const char*, double> terms[] = {{"cl_latent", p.cl_latent},
                                                  {"cl_explicit", p.cl_explicit},
                                                  {"kd_out", p.kd_out},
                                                  {"kd_mid", p.kd_mid}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("non-finite loss term ") + name);
  }
  return p.cl_latent + w.lambda1 * p.cl_explicit + w.lambda2 * p.kd_out +
         w.lambda3 * p.kd_mid;
}

template <typename T>
LossReport make_report(const LossTerms<T>& parts, const Tensor<T>& total) {
  auto get = [](const Tensor<T>& t) {
    return t.valid() ? static_cast<double>(t.item()) : 0.0;
  };
  return {get(parts.cl_latent), get(parts.cl_explicit), get(parts.kd_out),
          get(parts.kd_mid), get(total)};
}

#define LASER_LOSS_INSTANTIATE(T)                                              \
  template struct CandidateSet<T>;                                             \
  template Tensor<T> info_nce(const Tensor<T>&, const CandidateSet<T>&, T);    \
  template Tensor<T> kd_output(const Tensor<T>&, const Tensor<T>&,             \
                               const Tensor<T>&, T, bool);                     \
  template Tensor<T> kd_trajectory(const Tensor<T>&, const Tensor<T>&,         \
                                   const Tensor<T>&, T, bool);                 \
  template Tensor<T> total_loss(const LossTerms<T>&, const LossWeights&);      \
  template LossReport make_report(const LossTerms<T>&, const Tensor<T>&);

LASER_LOSS_INSTANTIATE(float)
LASER_LOSS_INSTANTIATE(double)

#undef LASER_LOSS_INSTANTIATE

}  // namespace laser
