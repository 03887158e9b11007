// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations written directly from the algorithm descriptions,
// on plain vectors and without the tensor library.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

struct AtrOut {
  std::vector<std::vector<std::size_t>> indices;
  std::vector<Vec> weights;
  std::vector<Vec> tokens;
  std::vector<double> h_p;  // after each non-final iteration
  double loss = 0.0;
};

// Alg. 2 with -inf masking. Full stable sort of every unmasked row by
// (score descending, index ascending).
inline AtrOut atr_read(Vec q, const Mat& bank, std::size_t h, double tau, std::size_t T, bool entropy_loss,
                       bool average_update) {
  const std::size_t K = static_cast<std::size_t>(std::llround(T / tau));
  const std::size_t B = bank.size(), H = q.size();
  std::vector<bool> masked(B, false);
  double hp = 0.0, collect = 0.0;
  AtrOut out;
  while (hp < tau && out.tokens.size() < T) {
    Vec d(B, -std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < B; ++j) {
      if (masked[j]) continue;
      double acc = 0.0;
      for (std::size_t c = 0; c < h; ++c) acc += q[c] * bank[j][c];
      d[j] = acc;
    }
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < B; ++j) {
      if (!masked[j]) order.push_back(j);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
    std::vector<std::size_t> idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K));

    double top = -std::numeric_limits<double>::infinity();
    for (auto i : idx) top = std::max(top, d[i] / std::sqrt(static_cast<double>(h)));
    Vec w(K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      w[k] = std::exp(d[idx[k]] / std::sqrt(static_cast<double>(h)) - top);
      z += w[k];
    }
    for (double& v : w) v /= z;

    Vec s(H, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t c = 0; c < H; ++c) s[c] += w[k] * bank[idx[k]][c];
    }
    out.tokens.push_back(s);
    out.indices.push_back(idx);
    out.weights.push_back(w);

    const double mw = *std::max_element(w.begin(), w.end());
    if (hp + mw > tau) break;
    hp += mw;
    out.h_p.push_back(hp);
    if (entropy_loss) {
      double sq = 0.0;
      for (double v : w) sq += v * v;
      out.loss += 1.0 - sq;
    } else {
      collect += hp;
      out.loss = collect;
    }
    for (auto i : idx) masked[i] = true;
    if (average_update) {
      for (std::size_t c = 0; c < H; ++c) q[c] = (s[c] + q[c]) / 2.0;
    } else {
      q = s;
    }
  }
  return out;
}

struct ActOut {
  Mat output;
  std::vector<double> weights;
  std::size_t n = 0;
  double r = 0.0;
  double l_act = 0.0;
};

// Alg. 1 on an N x H state with scalar-valued halting map p(S) and update g(S).
inline ActOut act(Mat S, const std::function<double(const Mat&)>& p_of, const std::function<Mat(const Mat&)>& g,
                  std::size_t T, double eps) {
  ActOut out;
  out.output.assign(S.size(), Vec(S.front().size(), 0.0));
  auto accumulate = [&](const Mat& s, double weight) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t c = 0; c < s[i].size(); ++c) out.output[i][c] += weight * s[i][c];
    }
    out.weights.push_back(weight);
  };
  double hp = 0.0;
  while (true) {
    const double p = p_of(S);
    if (hp + p > 1.0 - eps) {
      out.r = 1.0 - hp;
      accumulate(S, out.r);
      break;
    }
    S = g(S);
    if (out.n + 1 == T) {
      out.r = 1.0 - hp;
      accumulate(S, out.r);
      break;
    }
    ++out.n;
    accumulate(S, p);
    hp += p;
  }
  out.l_act = static_cast<double>(out.n) + out.r;
  return out;
}

inline Vec layer_norm(const Vec& x, double eps) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps);
  return out;
}

// Random small ATR problem: B <= 32, H <= 16, K in 1..4, tau in 0.5..3 with
// T = K * tau integral and K * T <= B. Every fourth instance uses small
// integer entries so that score ties occur.
struct AtrInstance {
  Mat bank;
  Vec query;
  std::size_t key_dim = 1;
  double tau = 1.0;
  std::size_t T = 1;
  std::size_t K = 1;
  bool average_update = true;
  bool entropy_loss = true;
};

inline AtrInstance random_instance(std::mt19937_64& rng, std::size_t index) {
  static const double taus[] = {0.5, 1.0, 1.5, 2.0, 2.5, 3.0};
  std::uniform_int_distribution<std::size_t> pick_k(1, 4), pick_tau(0, 5), pick_h(2, 16);
  AtrInstance inst;
  const bool ints = index % 4 == 3;
  // Integer entries make scores tie exactly, but only while the query stays
  // integer or dyadic. With K = 1 the merged token is a bank row, so every
  // later score is exact too; K = 2 with T = 1 reads once from an integer query.
  if (ints) {
    if (index % 8 == 3) {
      inst.K = 1;
      inst.tau = static_cast<double>(1 + pick_tau(rng) % 3);
    } else {
      inst.K = 2;
      inst.tau = 0.5;
    }
    inst.T = static_cast<std::size_t>(std::llround(inst.K * inst.tau));
  }
  while (!ints) {
    inst.K = pick_k(rng);
    inst.tau = taus[pick_tau(rng)];
    const double t = inst.K * inst.tau;
    if (std::abs(t - std::round(t)) > 1e-12 || t < 1.0) continue;
    inst.T = static_cast<std::size_t>(std::llround(t));
    if (inst.K * inst.T <= 32) break;
  }
  std::uniform_int_distribution<std::size_t> pick_b(inst.K * inst.T, 32);
  const std::size_t B = pick_b(rng);
  const std::size_t H = pick_h(rng);
  std::uniform_int_distribution<std::size_t> pick_key(1, H);
  inst.key_dim = pick_key(rng);
  inst.average_update = ints ? (index / 8) % 2 == 0 : index % 2 == 0;
  inst.entropy_loss = index % 3 != 0;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> small(-1, 1);
  auto draw = [&] { return ints ? static_cast<double>(small(rng)) : normal(rng); };
  inst.bank.assign(B, Vec(H));
  for (auto& row : inst.bank) {
    for (double& v : row) v = draw();
  }
  inst.query.resize(H);
  for (double& v : inst.query) v = draw();
  return inst;
}

}  // namespace oracle
