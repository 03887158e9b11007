// SPDX-License-Identifier: Apache-2.0
#include "adatape/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace adatape {

GradCheckReport grad_check(const LossFn& loss_fn, ParamStore<double>& params, const GradCheckOptions& options) {
  params.zero_grad();
  Tensor<double> loss = loss_fn(params);
  const double base = loss.item();
  double again = 0.0;
  {
    NoGradGuard guard;
    again = loss_fn(params).item();
  }
  if (base != again) throw NumericError("grad_check: loss function is not deterministic");
  loss.backward();

  const auto entries = params.entries();
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  if (options.samples == 0) {
    for (std::size_t p = 0; p < entries.size(); ++p) {
      for (std::size_t i = 0; i < entries[p].value.numel(); ++i) probes.emplace_back(p, i);
    }
  } else {
    Rng rng(options.seed);
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& e : entries) {
      offsets.push_back(total);
      total += e.value.numel();
    }
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::vector<std::size_t> flats;
    while (flats.size() < std::min(options.samples, total)) {
      const std::size_t flat = pick(rng);
      if (std::find(flats.begin(), flats.end(), flat) != flats.end()) continue;
      flats.push_back(flat);
      const std::size_t p = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) -
                                                     offsets.begin()) - 1;
      probes.emplace_back(p, flat - offsets[p]);
    }
    std::sort(probes.begin(), probes.end());
  }

  GradCheckReport report;
  std::vector<long> slot(entries.size(), -1);
  NoGradGuard guard;
  for (const auto& [p, i] : probes) {
    Tensor<double> param = entries[p].value;
    const double analytic = param.has_grad() ? param.grad()[i] : 0.0;
    double& x = param.data()[i];
    const double saved = x;
    x = saved + options.delta;
    const double plus = loss_fn(params).item();
    x = saved - options.delta;
    const double minus = loss_fn(params).item();
    x = saved;
    const double numeric = (plus - minus) / (2.0 * options.delta);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(analytic - numeric) / denom;

    if (slot[p] < 0) {
      slot[p] = static_cast<long>(report.params.size());
      report.params.push_back({entries[p].name, 0, 0.0});
    }
    ParamCheck& check = report.params[static_cast<std::size_t>(slot[p])];
    ++check.checked;
    check.max_rel_error = std::max(check.max_rel_error, rel);
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace adatape
