#include "hica/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hica/rng.hpp"

namespace hica {

FdReport finite_diff_check(const std::vector<Param*>& params,
                           const std::function<double()>& loss, const GradSet& analytic,
                           const FdConfig& cfg) {
  if (cfg.eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be > 0");

  struct Coord {
    Param* p;
    int idx;
  };
  std::vector<Coord> coords;
  for (Param* p : params)
    for (int i = 0; i < p->value.size(); ++i) coords.push_back({p, i});

  FdReport rep;
  if (coords.empty()) return rep;  // zero-parameter model

  if (static_cast<int>(coords.size()) > cfg.coords) {
    Rng rng(key_mix(cfg.seed, "fd-subsample"));
    rng.shuffle(coords);
    coords.resize(cfg.coords);
  }

  for (const Coord& c : coords) {
    const double saved = c.p->value.data[c.idx];
    c.p->value.data[c.idx] = saved + cfg.eps;
    const double up = loss();
    c.p->value.data[c.idx] = saved - cfg.eps;
    const double down = loss();
    c.p->value.data[c.idx] = saved;

    const double numeric = (up - down) / (2.0 * cfg.eps);
    const Tensor2* g = analytic.find(*c.p);
    const double analytic_v = g == nullptr ? 0.0 : g->data[c.idx];
    const double denom = std::max({std::fabs(analytic_v), std::fabs(numeric), 1e-8});
    rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(analytic_v - numeric) / denom);
    rep.coords_checked += 1;
  }
  return rep;
}

}  // namespace hica
