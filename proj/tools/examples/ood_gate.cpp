// Fits class prototypes on two Gaussian blobs and shows the k-sigma gate on
// a few probe points.

#include <cmath>
#include <cstdio>

#include "tido/datagen.hpp"
#include "tido/prototypes.hpp"

int main() {
  tido::DomainSpec spec{2, {{0, {-2.0, 0.0}, 0.5, 0}, {1, {2.0, 0.0}, 0.5, 0}}, 500, 1, "source"};
  const auto data = tido::make_domain(spec);
  const auto ps = tido::fit_prototypes(data.x, data.labels);
  for (const auto& [c, p] : ps) {
    std::printf("class %u  mean (%.2f, %.2f)  sd (%.2f, %.2f)\n", static_cast<unsigned>(c),
                p.mean[0], p.mean[1], std::sqrt(p.var[0]), std::sqrt(p.var[1]));
  }
  const std::vector<std::vector<double>> probes = {{-2.0, 0.0}, {0.0, 0.0}, {2.0, 1.2}, {2.0, 2.5}};
  for (const auto& u : probes) {
    const auto v = tido::is_ood(ps, u, 3.0);
    std::printf("(%5.2f, %5.2f)  %s\n", u[0], u[1], v.ood ? "unknown" : "known");
  }
  return 0;
}
