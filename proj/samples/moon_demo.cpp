// Corroborative and contributive attribution for one generated answer.

#include <iostream>

#include "attrib/attrib.hpp"

using namespace attrib;

int main() {
  AttributionDomain web(DomainKind::external,
                        {Source("encyclopedia", tokenize("the moon has a diameter of 3,475 kilometers")),
                         Source("forum", tokenize("i think the moon is about 3,500 kilometers wide")),
                         Source("blog", tokenize("mars is red and has two moons"))});
  std::vector<AttributableUnit> units;
  units.emplace_back(Query(tokenize("the moon is"), 0), ModelOutput{tokenize("3,475 kilometers")}, 0, 2);

  std::cout << "corroborative (exact match):\n";
  auto set = build_attribution_set(units, web, ExactMatch{}, 1.0);
  for (const auto& a : set.attributions()) std::cout << "  unit " << a.unit_ref << " <- " << a.source_id << "\n";

  AttributionDomain train(DomainKind::training,
                          {Source("a", tokenize("the moon is 3,475 kilometers wide")),
                           Source("b", tokenize("the moon is 3,475 kilometers across")),
                           Source("c", tokenize("the sun is very hot"))});
  CountBackend backend(Vocab::from_domain(train, true), 0.1);
  auto full = backend.fit(train);

  std::cout << "contributive (leave-one-out loss change):\n";
  auto loo = ccl_loo(backend, full, train, units).front();
  for (const auto& id : loo.ranking()) std::cout << "  " << id << "  " << loo.raw(id) << "\n";

  std::cout << "contributive (exact-match counterfactual):\n";
  auto cco = cco_exact_match(backend, full, train, units, 8).front();
  for (const auto& id : cco.ranking()) std::cout << "  " << id << "  " << cco.raw(id) << "\n";
  return 0;
}
