// One PASS/FAIL line per acceptance criterion. Optional arguments select
// criteria by name; exit status is non-zero if any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "criteria.hpp"

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<criteria::Verdict()>>> all = {
      {"imf-oracle", [] { return criteria::imf_oracle_suite(); }},
      {"flow-stochasticity", [] { return criteria::flow_stochasticity(); }},
      {"gradient-certification", [] { return criteria::gradient_certification(); }},
      {"ipot-vs-lp", [] { return criteria::ipot_criterion(); }},
      {"mask-plans", [] { return criteria::mask_plan_criterion(); }},
      {"nmi-kmeans", [] { return criteria::nmi_criterion(); }},
      {"end-to-end", [] { return criteria::end_to_end(); }},
      {"ablation", [] { return criteria::ablation(); }},
  };
  std::set<std::string> wanted(argv + 1, argv + argc);
  for (const auto& w : wanted) {
    bool known = false;
    for (const auto& [name, fn] : all) known = known || name == w;
    if (!known) {
      std::fprintf(stderr, "unknown criterion '%s'\n", w.c_str());
      return 1;
    }
  }
  int failed = 0;
  for (const auto& [name, fn] : all) {
    if (!wanted.empty() && !wanted.count(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    criteria::Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %-24s [%.1fs] %s\n", v.pass ? "PASS" : "FAIL", name.c_str(), secs, v.detail.c_str());
    std::fflush(stdout);
    failed += v.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
