#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "dape/checks.hpp"
#include "dape/errors.hpp"
#include "dape/faults.hpp"

using namespace dape;

TEST(Checks, EveryModuleHasASuite) {
  std::set<std::string> modules;
  for (const auto& s : list_suites()) modules.insert(s.module);
  EXPECT_EQ(modules, (std::set<std::string>{"tensor-core", "coarse-align", "cwa", "nfa", "phi", "model-stack",
                                            "harness-cli"}));
}

TEST(Checks, CleanBuildPasses) {
  const CheckReport r = run_checks();
  for (const auto& s : r.suites) EXPECT_TRUE(s.passed) << s.name << ": " << (s.failures.empty() ? "" : s.failures[0]);
  const auto j = r.to_json();
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_EQ(j["suites"].size(), list_suites().size());
}

TEST(Checks, UnknownSuiteIsRejected) { EXPECT_THROW(run_checks("no-such-suite"), ConfigError); }

TEST(Checks, ModuleNameSelectsItsSuites) {
  const CheckReport r = run_checks("nfa");
  ASSERT_EQ(r.suites.size(), 2u);
  for (const auto& s : r.suites) EXPECT_EQ(s.module, "nfa");
}

struct Mutation {
  Fault fault;
  const char* suite;
};

class MutationTest : public ::testing::TestWithParam<Mutation> {};

TEST_P(MutationTest, NamedSuiteFails) {
  const ScopedFault on(GetParam().fault);
  const CheckReport r = run_checks();
  EXPECT_FALSE(r.passed());
  const auto failed = r.failed_suites();
  EXPECT_NE(std::find(failed.begin(), failed.end(), GetParam().suite), failed.end())
      << fault_name(GetParam().fault) << " went unnoticed by " << GetParam().suite;
}

INSTANTIATE_TEST_SUITE_P(SeededFaults, MutationTest,
                         ::testing::Values(Mutation{Fault::kFlipThreshold, "binarize"},
                                           Mutation{Fault::kTopkAscending, "cwa-topk"},
                                           Mutation{Fault::kDropFineLevel, "nfa-hierarchy"}));

TEST(Checks, FaultsClearAfterScope) {
  { const ScopedFault on(Fault::kFlipThreshold); }
  EXPECT_TRUE(run_checks("binarize").passed());
}
