#pragma once

// The release gate: ten self-contained checks over the library's numerical
// claims, each with its tolerances pinned in code. Every check builds its own
// data and models, runs silently, and reports one pass/fail line. Grouped
// into three suites by runtime and theme so CI can stage them.

#include <iosfwd>
#include <string>
#include <vector>

namespace fairdrift::accept {

struct CriterionResult {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail; // measured numbers against the pinned thresholds
};

enum class Suite { fast, theorems, mitigation, all };

// "fast", "theorems", "mitigation" or "all"; anything else throws ConfigError.
Suite parse_suite(const std::string& name);
std::vector<int> suite_criteria(Suite suite);

// Run one criterion by id (1..10). Throws ConfigError for unknown ids.
CriterionResult run_criterion(int id);

// Run a suite, printing one line per criterion as results arrive.
std::vector<CriterionResult> run_suite(Suite suite, std::ostream& out);

bool all_passed(const std::vector<CriterionResult>& results);

} // namespace fairdrift::accept
