// Acceptance gate: runs the numbered criteria and prints one PASS/FAIL line
// each. Exit status is zero only when every criterion in the chosen suite
// passes, so this binary is what CI and `fairdrift verify` hang off.

#include <cstdio>
#include <cstring>
#include <exception>
#include <iostream>
#include <string>

#include "fairdrift/accept.hpp"
#include "fairdrift/errors.hpp"

int main(int argc, char** argv) {
    std::string suite_name = "all";
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--suite" && i + 1 < argc) {
            suite_name = argv[++i];
        } else if (arg.rfind("--suite=", 0) == 0) {
            suite_name = arg.substr(8);
        } else if (arg == "--help" || arg == "-h") {
            std::puts("usage: fairdrift_accept [--suite fast|theorems|mitigation|all]");
            return 0;
        } else {
            std::fprintf(stderr, "unknown argument '%s'\n", arg.c_str());
            return 2;
        }
    }

    try {
        const auto suite = fairdrift::accept::parse_suite(suite_name);
        const auto results = fairdrift::accept::run_suite(suite, std::cout);
        const bool ok = fairdrift::accept::all_passed(results);
        std::cout << (ok ? "all criteria passed" : "CRITERIA FAILED") << " (suite "
                  << suite_name << ")\n";
        return ok ? 0 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
