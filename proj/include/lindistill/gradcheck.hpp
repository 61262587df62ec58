#pragma once

// Finite-difference verification of every primitive op, the composite layers,
// and the full distillation objective on a toy teacher/student pair.

#include <cstdint>
#include <string>
#include <vector>

namespace lindistill {

struct GradCheckCase {
    std::string name;
    double max_rel_err = 0.0; // max over coords of |g_bp - g_fd| / max(1, |g_bp|)
    bool pass = false;
};

std::vector<GradCheckCase> run_gradcheck(std::uint64_t seed, double eps, double tolerance,
                                         bool include_full_objective = true);

// The full-objective check alone (toy 2-block models, K=2, a=0.5).
GradCheckCase gradcheck_full_objective(std::uint64_t seed, double eps, double tolerance);

bool all_passed(const std::vector<GradCheckCase>& cases);

} // namespace lindistill
