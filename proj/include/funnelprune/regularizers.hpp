// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fp {

/// |x| / (c + |x|), in [0, 1). Throws RangeError unless c > 0.
double funnel(double x, double c);
/// d/dx funnel: c/(c+x)² for x >= 0, −c/(c−x)² for x < 0.
double funnel_grad(double x, double c);

enum class ScheduleKind { constant, linear, exponential };

struct FunnelSchedule {
    ScheduleKind kind = ScheduleKind::exponential;
    double c1 = 1.0;
    double c2 = 1e-4;    // linear target
    double n = 100.0;    // linear: epochs to reach c2
    double sigma = 0.1;  // exponential multiplier in (0, 1)
    std::size_t m = 5;   // exponential period in epochs
    double floor = 1e-4;

    /// Throws RangeError on non-positive c values, sigma outside (0,1), n <= 0 or m == 0.
    void validate() const;
};

double schedule_c(const FunnelSchedule& s, std::size_t epoch);

enum class RegKind { funnel, l1, l2 };

struct RegConfig {
    RegKind kind = RegKind::funnel;
    double lambda = 0.0;
    FunnelSchedule schedule;

    void validate() const;
};

std::string to_string(ScheduleKind k);
std::string to_string(RegKind k);
ScheduleKind parse_schedule_kind(const std::string& s);
RegKind parse_reg_kind(const std::string& s);

struct Penalty {
    double value = 0.0;         // Σ F(g), unweighted
    std::vector<double> grad;   // dF/dg per gate, unweighted
};

/// Σ F(g) and its per-gate derivative; the total loss adds lambda times the value.
Penalty reg_penalty(std::span<const double> gates, const RegConfig& cfg, std::size_t epoch);

}  // namespace fp
