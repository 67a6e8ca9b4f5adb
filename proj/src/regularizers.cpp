// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/regularizers.hpp"

#include <algorithm>
#include <cmath>

#include "funnelprune/error.hpp"

namespace fp {

namespace {

void require_positive_c(double c) {
    if (!(c > 0.0) || !std::isfinite(c)) {
        throw RangeError("funnel: c must be a positive finite number");
    }
}

}  // namespace

double funnel(double x, double c) {
    require_positive_c(c);
    const double a = std::abs(x);
    return a / (c + a);
}

double funnel_grad(double x, double c) {
    require_positive_c(c);
    if (x >= 0.0) {
        return c / (c + x) / (c + x);
    }
    return -c / (c - x) / (c - x);
}

void FunnelSchedule::validate() const {
    const auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    if (!positive(c1)) {
        throw RangeError("schedule: c1 must be positive");
    }
    switch (kind) {
    case ScheduleKind::constant:
        break;
    case ScheduleKind::linear:
        if (!positive(c2) || !positive(n)) {
            throw RangeError("schedule: linear decay needs c2 > 0 and n > 0");
        }
        break;
    case ScheduleKind::exponential:
        if (!(sigma > 0.0 && sigma < 1.0) || m == 0 || !positive(floor)) {
            throw RangeError("schedule: exponential decay needs 0 < sigma < 1, m >= 1, floor > 0");
        }
        break;
    }
}

double schedule_c(const FunnelSchedule& s, std::size_t epoch) {
    s.validate();
    const double e = static_cast<double>(epoch);
    switch (s.kind) {
    case ScheduleKind::constant:
        return s.c1;
    case ScheduleKind::linear: {
        if (e >= s.n) {
            return s.c2;
        }
        const double c = s.c1 + (s.c2 - s.c1) * e / s.n;
        return std::clamp(c, std::min(s.c1, s.c2), std::max(s.c1, s.c2));
    }
    case ScheduleKind::exponential: {
        const double steps = std::floor(e / static_cast<double>(s.m));
        return std::max(s.floor, s.c1 * std::pow(s.sigma, steps));
    }
    }
    return s.c1;
}

void RegConfig::validate() const {
    if (!std::isfinite(lambda) || lambda < 0.0) {
        throw RangeError("regularizer: lambda must be finite and non-negative");
    }
    if (kind == RegKind::funnel) {
        schedule.validate();
    }
}

std::string to_string(ScheduleKind k) {
    switch (k) {
    case ScheduleKind::constant:
        return "constant";
    case ScheduleKind::linear:
        return "linear";
    case ScheduleKind::exponential:
        return "exponential";
    }
    return "?";
}

std::string to_string(RegKind k) {
    switch (k) {
    case RegKind::funnel:
        return "funnel";
    case RegKind::l1:
        return "l1";
    case RegKind::l2:
        return "l2";
    }
    return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "constant") {
        return ScheduleKind::constant;
    }
    if (s == "linear") {
        return ScheduleKind::linear;
    }
    if (s == "exponential") {
        return ScheduleKind::exponential;
    }
    throw FormatError("unknown schedule kind '" + s + "'");
}

RegKind parse_reg_kind(const std::string& s) {
    if (s == "funnel") {
        return RegKind::funnel;
    }
    if (s == "l1") {
        return RegKind::l1;
    }
    if (s == "l2") {
        return RegKind::l2;
    }
    throw FormatError("unknown regularizer '" + s + "'");
}

Penalty reg_penalty(std::span<const double> gates, const RegConfig& cfg, std::size_t epoch) {
    Penalty p;
    p.grad.assign(gates.size(), 0.0);
    switch (cfg.kind) {
    case RegKind::funnel: {
        const double c = schedule_c(cfg.schedule, epoch);
        for (std::size_t i = 0; i < gates.size(); ++i) {
            p.value += funnel(gates[i], c);
            p.grad[i] = funnel_grad(gates[i], c);
        }
        break;
    }
    case RegKind::l1:
        for (std::size_t i = 0; i < gates.size(); ++i) {
            p.value += std::abs(gates[i]);
            p.grad[i] = gates[i] > 0.0 ? 1.0 : (gates[i] < 0.0 ? -1.0 : 0.0);
        }
        break;
    case RegKind::l2:
        for (std::size_t i = 0; i < gates.size(); ++i) {
            p.value += gates[i] * gates[i];
            p.grad[i] = 2.0 * gates[i];
        }
        break;
    }
    return p;
}

}  // namespace fp
