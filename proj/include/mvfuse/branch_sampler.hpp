#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mvfuse/errors.hpp"

namespace mvfuse {

enum class Branch { Fbank, Unit, Fusion };

inline const char* branch_name(Branch b) {
    switch (b) {
        case Branch::Fbank: return "fbank";
        case Branch::Unit: return "unit";
        default: return "fusion";
    }
}

struct Stage {
    std::int64_t epoch_lo = 0;                   // inclusive
    std::optional<std::int64_t> epoch_hi;        // exclusive; nullopt = open-ended
    double delta_fbank = 0.0;
    double delta_unit = 0.0;
};

// Epoch-ranged branch-dropout thresholds. Stages must tile [0, inf) with
// half-open ranges, no gaps, no overlaps.
struct StageSchedule {
    std::vector<Stage> stages;

    void validate() const {
        if (stages.empty()) throw ConfigError("schedule: no stages");
        std::int64_t expect = 0;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const Stage& s = stages[i];
            if (s.delta_fbank < 0.0 || s.delta_unit < 0.0 ||
                s.delta_fbank + s.delta_unit > 1.0)
                throw ConfigError("schedule: stage " + std::to_string(i) +
                                  " thresholds must satisfy d_fbank, d_unit >= 0 and "
                                  "d_fbank + d_unit <= 1");
            if (s.epoch_lo != expect)
                throw ConfigError("schedule: stage " + std::to_string(i) + " starts at epoch " +
                                  std::to_string(s.epoch_lo) + ", expected " +
                                  std::to_string(expect));
            if (i + 1 == stages.size()) {
                if (s.epoch_hi)
                    throw ConfigError("schedule: last stage must be open-ended");
            } else {
                if (!s.epoch_hi || *s.epoch_hi <= s.epoch_lo)
                    throw ConfigError("schedule: stage " + std::to_string(i) +
                                      " needs an upper epoch above its lower epoch");
                expect = *s.epoch_hi;
            }
        }
    }

    // The three-stage setup used throughout: mostly-fusion with fbank
    // dropout, then heavier mixing, then back to the first setting.
    static StageSchedule default_schedule() {
        StageSchedule s;
        s.stages = {{0, 10, 0.3, 0.0}, {10, 25, 0.5, 0.3}, {25, std::nullopt, 0.3, 0.0}};
        return s;
    }

    static StageSchedule fusion_only() {
        StageSchedule s;
        s.stages = {{0, std::nullopt, 0.0, 0.0}};
        return s;
    }
};

inline Stage stage_for_epoch(const StageSchedule& schedule, std::int64_t epoch) {
    schedule.validate();
    if (epoch < 0) throw ConfigError("schedule: epoch must be >= 0");
    for (const Stage& s : schedule.stages) {
        const std::int64_t hi = s.epoch_hi.value_or(std::numeric_limits<std::int64_t>::max());
        if (epoch >= s.epoch_lo && epoch < hi) return s;
    }
    return schedule.stages.back();  // unreachable once validated
}

// Case split over a uniform draw p in [0, 1):
//   p < d_fbank                      -> fbank only
//   d_fbank <= p < d_fbank + d_unit  -> unit only
//   otherwise                        -> fused input
inline Branch sample_branch(double p, double delta_fbank, double delta_unit) {
    if (delta_fbank < 0.0 || delta_unit < 0.0 || delta_fbank + delta_unit > 1.0)
        throw ConfigError("sample_branch: invalid thresholds");
    if (p < delta_fbank) return Branch::Fbank;
    if (p < delta_fbank + delta_unit) return Branch::Unit;
    return Branch::Fusion;
}

}  // namespace mvfuse
