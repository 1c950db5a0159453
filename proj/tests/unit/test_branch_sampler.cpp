#include <doctest.h>

#include <array>
#include <vector>

#include "mvfuse/branch_sampler.hpp"
#include "mvfuse/rng.hpp"

using namespace mvfuse;

TEST_CASE("default schedule maps epochs to the three stage settings") {
    const StageSchedule s = StageSchedule::default_schedule();
    const Stage a = stage_for_epoch(s, 5);
    CHECK(a.delta_fbank == 0.3);
    CHECK(a.delta_unit == 0.0);
    const Stage b = stage_for_epoch(s, 15);
    CHECK(b.delta_fbank == 0.5);
    CHECK(b.delta_unit == 0.3);
    const Stage c = stage_for_epoch(s, 30);
    CHECK(c.delta_fbank == 0.3);
    CHECK(c.delta_unit == 0.0);
}

TEST_CASE("epoch boundaries belong to the later stage") {
    const StageSchedule s = StageSchedule::default_schedule();
    CHECK(stage_for_epoch(s, 9).delta_unit == 0.0);
    CHECK(stage_for_epoch(s, 10).delta_unit == 0.3);
    CHECK(stage_for_epoch(s, 24).delta_unit == 0.3);
    CHECK(stage_for_epoch(s, 25).delta_unit == 0.0);
    CHECK(stage_for_epoch(s, 100000).delta_fbank == 0.3);
}

TEST_CASE("sample_branch case split") {
    CHECK(sample_branch(0.1, 0.3, 0.3) == Branch::Fbank);
    CHECK(sample_branch(0.35, 0.3, 0.3) == Branch::Unit);
    CHECK(sample_branch(0.9, 0.3, 0.3) == Branch::Fusion);
    // Half-open intervals: p equal to the first threshold selects unit.
    CHECK(sample_branch(0.3, 0.3, 0.3) == Branch::Unit);
    CHECK(sample_branch(0.6, 0.3, 0.3) == Branch::Fusion);
    CHECK(sample_branch(0.0, 0.0, 0.0) == Branch::Fusion);
    CHECK_THROWS_AS((void)sample_branch(0.5, 0.7, 0.7), ConfigError);
    CHECK_THROWS_AS((void)sample_branch(0.5, -0.1, 0.0), ConfigError);
}

TEST_CASE("empirical branch frequencies track the thresholds") {
    const std::array<std::pair<double, double>, 3> settings = {
        {{0.3, 0.0}, {0.5, 0.3}, {0.3, 0.0}}};
    for (const auto& [df, du] : settings) {
        Rng rng(1234);
        std::size_t counts[3] = {0, 0, 0};
        const std::size_t n = 100000;
        for (std::size_t i = 0; i < n; ++i)
            ++counts[static_cast<int>(sample_branch(rng.uniform(), df, du))];
        const double f_fbank = static_cast<double>(counts[0]) / n;
        const double f_unit = static_cast<double>(counts[1]) / n;
        const double f_fusion = static_cast<double>(counts[2]) / n;
        CHECK(std::abs(f_fbank - df) <= 0.01);
        CHECK(std::abs(f_unit - du) <= 0.01);
        CHECK(std::abs(f_fusion - (1.0 - df - du)) <= 0.01);
    }
}

TEST_CASE("seeded draws give an identical branch sequence") {
    auto draw = [] {
        Rng rng(777);
        std::vector<Branch> seq;
        for (int i = 0; i < 1000; ++i) seq.push_back(sample_branch(rng.uniform(), 0.5, 0.3));
        return seq;
    };
    CHECK(draw() == draw());
}

TEST_CASE("schedule validation rejects malformed stage lists") {
    StageSchedule gap;
    gap.stages = {{0, 10, 0.3, 0.0}, {12, std::nullopt, 0.3, 0.0}};
    CHECK_THROWS_AS(gap.validate(), ConfigError);

    StageSchedule overlap;
    overlap.stages = {{0, 10, 0.3, 0.0}, {5, std::nullopt, 0.3, 0.0}};
    CHECK_THROWS_AS(overlap.validate(), ConfigError);

    StageSchedule closed_end;
    closed_end.stages = {{0, 10, 0.3, 0.0}};
    CHECK_THROWS_AS(closed_end.validate(), ConfigError);

    StageSchedule bad_delta;
    bad_delta.stages = {{0, std::nullopt, 0.7, 0.5}};
    CHECK_THROWS_AS(bad_delta.validate(), ConfigError);

    StageSchedule ok = StageSchedule::default_schedule();
    CHECK_NOTHROW(ok.validate());
}
