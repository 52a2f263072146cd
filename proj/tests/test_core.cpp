#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "twinbed/core.hpp"
#include "twinbed/noise.hpp"

using namespace twinbed;

namespace {
constexpr double kPi = std::numbers::pi;
}

TEST(Units, PixelToMillimeter) {
  EXPECT_EQ(px_to_mm(500), 1250.0);
  EXPECT_EQ(px_to_mm(0), 0.0);
}

TEST(Units, MillimeterToPixelRounds) {
  // 1251 / 2.5 = 500.4
  EXPECT_EQ(mm_to_px(1251.0), 500);
  EXPECT_EQ(mm_to_px(1250.0), 500);
  // Half-way cases go away from zero.
  EXPECT_EQ(mm_to_px(1.25), 1);
  EXPECT_EQ(mm_to_px(-1.25), -1);
  EXPECT_EQ(mm_to_px(-1251.0), -500);
}

TEST(Units, IntegerPixelRoundtripIsExact) {
  for (std::int64_t p = -20000; p <= 20000; ++p) {
    ASSERT_EQ(mm_to_px(px_to_mm(static_cast<double>(p))), p);
  }
}

TEST(WrapAngle, Examples) {
  EXPECT_EQ(wrap_angle(0.0), 0.0);
  EXPECT_NEAR(wrap_angle(3 * kPi), kPi, 1e-12);
  EXPECT_EQ(wrap_angle(-kPi), kPi);
  EXPECT_EQ(wrap_angle(kPi), kPi);
}

TEST(WrapAngle, RangeCongruenceAndIdempotence) {
  NoiseSource rng(11);
  for (int i = 0; i < 100000; ++i) {
    const double x = (rng.uniform() - 0.5) * 200.0;
    const double w = wrap_angle(x);
    ASSERT_GT(w, -kPi);
    ASSERT_LE(w, kPi);
    // Same angle modulo 2 pi.
    const double k = (x - w) / (2 * kPi);
    ASSERT_NEAR(k, std::round(k), 1e-9);
    ASSERT_EQ(wrap_angle(w), w);
  }
}

TEST(Pose2D, ConstructorNormalizesHeading) {
  const Pose2D p(1.0, 2.0, 5 * kPi / 2);
  EXPECT_NEAR(p.theta, kPi / 2, 1e-12);
}

TEST(ChassisKind, MotorCountsAndFlags) {
  EXPECT_EQ(motor_count(ChassisKind::Omni4), 4);
  EXPECT_EQ(motor_count(ChassisKind::Diff2), 2);
  EXPECT_EQ(motor_count(ChassisKind::Diff2x2), 4);
  EXPECT_TRUE(has_steering_gear(ChassisKind::FWD));
  EXPECT_TRUE(has_steering_gear(ChassisKind::RWD));
  EXPECT_TRUE(has_steering_gear(ChassisKind::WD4));
  EXPECT_FALSE(has_steering_gear(ChassisKind::Omni4));
  EXPECT_FALSE(has_steering_gear(ChassisKind::Diff2));
  for (auto k : {ChassisKind::Omni4, ChassisKind::Diff2, ChassisKind::FWD, ChassisKind::RWD,
                 ChassisKind::WD4, ChassisKind::Diff2x2}) {
    EXPECT_EQ(chassis_from_string(to_string(k)), k);
  }
  EXPECT_THROW(chassis_from_string("tank"), ConfigInvalid);
}

TEST(NoiseSource, SameSeedSameStream) {
  NoiseSource a(5), b(5), c(6);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const double x = a.gaussian(1.0);
    ASSERT_EQ(x, b.gaussian(1.0));
    differs |= x != c.gaussian(1.0);
  }
  EXPECT_TRUE(differs);
}

TEST(NoiseSource, GaussianMoments) {
  NoiseSource rng(3);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.gaussian(2.0);
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(sd, 2.0, 0.02);
}
