// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>

namespace nmtest {

// Reference per-layer diversity scores measured on a 28-layer model for an
// english+greek language pair, and the allocation column they are paired with
// (e_min 1, e_max 6). The two disagree at layers 16 and 18: the scores imply
// (2, 1) there while the reference column lists (1, 2). Tests reproduce the
// score-derived allocation and pin the two-layer discrepancy explicitly.
inline constexpr std::array<int, 28> kGreek28Scores = {
    342, 79, 11,                      // 0-2
    18, 15, 11, 8, 7, 8, 8, 7,        // 3-10
    6, 9, 14, 9, 18, 81, 20, 19,      // 11-18
    28, 38, 232, 51, 208, 114, 111, 238, 223};  // 19-27

inline constexpr std::array<int, 28> kGreek28ReferenceAllocation = {
    6, 2, 1,                          // 0-2
    1, 1, 1, 1, 1, 1, 1, 1,           // 3-10
    1, 1, 1, 1, 1, 1, 1, 2,           // 11-18
    1, 1, 4, 1, 4, 2, 2, 4, 4};       // 19-27

inline constexpr std::array<int, 28> kGreek28DiscrepantLayers = []() {
  std::array<int, 28> marks{};
  marks[16] = 1;
  marks[18] = 1;
  return marks;
}();

// Uniformity-based comparison allocation for the same 28-layer model (84
// experts); carried as a report fixture only.
inline constexpr std::array<int, 28> kLayerSim28Allocation = {
    5, 5, 5,
    4, 3, 3, 2, 2, 2, 2, 2,
    2, 2, 2, 2, 2, 2, 2, 3,
    3, 3, 3, 3, 4, 4, 4, 4, 4};

// Reference allocation vector for a 24-layer model (36 added experts).
inline constexpr std::array<int, 24> kQwen24Allocation = {
    4, 2, 2, 2,
    1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1,
    2, 6};

}  // namespace nmtest
