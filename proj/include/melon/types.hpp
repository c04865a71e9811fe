#pragma once

#include <array>
#include <string>
#include <string_view>

#include "melon/error.hpp"

namespace melon {

enum class MobilityClass : int {
  CompletelyImmobile = 1,
  VeryLimited = 2,
  SlightlyLimited = 3,
  NoLimitation = 4,
};

inline constexpr std::size_t kNumClasses = 4;

// 0-based index used for head/score positions.
inline std::size_t class_index(MobilityClass c) { return static_cast<std::size_t>(c) - 1; }

inline MobilityClass mobility_from_int(long v) {
  if (v < 1 || v > 4) throw DataError("mobility score must be 1..4, got " + std::to_string(v));
  return static_cast<MobilityClass>(v);
}

inline std::string_view mobility_name(MobilityClass c) {
  static constexpr std::array<std::string_view, 4> names{
      "completely_immobile", "very_limited", "slightly_limited", "no_limitation"};
  return names[class_index(c)];
}

enum class Site { wrist, ankle };

inline std::string_view site_name(Site s) { return s == Site::wrist ? "wrist" : "ankle"; }

inline Site site_from_string(std::string_view s) {
  if (s == "wrist") return Site::wrist;
  if (s == "ankle") return Site::ankle;
  throw DataError("unknown sensor site '" + std::string(s) + "' (expected wrist or ankle)");
}

enum class Split { train, validation, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw DataError("unknown split name '" + std::string(s) + "'");
}

}  // namespace melon
