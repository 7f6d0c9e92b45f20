#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace killchain {

/// The seven Lockheed Martin kill-chain stages, ordered by index 1..7.
enum class Phase : int {
  Reconnaissance = 1,
  Weaponization = 2,
  Delivery = 3,
  Exploitation = 4,
  Installation = 5,
  CommandAndControl = 6,
  ActionsOnObjectives = 7,
};

inline constexpr std::size_t kPhaseCount = 7;

inline constexpr std::array<Phase, kPhaseCount> kAllPhases = {
    Phase::Reconnaissance, Phase::Weaponization,     Phase::Delivery,
    Phase::Exploitation,   Phase::Installation,      Phase::CommandAndControl,
    Phase::ActionsOnObjectives,
};

constexpr int phase_index(Phase p) noexcept { return static_cast<int>(p); }

/// Zero-based slot, for indexing per-phase arrays.
constexpr std::size_t phase_slot(Phase p) noexcept {
  return static_cast<std::size_t>(phase_index(p) - 1);
}

std::string_view phase_name(Phase p) noexcept;

/// Human-facing name ("Command and Control") used in DOT cluster labels.
std::string_view phase_display_name(Phase p) noexcept;

std::optional<Phase> phase_from_index(int index) noexcept;

/// Accepts the canonical names only ("CommandAndControl", not "C2").
std::optional<Phase> phase_from_name(std::string_view name) noexcept;

/// Like phase_from_name but throws a Format error naming the bad value.
Phase parse_phase(std::string_view name);

}  // namespace killchain
