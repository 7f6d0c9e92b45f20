#include "killchain/phase.hpp"

#include <string>

#include "killchain/error.hpp"

namespace killchain {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Format: return "format";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Config: return "config";
    case ErrorKind::Lookup: return "lookup";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::EmptyInput: return "empty-input";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

namespace {

constexpr std::array<std::string_view, kPhaseCount> kNames = {
    "Reconnaissance", "Weaponization", "Delivery",           "Exploitation",
    "Installation",   "CommandAndControl", "ActionsOnObjectives",
};

constexpr std::array<std::string_view, kPhaseCount> kDisplayNames = {
    "Reconnaissance", "Weaponization",       "Delivery",
    "Exploitation",   "Installation",        "Command and Control",
    "Actions on Objectives",
};

}  // namespace

std::string_view phase_name(Phase p) noexcept { return kNames[phase_slot(p)]; }

std::string_view phase_display_name(Phase p) noexcept {
  return kDisplayNames[phase_slot(p)];
}

std::optional<Phase> phase_from_index(int index) noexcept {
  if (index < 1 || index > static_cast<int>(kPhaseCount)) return std::nullopt;
  return static_cast<Phase>(index);
}

std::optional<Phase> phase_from_name(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<Phase>(static_cast<int>(i) + 1);
  }
  return std::nullopt;
}

Phase parse_phase(std::string_view name) {
  if (auto p = phase_from_name(name)) return *p;
  fail(ErrorKind::Format, "unknown kill-chain phase '" + std::string(name) + "'");
}

}  // namespace killchain
