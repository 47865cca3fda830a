#pragma once

// A deterministic grid arena. The agent has a position and a facing; monsters
// and items occupy cells. Perceptions are Boolean features of the state and
// actions are the only way the state changes.

#include <cstdint>
#include <string>
#include <vector>

namespace demosynth::world {

// Fixed percept order. The order is part of the visual-token wire format.
enum Percept : int {
  kFrontClear = 0,
  kMonsterInSight = 1,
  kMonsterAhead = 2,
  kItemHere = 3,
  kLowHealth = 4,
  kOnEdge = 5,
  kNumDefaultPercepts = 6,
};

// Fixed action order; same contract as the percepts.
enum Action : int {
  kMove = 0,
  kTurnLeft = 1,
  kTurnRight = 2,
  kAttack = 3,
  kPickup = 4,
  kNoop = 5,
  kNumDefaultActions = 6,
};

const std::vector<std::string>& default_percept_names();
const std::vector<std::string>& default_action_names();

struct WorldConfig {
  int grid_width = 7;
  int grid_height = 7;
  // Percepts beyond the six defined ones always read false; actions beyond
  // the six defined ones behave as NOOP.
  int q = kNumDefaultPercepts;
  int m = kNumDefaultActions;
  int monster_count = 3;
  int item_count = 3;
  int health_max = 10;
  int low_health_threshold = 4;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  // Names used as DSL action keywords.
  std::vector<std::string> action_names() const;

  bool operator==(const WorldConfig&) const = default;
};

enum class Facing : std::uint8_t { North = 0, East = 1, South = 2, West = 3 };

struct Entity {
  int x = 0;
  int y = 0;
  // alive for monsters, present for items.
  bool active = true;
  bool operator==(const Entity&) const = default;
};

struct WorldState {
  int x = 0;
  int y = 0;
  Facing facing = Facing::North;
  std::vector<Entity> monsters;
  std::vector<Entity> items;
  int health = 0;
  int step_count = 0;

  bool operator==(const WorldState&) const = default;
  // Stable single-line text form, used to compare and log states.
  std::string serialize() const;
};

// Boolean vector of length q, bit i = percept i.
class PerceptVector {
 public:
  PerceptVector() = default;
  PerceptVector(int size, std::uint32_t bits) : bits_(bits), size_(size) {}

  int size() const { return size_; }
  std::uint32_t bits() const { return bits_; }
  bool operator[](int i) const { return ((bits_ >> i) & 1U) != 0; }
  void set(int i, bool v) {
    bits_ = v ? (bits_ | (1U << i)) : (bits_ & ~(1U << i));
  }
  // "0/1" characters, index 0 first.
  std::string to_string() const;
  static PerceptVector from_string(const std::string& text);

  bool operator==(const PerceptVector&) const = default;

 private:
  std::uint32_t bits_ = 0;
  int size_ = 0;
};

// Deterministic placement from (config, episode_seed). Throws ConfigError when
// the entities do not fit.
WorldState init(const WorldConfig& config, std::uint64_t episode_seed);

PerceptVector perceptions(const WorldConfig& config, const WorldState& state);

// Throws InvalidAction when action >= m.
WorldState step(const WorldConfig& config, const WorldState& state, int action);

}  // namespace demosynth::world
