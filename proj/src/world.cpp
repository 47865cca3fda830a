#include "demosynth/world.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "demosynth/error.hpp"
#include "demosynth/rng.hpp"

namespace demosynth::world {

namespace {

constexpr int kDx[] = {0, 1, 0, -1};
constexpr int kDy[] = {-1, 0, 1, 0};

// Placement streams keyed into counter_hash.
enum : std::uint64_t { kStreamMonsterCells = 1, kStreamItemCells = 2, kStreamAgent = 3 };

bool in_bounds(const WorldConfig& c, int x, int y) {
  return x >= 0 && y >= 0 && x < c.grid_width && y < c.grid_height;
}

const Entity* live_monster_at(const WorldState& s, int x, int y) {
  for (const Entity& m : s.monsters)
    if (m.active && m.x == x && m.y == y) return &m;
  return nullptr;
}

// Fisher-Yates over the given cells; each swap draw is keyed by its position.
void keyed_shuffle(std::vector<int>& cells, std::uint64_t seed, std::uint64_t stream) {
  for (std::size_t i = cells.size(); i > 1; --i) {
    const std::uint64_t j = bounded(counter_hash({seed, stream, i}), i, stream);
    std::swap(cells[i - 1], cells[j]);
  }
}

}  // namespace

const std::vector<std::string>& default_percept_names() {
  static const std::vector<std::string> names{"FRONT_CLEAR", "MONSTER_IN_SIGHT", "MONSTER_AHEAD",
                                              "ITEM_HERE",   "LOW_HEALTH",       "ON_EDGE"};
  return names;
}

const std::vector<std::string>& default_action_names() {
  static const std::vector<std::string> names{"MOVE", "TURN_L", "TURN_R",
                                              "ATTACK", "PICKUP", "NOOP"};
  return names;
}

void WorldConfig::validate() const {
  if (grid_width < 1 || grid_height < 1) throw ConfigError("grid dimensions must be positive");
  if (q < 1 || q > 16) throw ConfigError("q must be in [1, 16]");
  if (m < 2 || m > 16) throw ConfigError("m must be in [2, 16]");
  if (q + m > 20) throw ConfigError("q + m must be <= 20 (visual vocabulary 4 + 2^(q+m))");
  if (monster_count < 0 || item_count < 0) throw ConfigError("entity counts must be >= 0");
  if (health_max < 1) throw ConfigError("health_max must be >= 1");
  if (low_health_threshold >= health_max)
    throw ConfigError("low_health_threshold must be < health_max");
  const int cells = grid_width * grid_height;
  if (monster_count + 1 > cells)
    throw ConfigError("monster_count " + std::to_string(monster_count) +
                      " exceeds free cells " + std::to_string(cells - 1));
  if (item_count > cells - monster_count)
    throw ConfigError("item_count " + std::to_string(item_count) + " exceeds free cells " +
                      std::to_string(cells - monster_count));
}

std::vector<std::string> WorldConfig::action_names() const {
  std::vector<std::string> names;
  for (int a = 0; a < m; ++a) {
    names.push_back(a < kNumDefaultActions ? default_action_names()[static_cast<std::size_t>(a)]
                                           : "ACT" + std::to_string(a));
  }
  return names;
}

std::string WorldState::serialize() const {
  std::ostringstream os;
  os << "agent=" << x << ',' << y << ',' << "NESW"[static_cast<int>(facing)] << " health=" << health
     << " step=" << step_count << " monsters=";
  for (const Entity& m : monsters) os << '(' << m.x << ',' << m.y << ',' << m.active << ')';
  os << " items=";
  for (const Entity& i : items) os << '(' << i.x << ',' << i.y << ',' << i.active << ')';
  return os.str();
}

std::string PerceptVector::to_string() const {
  std::string s(static_cast<std::size_t>(size_), '0');
  for (int i = 0; i < size_; ++i)
    if ((*this)[i]) s[static_cast<std::size_t>(i)] = '1';
  return s;
}

PerceptVector PerceptVector::from_string(const std::string& text) {
  if (text.empty() || text.size() > 32) throw RangeError("percept string length out of range");
  PerceptVector p(static_cast<int>(text.size()), 0);
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '0' && text[i] != '1') throw RangeError("percept string must be 0/1");
    p.set(static_cast<int>(i), text[i] == '1');
  }
  return p;
}

WorldState init(const WorldConfig& config, std::uint64_t episode_seed) {
  config.validate();
  const int cells = config.grid_width * config.grid_height;
  std::vector<int> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  keyed_shuffle(order, episode_seed, kStreamMonsterCells);

  WorldState s;
  s.x = order[0] % config.grid_width;
  s.y = order[0] / config.grid_width;
  for (int i = 0; i < config.monster_count; ++i) {
    const int cell = order[static_cast<std::size_t>(1 + i)];
    s.monsters.push_back({cell % config.grid_width, cell / config.grid_width, true});
  }
  // Items avoid monster cells but may share the agent's cell.
  std::vector<int> free_cells;
  free_cells.push_back(order[0]);
  for (std::size_t i = static_cast<std::size_t>(1 + config.monster_count); i < order.size(); ++i)
    free_cells.push_back(order[i]);
  std::sort(free_cells.begin(), free_cells.end());
  keyed_shuffle(free_cells, episode_seed, kStreamItemCells);
  for (int i = 0; i < config.item_count; ++i) {
    const int cell = free_cells[static_cast<std::size_t>(i)];
    s.items.push_back({cell % config.grid_width, cell / config.grid_width, true});
  }
  s.facing = static_cast<Facing>(bounded(counter_hash({episode_seed, kStreamAgent, 0}), 4));
  s.health = 1 + static_cast<int>(bounded(counter_hash({episode_seed, kStreamAgent, 1}),
                                          static_cast<std::uint64_t>(config.health_max)));
  s.step_count = 0;
  return s;
}

PerceptVector perceptions(const WorldConfig& config, const WorldState& s) {
  PerceptVector p(config.q, 0);
  const int f = static_cast<int>(s.facing);
  const int fx = s.x + kDx[f];
  const int fy = s.y + kDy[f];
  const bool front_in_bounds = in_bounds(config, fx, fy);
  const bool monster_ahead = front_in_bounds && live_monster_at(s, fx, fy) != nullptr;

  bool in_sight = false;
  for (int cx = fx, cy = fy; in_bounds(config, cx, cy); cx += kDx[f], cy += kDy[f]) {
    if (live_monster_at(s, cx, cy)) {
      in_sight = true;
      break;
    }
  }
  bool item_here = false;
  for (const Entity& it : s.items)
    if (it.active && it.x == s.x && it.y == s.y) item_here = true;

  const bool bits[kNumDefaultPercepts] = {
      front_in_bounds && !monster_ahead,
      in_sight,
      monster_ahead,
      item_here,
      s.health < config.low_health_threshold,
      s.x == 0 || s.y == 0 || s.x == config.grid_width - 1 || s.y == config.grid_height - 1,
  };
  for (int i = 0; i < std::min(config.q, static_cast<int>(kNumDefaultPercepts)); ++i) p.set(i, bits[i]);
  return p;
}

WorldState step(const WorldConfig& config, const WorldState& state, int action) {
  if (action < 0 || action >= config.m)
    throw InvalidAction("action " + std::to_string(action) + " not in [0, " +
                        std::to_string(config.m) + ")");
  WorldState s = state;
  const int f = static_cast<int>(s.facing);
  const int fx = s.x + kDx[f];
  const int fy = s.y + kDy[f];
  switch (action) {
    case kMove:
      if (in_bounds(config, fx, fy) && !live_monster_at(s, fx, fy)) {
        s.x = fx;
        s.y = fy;
      }
      break;
    case kTurnLeft:
      s.facing = static_cast<Facing>((f + 3) % 4);
      break;
    case kTurnRight:
      s.facing = static_cast<Facing>((f + 1) % 4);
      break;
    case kAttack:
      for (Entity& m : s.monsters)
        if (m.active && m.x == fx && m.y == fy) m.active = false;
      break;
    case kPickup:
      for (Entity& it : s.items) {
        if (it.active && it.x == s.x && it.y == s.y) {
          it.active = false;
          s.health = std::min(config.health_max, s.health + 1);
          break;
        }
      }
      break;
    default:
      break;
  }
  for (int d = 0; d < 4; ++d) {
    if (live_monster_at(s, s.x + kDx[d], s.y + kDy[d])) {
      s.health = std::max(0, s.health - 1);
      break;
    }
  }
  ++s.step_count;
  return s;
}

}  // namespace demosynth::world
