// Grid-world engine for the GoToObj task family.
//
// The receiver acts inside the grid with a two-cell view (the cell it occupies
// and the cell it faces); the sender sees the whole grid. Cells are encoded as
// integer (kind, color, state) triples using the id table below.
#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace srcomm {

// ---------------------------------------------------------------------------
// Enumerations and id tables
// ---------------------------------------------------------------------------

enum class Direction : std::uint8_t { East = 0, South = 1, West = 2, North = 3 };

inline constexpr Direction turn_left(Direction d) {
  return static_cast<Direction>((static_cast<int>(d) + 3) % 4);
}
inline constexpr Direction turn_right(Direction d) {
  return static_cast<Direction>((static_cast<int>(d) + 1) % 4);
}

enum class ObjectKind : std::uint8_t { Key = 0, Ball = 1, Box = 2 };
enum class Color : std::uint8_t { Red = 0, Green = 1, Blue = 2, Purple = 3, Yellow = 4, Grey = 5 };

inline constexpr int kNumColors = 6;
inline constexpr int kNumObjectKinds = 3;

// Action indices are fixed: a0 = TurnLeft, a1 = TurnRight, a2 = Forward.
enum class Action : std::uint8_t {
  TurnLeft = 0,
  TurnRight = 1,
  Forward = 2,
  Pickup = 3,
  Drop = 4,
  Toggle = 5,
  Done = 6,
};
inline constexpr int kNumActions = 7;

enum class EnvFamily : std::uint8_t {
  GoToObj = 0,
  GoToObjUnlocked = 1,
  GoToObjLockedUnambiguous = 2,
  GoToObjLockedAmbiguous = 3,
};

/// Cell encoding ids. Kind ids follow the MiniGrid object table.
namespace cell_code {
inline constexpr int kUnseen = 0;
inline constexpr int kEmpty = 1;
inline constexpr int kWall = 2;
inline constexpr int kDoor = 4;
inline constexpr int kKey = 5;
inline constexpr int kBall = 6;
inline constexpr int kBox = 7;
inline constexpr int kAgent = 10;
inline constexpr int kNumKinds = 11;

// Door states.
inline constexpr int kOpen = 0;
inline constexpr int kClosed = 1;
inline constexpr int kLocked = 2;
// The agent cell stores its direction (0..3) in the state slot.
inline constexpr int kNumStates = 4;
}  // namespace cell_code

inline constexpr std::string_view color_name(Color c) {
  constexpr std::array<std::string_view, kNumColors> names = {"red",    "green",  "blue",
                                                              "purple", "yellow", "grey"};
  return names[static_cast<int>(c)];
}
inline constexpr std::string_view kind_name(ObjectKind k) {
  constexpr std::array<std::string_view, kNumObjectKinds> names = {"key", "ball", "box"};
  return names[static_cast<int>(k)];
}
inline constexpr std::string_view action_name(Action a) {
  constexpr std::array<std::string_view, kNumActions> names = {
      "left", "right", "forward", "pickup", "drop", "toggle", "done"};
  return names[static_cast<int>(a)];
}
inline constexpr std::string_view family_name(EnvFamily f) {
  constexpr std::array<std::string_view, 4> names = {
      "GoToObj", "GoToObjUnlocked", "GoToObjLockedUnambiguous", "GoToObjLockedAmbiguous"};
  return names[static_cast<int>(f)];
}

inline EnvFamily parse_family(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    auto f = static_cast<EnvFamily>(i);
    if (family_name(f) == name) return f;
  }
  if (name == "GoToObjLocked" || name == "GoToObjLocked1") return EnvFamily::GoToObjLockedUnambiguous;
  if (name == "GoToObjLocked2") return EnvFamily::GoToObjLockedAmbiguous;
  throw std::invalid_argument("unknown environment family: " + std::string(name));
}

inline EnvFamily family_from_id(int id) {
  if (id < 0 || id > 3) throw std::invalid_argument("invalid environment family id " + std::to_string(id));
  return static_cast<EnvFamily>(id);
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct Position {
  int x = 0;
  int y = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

inline constexpr Position step_towards(Position p, Direction d) {
  switch (d) {
    case Direction::East: return {p.x + 1, p.y};
    case Direction::South: return {p.x, p.y + 1};
    case Direction::West: return {p.x - 1, p.y};
    case Direction::North: return {p.x, p.y - 1};
  }
  return p;
}

struct WorldObject {
  ObjectKind kind = ObjectKind::Ball;
  Color color = Color::Red;
  friend bool operator==(const WorldObject&, const WorldObject&) = default;
};

struct Cell {
  enum class Type : std::uint8_t { Floor, Wall, Door, Object };
  Type type = Type::Floor;
  Color color = Color::Red;  // Door or Object
  ObjectKind kind = ObjectKind::Ball;  // Object only
  bool locked = false;  // Door only
  bool open = false;  // Door only

  static Cell floor() { return {}; }
  static Cell wall() { return {Type::Wall}; }
  static Cell door(Color c, bool locked, bool open) { return {Type::Door, c, ObjectKind::Ball, locked, open}; }
  static Cell object(WorldObject o) { return {Type::Object, o.color, o.kind}; }

  bool is_traversable() const { return type == Type::Floor || (type == Type::Door && open); }
  bool holds_object() const { return type == Type::Object; }
  WorldObject as_object() const { return {kind, color}; }

  friend bool operator==(const Cell&, const Cell&) = default;
};

using CellCode = std::array<std::uint8_t, 3>;

inline CellCode encode_cell(const Cell& c) {
  using namespace cell_code;
  switch (c.type) {
    case Cell::Type::Floor: return {kEmpty, 0, 0};
    case Cell::Type::Wall: return {kWall, 0, 0};
    case Cell::Type::Door:
      return {kDoor, static_cast<std::uint8_t>(c.color),
              static_cast<std::uint8_t>(c.locked ? kLocked : (c.open ? kOpen : kClosed))};
    case Cell::Type::Object:
      return {static_cast<std::uint8_t>(kKey + static_cast<int>(c.kind)), static_cast<std::uint8_t>(c.color), 0};
  }
  return {kUnseen, 0, 0};
}

/// Closed template vocabulary of instructions: "go to the <color> <kind>".
namespace instruction_vocab {
inline constexpr int kGo = 0;
inline constexpr int kTo = 1;
inline constexpr int kThe = 2;
inline constexpr int kFirstColor = 3;
inline constexpr int kFirstKind = kFirstColor + kNumColors;
inline constexpr int kSize = kFirstKind + kNumObjectKinds;
inline constexpr int kLength = 5;
}  // namespace instruction_vocab

struct Instruction {
  Color color = Color::Red;
  ObjectKind kind = ObjectKind::Ball;
  std::array<int, instruction_vocab::kLength> tokens{};

  static Instruction make(Color color, ObjectKind kind) {
    using namespace instruction_vocab;
    return {color, kind, {kGo, kTo, kThe, kFirstColor + static_cast<int>(color), kFirstKind + static_cast<int>(kind)}};
  }
  bool matches(const WorldObject& o) const { return o.color == color && o.kind == kind; }
  std::string text() const {
    return "go to the " + std::string(color_name(color)) + " " + std::string(kind_name(kind));
  }
  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct EnvConfig {
  EnvFamily family = EnvFamily::GoToObj;
  int max_steps = 64;
  std::uint64_t seed = 0;
};

struct EnvState {
  int width = 0;
  int height = 0;
  std::vector<Cell> grid;  // row-major, index y * width + x
  Position agent_pos;
  Direction agent_dir = Direction::East;
  std::optional<WorldObject> carrying;
  int step_count = 0;
  int max_steps = 64;
  Instruction goal;
  bool done = false;

  const Cell& at(Position p) const { return grid[static_cast<std::size_t>(p.y * width + p.x)]; }
  Cell& at(Position p) { return grid[static_cast<std::size_t>(p.y * width + p.x)]; }
  bool in_bounds(Position p) const { return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height; }
  Position front_pos() const { return step_towards(agent_pos, agent_dir); }

  /// Faced cell; positions outside the grid read as wall.
  Cell front_cell() const {
    Position f = front_pos();
    return in_bounds(f) ? at(f) : Cell::wall();
  }
  bool facing_goal() const {
    Cell c = front_cell();
    return c.holds_object() && goal.matches(c.as_object());
  }

  /// Position of the first object matching the instruction, if still in the grid.
  std::optional<Position> goal_position() const {
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const Cell& c = at({x, y});
        if (c.holds_object() && goal.matches(c.as_object())) return Position{x, y};
      }
    return std::nullopt;
  }

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct StepResult {
  double reward = 0.0;
  bool done = false;
};

/// Receiver view: occupied cell and faced cell in the top row of a 2x2 square;
/// the bottom row is the reserved unseen code.
struct ReceiverObs {
  static constexpr int kSide = 2;
  std::array<CellCode, 4> cells{};
};

/// Sender view: the full (square) grid with the receiver drawn in.
struct SenderObs {
  int side = 0;
  std::vector<CellCode> cells;  // row-major
  friend bool operator==(const SenderObs&, const SenderObs&) = default;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr int kMaxPlacementTries = 1000;

struct Room {
  int x0, y0, x1, y1;  // inclusive interior bounds
};

template <class Rng>
int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <class Rng>
Position sample_free(const EnvState& s, const Room& room, Rng& rng, const std::vector<Position>& taken) {
  for (int attempt = 0; attempt < kMaxPlacementTries; ++attempt) {
    Position p{uniform_int(rng, room.x0, room.x1), uniform_int(rng, room.y0, room.y1)};
    if (s.at(p).type != Cell::Type::Floor) continue;
    bool clash = false;
    for (const auto& t : taken) clash = clash || t == p;
    if (!clash) return p;
  }
  throw std::logic_error("grid generator failed to place an entity after bounded retries");
}

inline EnvState blank(int side, int max_steps) {
  EnvState s;
  s.width = side;
  s.height = side;
  s.max_steps = max_steps;
  s.grid.assign(static_cast<std::size_t>(side * side), Cell::floor());
  for (int i = 0; i < side; ++i) {
    s.at({i, 0}) = Cell::wall();
    s.at({i, side - 1}) = Cell::wall();
    s.at({0, i}) = Cell::wall();
    s.at({side - 1, i}) = Cell::wall();
  }
  return s;
}

template <class Rng>
WorldObject random_object(Rng& rng, bool allow_key) {
  int kind = allow_key ? uniform_int(rng, 0, 2) : uniform_int(rng, 1, 2);
  return {static_cast<ObjectKind>(kind), static_cast<Color>(uniform_int(rng, 0, kNumColors - 1))};
}

}  // namespace detail

/// Builds a fresh episode. The returned state already holds the instruction.
template <class Rng>
EnvState reset(const EnvConfig& config, Rng& rng) {
  using detail::Room;
  if (config.max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (static_cast<int>(config.family) < 0 || static_cast<int>(config.family) > 3)
    throw std::invalid_argument("invalid environment family");

  EnvState s;
  std::vector<Position> taken;
  if (config.family == EnvFamily::GoToObj) {
    s = detail::blank(8, config.max_steps);
    const Room room{1, 1, 6, 6};
    WorldObject obj = detail::random_object(rng, true);
    Position obj_pos = detail::sample_free(s, room, rng, taken);
    s.at(obj_pos) = Cell::object(obj);
    taken.push_back(obj_pos);
    s.agent_pos = detail::sample_free(s, room, rng, taken);
    s.goal = Instruction::make(obj.color, obj.kind);
  } else {
    // Four 3x3 rooms in a 9x9 grid; only the upper two are used.
    s = detail::blank(9, config.max_steps);
    for (int i = 0; i < 9; ++i) {
      s.at({4, i}) = Cell::wall();
      s.at({i, 4}) = Cell::wall();
    }
    const Room left{1, 1, 3, 3};
    const Room right{5, 1, 7, 3};
    const bool locked = config.family != EnvFamily::GoToObjUnlocked;
    const Color door_color = static_cast<Color>(detail::uniform_int(rng, 0, kNumColors - 1));
    const Position door_pos{4, detail::uniform_int(rng, 1, 3)};
    s.at(door_pos) = Cell::door(door_color, locked, false);

    const int goal_count = config.family == EnvFamily::GoToObjLockedAmbiguous ? 2 : 1;
    std::vector<WorldObject> candidates;
    for (int i = 0; i < goal_count; ++i) {
      WorldObject obj = detail::random_object(rng, false);
      // Distractor must differ from the other candidate so the instruction disambiguates.
      for (int attempt = 0; i > 0 && obj == candidates[0]; ++attempt) {
        if (attempt >= detail::kMaxPlacementTries)
          throw std::logic_error("grid generator failed to draw a distinct distractor");
        obj = detail::random_object(rng, false);
      }
      Position p = detail::sample_free(s, right, rng, taken);
      s.at(p) = Cell::object(obj);
      taken.push_back(p);
      candidates.push_back(obj);
    }
    if (locked) {
      Position key_pos = detail::sample_free(s, left, rng, taken);
      s.at(key_pos) = Cell::object({ObjectKind::Key, door_color});
      taken.push_back(key_pos);
    }
    s.agent_pos = detail::sample_free(s, left, rng, taken);
    const WorldObject& target = candidates[static_cast<std::size_t>(detail::uniform_int(rng, 0, goal_count - 1))];
    s.goal = Instruction::make(target.color, target.kind);
  }
  s.agent_dir = static_cast<Direction>(detail::uniform_int(rng, 0, 3));
  // Never start facing the goal: a Pickup could then remove it before success is checked.
  while (s.facing_goal()) s.agent_dir = turn_right(s.agent_dir);
  return s;
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Applies an action in place. Success (facing an instruction-matching object
/// after the action) takes precedence over the step limit.
inline StepResult step(EnvState& s, Action action) {
  if (s.done) throw std::logic_error("step called on a finished episode");
  ++s.step_count;
  const Position fwd = s.front_pos();
  const bool fwd_in = s.in_bounds(fwd);
  switch (action) {
    case Action::TurnLeft: s.agent_dir = turn_left(s.agent_dir); break;
    case Action::TurnRight: s.agent_dir = turn_right(s.agent_dir); break;
    case Action::Forward:
      if (fwd_in && s.at(fwd).is_traversable()) s.agent_pos = fwd;
      break;
    case Action::Pickup:
      if (fwd_in && !s.carrying && s.at(fwd).holds_object()) {
        s.carrying = s.at(fwd).as_object();
        s.at(fwd) = Cell::floor();
      }
      break;
    case Action::Drop:
      if (fwd_in && s.carrying && s.at(fwd).type == Cell::Type::Floor) {
        s.at(fwd) = Cell::object(*s.carrying);
        s.carrying.reset();
      }
      break;
    case Action::Toggle:
      if (fwd_in && s.at(fwd).type == Cell::Type::Door) {
        Cell& door = s.at(fwd);
        if (door.locked) {
          if (s.carrying && s.carrying->kind == ObjectKind::Key && s.carrying->color == door.color) {
            door.locked = false;
            door.open = true;
          }
        } else {
          door.open = !door.open;
        }
      }
      break;
    case Action::Done: break;
  }

  StepResult r;
  if (s.facing_goal()) {
    r.done = true;
    r.reward = 1.0 - 0.9 * (static_cast<double>(s.step_count) / s.max_steps);
  } else if (s.step_count >= s.max_steps) {
    r.done = true;
  }
  s.done = r.done;
  return r;
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

inline ReceiverObs receiver_observation(const EnvState& s) {
  ReceiverObs obs;
  // A carried object shows up in the occupied cell.
  obs.cells[0] = s.carrying ? encode_cell(Cell::object(*s.carrying)) : encode_cell(s.at(s.agent_pos));
  obs.cells[1] = encode_cell(s.front_cell());
  obs.cells[2] = {cell_code::kUnseen, 0, 0};
  obs.cells[3] = {cell_code::kUnseen, 0, 0};
  return obs;
}

inline SenderObs sender_observation(const EnvState& s) {
  SenderObs obs;
  obs.side = s.width;
  obs.cells.reserve(s.grid.size());
  for (const auto& c : s.grid) obs.cells.push_back(encode_cell(c));
  obs.cells[static_cast<std::size_t>(s.agent_pos.y * s.width + s.agent_pos.x)] = {
      cell_code::kAgent, 0, static_cast<std::uint8_t>(s.agent_dir)};
  return obs;
}

/// Facing-content classes used by the protocol analysis.
enum class FacingClass : std::uint8_t { Nothing = 0, Wall = 1, Object = 2, Door = 3 };

inline FacingClass facing_class(const EnvState& s) {
  switch (s.front_cell().type) {
    case Cell::Type::Floor: return FacingClass::Nothing;
    case Cell::Type::Wall: return FacingClass::Wall;
    case Cell::Type::Object: return FacingClass::Object;
    case Cell::Type::Door: return FacingClass::Door;
  }
  return FacingClass::Nothing;
}

// ---------------------------------------------------------------------------
// Shortest path oracle
// ---------------------------------------------------------------------------

namespace detail {

inline std::string state_key(const EnvState& s) {
  std::string key;
  key.reserve(s.grid.size() + 8);
  key.push_back(static_cast<char>(s.agent_pos.x));
  key.push_back(static_cast<char>(s.agent_pos.y));
  key.push_back(static_cast<char>(s.agent_dir));
  key.push_back(s.carrying ? static_cast<char>(1 + static_cast<int>(s.carrying->kind) * 8 +
                                                static_cast<int>(s.carrying->color))
                           : '\0');
  for (const auto& c : s.grid) {
    auto code = encode_cell(c);
    key.push_back(static_cast<char>(code[0] * 32 + code[1] * 4 + code[2]));
  }
  return key;
}

}  // namespace detail

/// Minimum number of actions that reach success, found by breadth-first search
/// over full states with the dynamics of step(). Ignores the step limit.
inline int shortest_path_steps(const EnvState& start) {
  if (start.facing_goal()) return 0;
  EnvState root = start;
  root.done = false;
  root.step_count = 0;
  root.max_steps = 1 << 30;

  std::unordered_set<std::string> seen{detail::state_key(root)};
  std::deque<std::pair<EnvState, int>> frontier;
  frontier.emplace_back(std::move(root), 0);
  while (!frontier.empty()) {
    auto [state, depth] = std::move(frontier.front());
    frontier.pop_front();
    // Done never changes the state, so it is not expanded.
    for (int a = 0; a < kNumActions - 1; ++a) {
      EnvState next = state;
      StepResult r = step(next, static_cast<Action>(a));
      if (r.done) return depth + 1;
      if (seen.insert(detail::state_key(next)).second) frontier.emplace_back(std::move(next), depth + 1);
    }
  }
  throw std::domain_error("state is unsolvable");
}

// ---------------------------------------------------------------------------
// Debug rendering
// ---------------------------------------------------------------------------

inline std::string render_ascii(const EnvState& s) {
  constexpr std::array<char, 4> arrows = {'>', 'v', '<', '^'};
  std::string out;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      Position p{x, y};
      const Cell& c = s.at(p);
      if (p == s.agent_pos) {
        out.push_back(arrows[static_cast<int>(s.agent_dir)]);
        continue;
      }
      switch (c.type) {
        case Cell::Type::Floor: out.push_back('.'); break;
        case Cell::Type::Wall: out.push_back('#'); break;
        case Cell::Type::Door: out.push_back(c.locked ? 'L' : (c.open ? '/' : 'D')); break;
        case Cell::Type::Object: out.push_back("KOB"[static_cast<int>(c.kind)]); break;
      }
    }
    out.push_back('\n');
  }
  return out;
}

}  // namespace srcomm
