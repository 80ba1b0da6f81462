// Semantic analysis of trained protocols: deterministic evaluation rollouts,
// action/message probability tables and goal-position heatmaps.
#pragma once

#include "srcomm/channel.hpp"
#include "srcomm/checkpoint.hpp"
#include "srcomm/gridworld.hpp"
#include "srcomm/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace srcomm {

/// One receiver frame of an evaluation rollout.
struct EvalRecord {
  int episode = 0;
  int step = 0;
  std::optional<Message> message;  // buffer content when the receiver acted
  bool emission = false;  // the sender spoke at this step
  int action = 0;
  double reward = 0.0;
  bool done = false;
  Position pos;
  Direction dir = Direction::East;
  std::optional<Position> goal;
  FacingClass facing = FacingClass::Nothing;
  int width = 0;
  int height = 0;
  std::uint64_t receiver_obs_hash = 0;
  std::uint64_t sender_obs_hash = 0;
};

/// FNV-1a over the cell codes.
template <typename Cells>
std::uint64_t hash_cells(const Cells& cells) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& c : cells)
    for (auto b : c) {
      h ^= static_cast<std::uint64_t>(b);
      h *= 1099511628211ull;
    }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline json to_json(const EvalRecord& r) {
  json j = {{"episode", r.episode},
            {"step", r.step},
            {"message", r.message ? json(render_message(*r.message)) : json(nullptr)},
            {"emission", r.emission},
            {"action", r.action},
            {"reward", r.reward},
            {"done", r.done},
            {"pos", {r.pos.x, r.pos.y}},
            {"dir", static_cast<int>(r.dir)},
            {"goal", r.goal ? json({r.goal->x, r.goal->y}) : json(nullptr)},
            {"facing", static_cast<int>(r.facing)},
            {"width", r.width},
            {"height", r.height},
            {"receiver_obs_hash", hex64(r.receiver_obs_hash)},
            {"sender_obs_hash", hex64(r.sender_obs_hash)}};
  return j;
}

inline EvalRecord eval_record_from_json(const json& j) {
  EvalRecord r;
  r.episode = j.at("episode").get<int>();
  r.step = j.at("step").get<int>();
  if (!j.at("message").is_null()) r.message = parse_message(j.at("message").get<std::string>());
  r.emission = j.at("emission").get<bool>();
  r.action = j.at("action").get<int>();
  r.reward = j.value("reward", 0.0);
  r.done = j.value("done", false);
  r.pos = {j.at("pos")[0].get<int>(), j.at("pos")[1].get<int>()};
  r.dir = static_cast<Direction>(j.at("dir").get<int>());
  if (!j.at("goal").is_null()) r.goal = Position{j.at("goal")[0].get<int>(), j.at("goal")[1].get<int>()};
  r.facing = static_cast<FacingClass>(j.at("facing").get<int>());
  r.width = j.at("width").get<int>();
  r.height = j.at("height").get<int>();
  if (j.contains("receiver_obs_hash"))
    r.receiver_obs_hash = std::stoull(j.at("receiver_obs_hash").get<std::string>(), nullptr, 16);
  if (j.contains("sender_obs_hash"))
    r.sender_obs_hash = std::stoull(j.at("sender_obs_hash").get<std::string>(), nullptr, 16);
  if (r.action < 0 || r.action >= kNumActions) throw std::invalid_argument("record action out of range");
  return r;
}

inline void write_records(std::ostream& out, const std::vector<EvalRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<EvalRecord> read_records(std::istream& in) {
  std::vector<EvalRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(eval_record_from_json(json::parse(line)));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Rolls out `episodes` episodes one at a time. Messages are the per-symbol
/// arg max of the sender; receiver actions are sampled from its policy.
template <typename T>
std::vector<EvalRecord> evaluate_deterministic(const SenderModel<T>* sender, const ReceiverModel<T>& receiver,
                                               const EnvConfig& env, const ChannelConfig& channel, int episodes,
                                               std::uint64_t seed) {
  if (episodes < 0) throw std::invalid_argument("episode count must be non-negative");
  const BaselineMode mode = receiver.mode();
  if (mode == BaselineMode::Communicating && sender == nullptr)
    throw std::invalid_argument("communicating evaluation needs a sender");
  const ModelConfig& mc = receiver.config();
  if (mc.sender_side != sender_side_for(env.family))
    throw std::invalid_argument("checkpoint was trained on a differently sized environment");
  std::mt19937_64 rng(seed);
  std::vector<EvalRecord> out;
  for (int ep = 0; ep < episodes; ++ep) {
    EnvState state = reset(env, rng);
    AgentMemory<T> rmem = AgentMemory<T>::zeros(1, mc.memory_dim);
    AgentMemory<T> smem = AgentMemory<T>::zeros(1, mc.memory_dim);
    MessageBuffer buffer;
    for (int t = 0; !state.done; ++t) {
      EvalRecord rec;
      rec.episode = ep;
      rec.step = t;
      rec.pos = state.agent_pos;
      rec.dir = state.agent_dir;
      rec.goal = state.goal_position();
      rec.facing = facing_class(state);
      rec.width = state.width;
      rec.height = state.height;
      const ReceiverObs robs = receiver_observation(state);
      const SenderObs sobs = sender_observation(state);
      rec.receiver_obs_hash = hash_cells(robs.cells);
      rec.sender_obs_hash = hash_cells(sobs.cells);
      if (mode == BaselineMode::Communicating && should_emit(t, channel)) {
        Tape<T> tape(false);
        auto s = sender->forward(tape, encode_sender_obs<T>(std::vector<SenderObs>{sobs}, mc.sender_side),
                                 smem.on(tape), false);
        buffer.write(argmax_message(values_of(s.symbol_log_probs), 0));
        smem = AgentMemory<T>::from(s.memory);
        rec.emission = true;
      }
      Tape<T> tape(false);
      Var<T> instr = receiver.encode_instruction(tape, encode_instructions<T>(std::vector<Instruction>{state.goal}));
      Var<T> msg;
      if (mode == BaselineMode::ArchimedeanReceiver) {
        msg = receiver.encode_world(tape, encode_sender_obs<T>(std::vector<SenderObs>{sobs}, mc.sender_side), false);
      } else {
        const Message* m = mode == BaselineMode::Communicating && buffer.latest() ? &*buffer.latest() : nullptr;
        msg = receiver.encode_message(tape, encode_messages<T>(std::vector<const Message*>{m}, mc.channel));
      }
      auto r = receiver.forward(tape, encode_receiver_obs<T>(std::vector<ReceiverObs>{robs}), instr, msg,
                                rmem.on(tape), false);
      rmem = AgentMemory<T>::from(r.memory);
      rec.message = buffer.latest();
      rec.action = sample_categorical(r.log_probs.value().row(0), rng);
      StepResult res = step(state, static_cast<Action>(rec.action));
      rec.reward = res.reward;
      rec.done = res.done;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Action / message tables
// ---------------------------------------------------------------------------

enum class ActionScope : std::uint8_t { FirstAction, AllActions };

/// Condition rows of a conditioned table. Objects and doors are rolled up
/// into "other".
enum class Condition : std::uint8_t { Anything, Nothing, Wall, Other };

inline std::string_view condition_name(Condition c) {
  switch (c) {
    case Condition::Anything: return "anything";
    case Condition::Nothing: return "nothing";
    case Condition::Wall: return "wall";
    case Condition::Other: return "other";
  }
  return "?";
}

inline Condition condition_of(FacingClass f) {
  switch (f) {
    case FacingClass::Nothing: return Condition::Nothing;
    case FacingClass::Wall: return Condition::Wall;
    default: return Condition::Other;
  }
}

struct ConditionRow {
  Condition condition = Condition::Anything;
  long long count = 0;
  std::array<double, kNumActions> p_action{};  // P(a | m, c)
  double share = 0.0;  // fraction of all attributed frames with this message and condition
};

struct MessageStats {
  Message message;
  long long count = 0;
  double p_message = 0.0;  // P(m)
  std::vector<ConditionRow> rows;  // rows[0] is "anything"
};

struct ActionMessageTable {
  ActionScope scope = ActionScope::FirstAction;
  bool conditioned = false;
  long long total = 0;  // attributed frames
  std::vector<MessageStats> messages;  // descending P(m), ties by message order
};

/// Frames attributed to the message in the buffer: only the emission frame in
/// first-action scope, every frame until the next emission otherwise.
inline ActionMessageTable action_message_table(const std::vector<EvalRecord>& records, ActionScope scope,
                                               bool condition_on_facing) {
  if (records.empty()) throw std::invalid_argument("no records to analyze");
  struct Counts {
    std::array<std::array<long long, kNumActions>, 4> by_condition{};
    std::array<long long, 4> total{};
  };
  std::map<Message, Counts> counts;
  long long total = 0;
  for (const auto& r : records) {
    if (!r.message) continue;
    if (scope == ActionScope::FirstAction && !r.emission) continue;
    auto& c = counts[*r.message];
    const auto cond = static_cast<std::size_t>(condition_of(r.facing));
    const auto a = static_cast<std::size_t>(r.action);
    ++c.by_condition[0][a];
    ++c.total[0];
    ++c.by_condition[cond][a];
    ++c.total[cond];
    ++total;
  }
  if (total == 0) throw std::invalid_argument("records contain no messages to analyze");
  ActionMessageTable table;
  table.scope = scope;
  table.conditioned = condition_on_facing;
  table.total = total;
  const auto denom = static_cast<double>(total);
  for (const auto& [m, c] : counts) {
    MessageStats s;
    s.message = m;
    s.count = c.total[0];
    s.p_message = static_cast<double>(c.total[0]) / denom;
    const std::size_t rows = condition_on_facing ? 4 : 1;
    for (std::size_t k = 0; k < rows; ++k) {
      ConditionRow row;
      row.condition = static_cast<Condition>(k);
      row.count = c.total[k];
      row.share = static_cast<double>(c.total[k]) / denom;
      if (c.total[k] > 0)
        for (std::size_t a = 0; a < kNumActions; ++a)
          row.p_action[a] = static_cast<double>(c.by_condition[k][a]) / static_cast<double>(c.total[k]);
      s.rows.push_back(row);
    }
    table.messages.push_back(std::move(s));
  }
  std::stable_sort(table.messages.begin(), table.messages.end(),
                   [](const MessageStats& a, const MessageStats& b) { return a.count > b.count; });
  return table;
}

/// Messages of rank [first, first + count) in the table's order.
inline ActionMessageTable select_ranks(const ActionMessageTable& t, std::size_t first, std::size_t count) {
  ActionMessageTable out = t;
  out.messages.clear();
  for (std::size_t i = first; i < t.messages.size() && i < first + count; ++i) out.messages.push_back(t.messages[i]);
  return out;
}

namespace detail {

/// Actions with non-zero probability in any of the given rows.
inline std::vector<int> active_actions(const std::vector<const ConditionRow*>& rows) {
  std::vector<int> out;
  for (int a = 0; a < kNumActions; ++a)
    for (const auto* r : rows)
      if (r->p_action[static_cast<std::size_t>(a)] > 0) {
        out.push_back(a);
        break;
      }
  return out;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string percent(double v) { return fixed(100.0 * v, 2) + " %"; }

inline std::vector<const ConditionRow*> reported_rows(const MessageStats& m) {
  std::vector<const ConditionRow*> out;
  for (const auto& r : m.rows)
    if (r.condition != Condition::Other || r.count > 0) out.push_back(&r);
  return out;
}

inline std::string pad(const std::string& s, std::size_t w, bool left = false) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

inline std::string grid_text(const std::vector<std::vector<std::string>>& cells) {
  std::vector<std::size_t> width;
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], row[i].size());
    }
  std::ostringstream o;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) o << (i ? "  " : "") << pad(row[i], width[i], i == 0);
    o << '\n';
  }
  return o.str();
}

}  // namespace detail

/// Plain-text rendering. Unconditioned tables list one message per row with
/// P(a|m) and P(m) columns plus a total row; conditioned tables put each
/// message in a column block with one row per condition.
inline std::string render_table_text(const ActionMessageTable& t) {
  using namespace detail;
  std::vector<std::vector<std::string>> cells;
  if (!t.conditioned) {
    std::vector<const ConditionRow*> rows;
    for (const auto& m : t.messages) rows.push_back(&m.rows[0]);
    const auto actions = active_actions(rows);
    std::vector<std::string> head{"m"};
    for (int a : actions) head.push_back("P(a" + std::to_string(a) + "|m)");
    head.push_back("P(m)");
    cells.push_back(head);
    double total = 0.0;
    for (const auto& m : t.messages) {
      std::vector<std::string> row{render_message(m.message)};
      for (int a : actions) row.push_back(fixed(m.rows[0].p_action[static_cast<std::size_t>(a)], 2));
      row.push_back(percent(m.p_message));
      total += m.p_message;
      cells.push_back(row);
    }
    return grid_text(cells) + "total: " + percent(total) + "\n";
  }
  std::vector<std::vector<int>> actions;
  std::vector<std::string> head{"c"};
  for (std::size_t i = 0; i < t.messages.size(); ++i) {
    actions.push_back(active_actions(reported_rows(t.messages[i])));
    const std::string mi = "m" + std::to_string(i);
    for (int a : actions.back()) head.push_back("P(a" + std::to_string(a) + "|" + mi + ",c)");
    head.push_back("P(" + mi + "|c)");
  }
  cells.push_back(head);
  for (Condition c : {Condition::Anything, Condition::Nothing, Condition::Wall, Condition::Other}) {
    bool any = false;
    for (const auto& m : t.messages)
      for (const auto* r : reported_rows(m)) any = any || r->condition == c;
    if (!any) continue;
    std::vector<std::string> row{std::string(condition_name(c))};
    for (std::size_t i = 0; i < t.messages.size(); ++i) {
      const ConditionRow& r = t.messages[i].rows[static_cast<std::size_t>(c)];
      for (int a : actions[i]) row.push_back(fixed(r.p_action[static_cast<std::size_t>(a)], 2));
      row.push_back(percent(r.share));
    }
    cells.push_back(row);
  }
  std::ostringstream legend;
  for (std::size_t i = 0; i < t.messages.size(); ++i)
    legend << "m" << i << " = " << render_message(t.messages[i].message) << '\n';
  return legend.str() + grid_text(cells);
}

/// Long-format CSV: one line per (message, condition, action).
inline std::string render_table_csv(const ActionMessageTable& t) {
  std::ostringstream o;
  o.precision(17);
  o << "rank,message,condition,action,p_action,p_message,share,count\n";
  for (std::size_t i = 0; i < t.messages.size(); ++i) {
    const auto& m = t.messages[i];
    for (const auto& r : m.rows)
      for (int a = 0; a < kNumActions; ++a)
        o << i << ',' << render_message(m.message) << ',' << condition_name(r.condition) << ',' << a << ','
          << r.p_action[static_cast<std::size_t>(a)] << ',' << m.p_message << ',' << r.share << ',' << r.count
          << '\n';
  }
  return o.str();
}

/// LaTeX tabular with the same column structure as the text rendering; the
/// largest probability of each row block is set in bold.
inline std::string render_table_latex(const ActionMessageTable& t) {
  using namespace detail;
  std::ostringstream o;
  auto bold_if = [](double v, double best) {
    const std::string s = fixed(v, 2);
    return v > 0 && v >= best - 1e-12 ? "\\textbf{" + s + "}" : s;
  };
  if (!t.conditioned) {
    std::vector<const ConditionRow*> rows;
    for (const auto& m : t.messages) rows.push_back(&m.rows[0]);
    const auto actions = active_actions(rows);
    o << "\\begin{tabular}{l " << std::string(actions.size() * 2, ' ') << "r}\n";
    o << "  $m$";
    for (int a : actions) o << " & $P(a_" << a << " | m)$";
    o << " & $P(m)$ \\\\\n  \\hline\n";
    double total = 0.0;
    for (const auto& m : t.messages) {
      double best = 0.0;
      for (int a : actions) best = std::max(best, m.rows[0].p_action[static_cast<std::size_t>(a)]);
      o << "  \\texttt{" << render_message(m.message) << "}";
      for (int a : actions) o << " & " << bold_if(m.rows[0].p_action[static_cast<std::size_t>(a)], best);
      o << " & " << fixed(100 * m.p_message, 2) << "~\\% \\\\\n";
      total += m.p_message;
    }
    o << "  \\hline\n  \\multicolumn{" << actions.size() + 2 << "}{r}{total: " << fixed(100 * total, 2)
      << "~\\%}\n\\end{tabular}\n";
    return o.str();
  }
  std::vector<std::vector<int>> actions;
  for (const auto& m : t.messages) actions.push_back(active_actions(reported_rows(m)));
  o << "\\begin{tabular}{l";
  for (const auto& a : actions) o << " " << std::string(a.size(), 'c') << "r";
  o << "}\n  $c$";
  for (std::size_t i = 0; i < t.messages.size(); ++i) {
    for (int a : actions[i]) o << " & $P(a_" << a << " | m_" << i << ", c)$";
    o << " & $P(m_" << i << " | c)$";
  }
  o << " \\\\\n  \\hline\n";
  for (Condition c : {Condition::Anything, Condition::Nothing, Condition::Wall, Condition::Other}) {
    bool any = false;
    for (const auto& m : t.messages)
      for (const auto* r : reported_rows(m)) any = any || r->condition == c;
    if (!any) continue;
    o << "  " << condition_name(c);
    for (std::size_t i = 0; i < t.messages.size(); ++i) {
      const ConditionRow& r = t.messages[i].rows[static_cast<std::size_t>(c)];
      double best = 0.0;
      for (int a : actions[i]) best = std::max(best, r.p_action[static_cast<std::size_t>(a)]);
      for (int a : actions[i]) o << " & " << bold_if(r.p_action[static_cast<std::size_t>(a)], best);
      o << " & " << fixed(100 * r.share, 2) << "~\\%";
    }
    o << " \\\\\n";
  }
  o << "  \\hline\n\\end{tabular}\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

enum class HeatmapFrame : std::uint8_t { Egocentric, OrientationRelative };

inline std::string_view frame_name(HeatmapFrame f) {
  return f == HeatmapFrame::Egocentric ? "egocentric" : "orientation_relative";
}

struct MessageHeatmap {
  Message message;
  long long count = 0;
  double p_message = 0.0;
  std::vector<std::vector<double>> grid;  // grid[y][x] = P(b | m)
};

struct Heatmaps {
  HeatmapFrame frame = HeatmapFrame::Egocentric;
  int width = 0;
  int height = 0;
  std::optional<Position> receiver;  // marker cell; the receiver faces up
  std::vector<MessageHeatmap> messages;  // descending count
};

/// Cell of the goal in the chosen frame, with the receiver facing up (North).
/// Egocentric: translated to the receiver, grid of (2W-1) x (2H-1) centered on
/// it. Orientation-relative: the world grid rotated about its center.
inline Position heatmap_cell(const EvalRecord& r, HeatmapFrame frame) {
  static constexpr int fx[4] = {1, 0, -1, 0}, fy[4] = {0, 1, 0, -1};
  const int d = static_cast<int>(r.dir);
  const int f_x = fx[d], f_y = fy[d];
  const int r_x = -f_y, r_y = f_x;  // right-hand vector
  if (frame == HeatmapFrame::Egocentric) {
    const int dx = r.goal->x - r.pos.x, dy = r.goal->y - r.pos.y;
    const int ahead = dx * f_x + dy * f_y, right = dx * r_x + dy * r_y;
    return {r.width - 1 + right, r.height - 1 - ahead};
  }
  if (r.width != r.height) throw std::invalid_argument("orientation-relative heatmaps need a square grid");
  // Doubled coordinates keep the center integral.
  const int vx = 2 * r.goal->x - (r.width - 1), vy = 2 * r.goal->y - (r.height - 1);
  const int ahead = vx * f_x + vy * f_y, right = vx * r_x + vy * r_y;
  return {(right + r.width - 1) / 2, (r.height - 1 - ahead) / 2};
}

/// P(b | m) over emission frames that have a goal.
inline Heatmaps goal_heatmap(const std::vector<EvalRecord>& records, HeatmapFrame frame) {
  if (records.empty()) throw std::invalid_argument("no records to analyze");
  Heatmaps h;
  h.frame = frame;
  std::map<Message, std::vector<std::vector<long long>>> counts;
  std::map<Message, long long> totals;
  long long all = 0;
  for (const auto& r : records) {
    if (!r.emission || !r.message || !r.goal) continue;
    const int w = frame == HeatmapFrame::Egocentric ? 2 * r.width - 1 : r.width;
    const int ht = frame == HeatmapFrame::Egocentric ? 2 * r.height - 1 : r.height;
    if (h.width == 0) {
      h.width = w;
      h.height = ht;
    } else if (h.width != w || h.height != ht) {
      throw std::invalid_argument("records mix grid sizes");
    }
    auto& grid = counts[*r.message];
    if (grid.empty()) grid.assign(static_cast<std::size_t>(ht), std::vector<long long>(static_cast<std::size_t>(w), 0));
    const Position p = heatmap_cell(r, frame);
    ++grid[static_cast<std::size_t>(p.y)][static_cast<std::size_t>(p.x)];
    ++totals[*r.message];
    ++all;
  }
  if (all == 0) throw std::invalid_argument("records contain no emissions with a goal");
  if (frame == HeatmapFrame::Egocentric) h.receiver = Position{(h.width - 1) / 2, (h.height - 1) / 2};
  for (const auto& [m, grid] : counts) {
    MessageHeatmap mh;
    mh.message = m;
    mh.count = totals[m];
    mh.p_message = static_cast<double>(mh.count) / static_cast<double>(all);
    for (const auto& row : grid) {
      std::vector<double> out;
      for (long long c : row) out.push_back(static_cast<double>(c) / static_cast<double>(mh.count));
      mh.grid.push_back(std::move(out));
    }
    h.messages.push_back(std::move(mh));
  }
  std::stable_sort(h.messages.begin(), h.messages.end(),
                   [](const MessageHeatmap& a, const MessageHeatmap& b) { return a.count > b.count; });
  return h;
}

inline json to_json(const Heatmaps& h) {
  json msgs = json::array();
  for (const auto& m : h.messages)
    msgs.push_back({{"message", render_message(m.message)},
                    {"count", m.count},
                    {"p_message", m.p_message},
                    {"grid", m.grid}});
  json j = {{"frame", std::string(frame_name(h.frame))},
            {"width", h.width},
            {"height", h.height},
            {"messages", std::move(msgs)}};
  j["receiver"] = h.receiver ? json({h.receiver->x, h.receiver->y}) : json(nullptr);
  return j;
}

/// One panel per message (at most `max_panels`), white to dark red by P(b|m).
inline std::string render_heatmaps_svg(const Heatmaps& h, std::size_t max_panels = 6) {
  const int cell = 24, gap = 20, title = 22;
  const std::size_t n = std::min(max_panels, h.messages.size());
  const int pw = h.width * cell, ph = h.height * cell;
  const int W = static_cast<int>(n) * (pw + gap) + gap, H = ph + title + 2 * gap;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"monospace\""
    << " font-size=\"13\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = h.messages[i];
    const int ox = gap + static_cast<int>(i) * (pw + gap), oy = gap + title;
    double peak = 0.0;
    for (const auto& row : m.grid)
      for (double v : row) peak = std::max(peak, v);
    o << "<text x=\"" << ox << "\" y=\"" << oy - 8 << "\">" << render_message(m.message) << " ("
      << detail::fixed(100 * m.p_message, 2) << "%)</text>\n";
    for (int y = 0; y < h.height; ++y)
      for (int x = 0; x < h.width; ++x) {
        const double v = m.grid[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
        const double s = peak > 0 ? v / peak : 0.0;
        const int g = static_cast<int>(255 * (1 - s));
        o << "<rect x=\"" << ox + x * cell << "\" y=\"" << oy + y * cell << "\" width=\"" << cell << "\" height=\""
          << cell << "\" fill=\"rgb(255," << g << "," << g << ")\" stroke=\"#ccc\"><title>"
          << detail::fixed(v, 3) << "</title></rect>\n";
      }
    if (h.receiver) {
      const int cx = ox + h.receiver->x * cell, cy = oy + h.receiver->y * cell;
      o << "<polygon points=\"" << cx + cell / 2 << "," << cy + 4 << " " << cx + 4 << "," << cy + cell - 4 << " "
        << cx + cell - 4 << "," << cy + cell - 4 << "\" fill=\"#236\"/>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Turn-left check
// ---------------------------------------------------------------------------

struct AnomalyReport {
  std::size_t messages_checked = 0;
  double max_p_turn_left = 0.0;
  std::vector<Message> flagged;  // P(a0 | m) above the threshold
};

inline AnomalyReport turn_left_anomaly_check(const std::vector<EvalRecord>& records, double threshold = 0.0,
                                             ActionScope scope = ActionScope::FirstAction) {
  AnomalyReport rep;
  bool any = false;
  for (const auto& r : records) any = any || (r.message && (scope == ActionScope::AllActions || r.emission));
  if (!any) return rep;
  const auto table = action_message_table(records, scope, false);
  rep.messages_checked = table.messages.size();
  for (const auto& m : table.messages) {
    const double p = m.rows[0].p_action[static_cast<std::size_t>(Action::TurnLeft)];
    rep.max_p_turn_left = std::max(rep.max_p_turn_left, p);
    if (p > threshold) rep.flagged.push_back(m.message);
  }
  return rep;
}

}  // namespace srcomm
