// Discrete message channel between sender and receiver.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace srcomm {

struct ChannelConfig {
  int interval_n = 1;  // communication interval
  int length_k = 8;  // symbols per message
  int vocab_size = 8;  // |V|

  void validate() const {
    if (interval_n < 1) throw std::invalid_argument("communication interval must be >= 1");
    if (length_k < 1) throw std::invalid_argument("message length must be >= 1");
    if (vocab_size < 1) throw std::invalid_argument("vocabulary size must be >= 1");
  }
  /// |M| = |V|^k as a real number (may exceed integer range).
  double message_space_size() const { return std::pow(static_cast<double>(vocab_size), length_k); }
  friend bool operator==(const ChannelConfig&, const ChannelConfig&) = default;
};

struct Message {
  std::vector<int> symbols;

  bool valid_for(const ChannelConfig& c) const {
    if (static_cast<int>(symbols.size()) != c.length_k) return false;
    for (int s : symbols)
      if (s < 0 || s >= c.vocab_size) return false;
    return true;
  }
  friend bool operator==(const Message&, const Message&) = default;
  friend auto operator<=>(const Message&, const Message&) = default;
};

/// Emission schedule: the sender speaks at t = 0, n, 2n, ...
inline constexpr bool should_emit(int t, const ChannelConfig& c) { return t % c.interval_n == 0; }

/// Number of emissions in an episode of the given length.
inline constexpr int emissions_in_episode(int length, int interval_n) {
  return (length + interval_n - 1) / interval_n;
}

/// Single-slot buffer; each emission overwrites the previous message.
class MessageBuffer {
 public:
  void write(Message m) { latest_ = std::move(m); }
  void clear() { latest_.reset(); }
  const std::optional<Message>& latest() const { return latest_; }
  bool empty() const { return !latest_.has_value(); }

 private:
  std::optional<Message> latest_;
};

/// Letters a..z for ids below 26, otherwise dot-separated decimal ids.
inline std::string render_message(const Message& m) {
  bool letters = true;
  for (int s : m.symbols) letters = letters && s >= 0 && s < 26;
  std::string out;
  if (letters) {
    for (int s : m.symbols) out.push_back(static_cast<char>('a' + s));
    return out;
  }
  for (std::size_t i = 0; i < m.symbols.size(); ++i) {
    if (i) out.push_back('.');
    out += std::to_string(m.symbols[i]);
  }
  return out;
}

inline Message parse_message(std::string_view text) {
  Message m;
  if (text.find('.') != std::string_view::npos || (!text.empty() && text[0] >= '0' && text[0] <= '9')) {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('.', start);
      if (end == std::string_view::npos) end = text.size();
      std::string part(text.substr(start, end - start));
      if (part.empty()) throw std::invalid_argument("malformed message: " + std::string(text));
      std::size_t used = 0;
      int v = std::stoi(part, &used);
      if (used != part.size() || v < 0) throw std::invalid_argument("malformed message: " + std::string(text));
      m.symbols.push_back(v);
      start = end + 1;
    }
    return m;
  }
  for (char ch : text) {
    if (ch < 'a' || ch > 'z') throw std::invalid_argument("malformed message: " + std::string(text));
    m.symbols.push_back(ch - 'a');
  }
  return m;
}

}  // namespace srcomm
