#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dare/error.hpp"
#include "dare/world.hpp"

namespace dare {

struct BufferEntry {
  PromptId prompt_id = 0;
  Rollout rollout;

  bool operator==(const BufferEntry&) const = default;
};

/// Prompt-keyed FIFO store of rollouts.
///
/// Each prompt keeps at most `k_cap` entries (oldest evicted first). When the
/// total exceeds `capacity`, the oldest entry of the prompt whose newest
/// entry is oldest is evicted. Single writer; readers get copies.
class ReplayBuffer {
 public:
  static constexpr int kSnapshotVersion = 1;

  ReplayBuffer(std::size_t k_cap, std::size_t capacity, std::size_t n_prompts)
      : k_cap_(k_cap), capacity_(capacity), n_prompts_(n_prompts) {
    if (k_cap_ == 0) throw ConfigError("buffer.k_cap", "must be >= 1");
    if (capacity_ == 0) throw ConfigError("buffer.capacity", "must be >= 1");
  }

  void push(BufferEntry entry) {
    if (entry.prompt_id < 0 || static_cast<std::size_t>(entry.prompt_id) >= n_prompts_)
      throw DataError("push for unknown prompt id " + std::to_string(entry.prompt_id));
    const PromptId id = entry.prompt_id;
    auto& q = queues_[id];
    q.push_back(std::move(entry));
    ++size_;
    touch(id);
    if (q.size() > k_cap_) pop_oldest(id);
    while (size_ > capacity_) {
      const PromptId victim = recency_.begin()->second;
      pop_oldest(victim);
    }
  }

  /// Oldest-first copy of a prompt's queue; empty for unknown ids.
  std::vector<BufferEntry> entries(PromptId id) const {
    const auto it = queues_.find(id);
    if (it == queues_.end()) return {};
    return {it->second.begin(), it->second.end()};
  }

  std::size_t queue_size(PromptId id) const {
    const auto it = queues_.find(id);
    return it == queues_.end() ? 0 : it->second.size();
  }

  /// Most recent reward-1 rollout for the prompt, if any.
  std::optional<Rollout> select_hint(PromptId id) const {
    const auto it = queues_.find(id);
    if (it == queues_.end()) return std::nullopt;
    for (auto e = it->second.rbegin(); e != it->second.rend(); ++e)
      if (e->rollout.reward == 1) return e->rollout;
    return std::nullopt;
  }

  std::size_t size() const { return size_; }
  std::size_t k_cap() const { return k_cap_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t n_prompts() const { return n_prompts_; }

  /// Prompt ids with entries, least recently pushed first.
  std::vector<PromptId> prompts_by_recency() const {
    std::vector<PromptId> out;
    out.reserve(recency_.size());
    for (const auto& [tick, id] : recency_) out.push_back(id);
    return out;
  }

  bool operator==(const ReplayBuffer& o) const {
    return k_cap_ == o.k_cap_ && capacity_ == o.capacity_ && size_ == o.size_ && queues_ == o.queues_ &&
           prompts_by_recency() == o.prompts_by_recency();
  }

  nlohmann::json to_json() const {
    nlohmann::json prompts = nlohmann::json::array();
    for (const PromptId id : prompts_by_recency()) {
      nlohmann::json entries = nlohmann::json::array();
      for (const BufferEntry& e : queues_.at(id)) {
        const Rollout& r = e.rollout;
        entries.push_back({{"tokens", r.tokens},
                           {"length", r.length},
                           {"reward", r.reward},
                           {"behavior_logprobs", r.behavior_logprobs},
                           {"behavior_snapshot", r.behavior_snapshot},
                           {"hinted", r.hinted},
                           {"step", r.step}});
      }
      prompts.push_back({{"prompt_id", id}, {"entries", std::move(entries)}});
    }
    return {{"version", kSnapshotVersion}, {"k_cap", k_cap_}, {"c", capacity_}, {"prompts", std::move(prompts)}};
  }

  /// Rebuilds a buffer from a snapshot document. `n_prompts` bounds the
  /// accepted ids; 0 derives it from the largest id in the document.
  static ReplayBuffer from_json(const nlohmann::json& doc, std::size_t n_prompts = 0) {
    using nlohmann::json;
    auto fail = [](const std::string& what) -> IntegrityError { return {IntegrityError::npos, what}; };
    try {
      if (!doc.is_object()) throw fail("snapshot root is not an object");
      if (doc.at("version").get<int>() != kSnapshotVersion) throw fail("unsupported snapshot version");
      const auto k_cap = doc.at("k_cap").get<std::size_t>();
      const auto cap = doc.at("c").get<std::size_t>();
      const json& prompts = doc.at("prompts");
      if (!prompts.is_array()) throw fail("prompts is not an array");
      if (n_prompts == 0) {
        for (const json& p : prompts)
          n_prompts = std::max<std::size_t>(n_prompts, p.at("prompt_id").get<std::size_t>() + 1);
        n_prompts = std::max<std::size_t>(n_prompts, 1);
      }
      std::size_t total = 0;
      for (const json& p : prompts) total += p.at("entries").size();
      if (total > cap) throw fail("snapshot holds " + std::to_string(total) + " entries, capacity is " + std::to_string(cap));
      ReplayBuffer buf(k_cap, cap, n_prompts);
      for (const json& p : prompts) {
        const auto id = p.at("prompt_id").get<PromptId>();
        if (id < 0 || static_cast<std::size_t>(id) >= n_prompts)
          throw fail("prompt id " + std::to_string(id) + " out of range");
        const json& entries = p.at("entries");
        if (entries.size() > k_cap) throw fail("prompt " + std::to_string(id) + " exceeds k_cap");
        std::int64_t last_step = std::numeric_limits<std::int64_t>::min();
        for (const json& e : entries) {
          Rollout r;
          r.tokens = e.at("tokens").get<std::vector<TokenId>>();
          r.length = e.at("length").get<std::size_t>();
          r.reward = e.at("reward").get<int>();
          r.behavior_logprobs = e.at("behavior_logprobs").get<std::vector<double>>();
          r.behavior_snapshot = e.at("behavior_snapshot").get<std::uint64_t>();
          r.hinted = e.at("hinted").get<bool>();
          r.step = e.at("step").get<std::int64_t>();
          if (r.length != r.tokens.size() || r.length != r.behavior_logprobs.size())
            throw fail("entry length mismatch for prompt " + std::to_string(id));
          if (r.reward != 0 && r.reward != 1) throw fail("reward must be 0 or 1");
          if (r.step < last_step) throw fail("entry steps decrease within prompt " + std::to_string(id));
          last_step = r.step;
          buf.push(BufferEntry{id, std::move(r)});
        }
      }
      return buf;
    } catch (const json::exception& e) {
      throw fail(std::string("schema violation: ") + e.what());
    }
  }

  void snapshot(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write snapshot " + path.string());
    out << to_json().dump() << '\n';
    if (!out) throw DataError("write failed for snapshot " + path.string());
  }

  static ReplayBuffer restore(const std::filesystem::path& path, std::size_t n_prompts = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read snapshot " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw IntegrityError(e.byte, e.what());
    }
    return from_json(doc, n_prompts);
  }

 private:
  void touch(PromptId id) {
    if (const auto it = last_tick_.find(id); it != last_tick_.end()) recency_.erase({it->second, id});
    last_tick_[id] = ++tick_;
    recency_.insert({tick_, id});
  }

  void pop_oldest(PromptId id) {
    auto& q = queues_.at(id);
    q.pop_front();
    --size_;
    if (q.empty()) {
      queues_.erase(id);
      recency_.erase({last_tick_.at(id), id});
      last_tick_.erase(id);
    }
  }

  std::size_t k_cap_;
  std::size_t capacity_;
  std::size_t n_prompts_;
  std::size_t size_ = 0;
  std::uint64_t tick_ = 0;
  std::map<PromptId, std::deque<BufferEntry>> queues_;
  std::map<PromptId, std::uint64_t> last_tick_;
  std::set<std::pair<std::uint64_t, PromptId>> recency_;
};

}  // namespace dare
