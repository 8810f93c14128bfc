#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace qdiff::kernels {

// Static activation-buffer reuse: every intermediate tensor of one forward
// pass declares its size and live interval, and the planner maps tensors onto
// a small set of preallocated arenas. Greedy sweep in first-use order; an
// arena is reusable once the interval it last held has ended.

struct BufferRequest {
    int64_t size = 0;   // elements
    int first_use = 0;  // inclusive
    int last_use = 0;   // inclusive
};

struct BufferPlan {
    std::vector<int> arena_of;       // per request
    std::vector<int64_t> arena_size; // per arena, elements

    int64_t total_elements() const {
        return std::accumulate(arena_size.begin(), arena_size.end(), int64_t{0});
    }
};

inline BufferPlan buffer_plan(const std::vector<BufferRequest>& reqs) {
    for (const auto& r : reqs) {
        if (r.size < 1 || r.last_use < r.first_use) throw std::invalid_argument("buffer_plan: malformed request");
    }
    std::vector<size_t> order(reqs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (reqs[a].first_use != reqs[b].first_use) return reqs[a].first_use < reqs[b].first_use;
        return reqs[a].size > reqs[b].size;
    });

    BufferPlan plan;
    plan.arena_of.assign(reqs.size(), -1);
    std::vector<int> arena_free_at;  // first step at which the arena is free again

    for (size_t idx : order) {
        const auto& r = reqs[idx];
        int best = -1;
        int64_t best_cost = 0;
        for (size_t a = 0; a < arena_free_at.size(); ++a) {
            if (arena_free_at[a] > r.first_use) continue;
            // Prefer the arena whose size is closest to the request.
            int64_t cost = std::max(plan.arena_size[a], r.size) - std::min(plan.arena_size[a], r.size);
            if (best < 0 || cost < best_cost) {
                best = static_cast<int>(a);
                best_cost = cost;
            }
        }
        if (best < 0) {
            best = static_cast<int>(plan.arena_size.size());
            plan.arena_size.push_back(r.size);
            arena_free_at.push_back(r.last_use + 1);
        } else {
            plan.arena_size[static_cast<size_t>(best)] = std::max(plan.arena_size[static_cast<size_t>(best)], r.size);
            arena_free_at[static_cast<size_t>(best)] = r.last_use + 1;
        }
        plan.arena_of[idx] = best;
    }
    return plan;
}

// Workspace used by the inference engine. The first forward pass traces
// acquire/release order and sizes; finalize() turns the trace into a plan;
// subsequent passes replay the same order out of the preallocated arenas.
// Interval units are acquisition indices: a buffer released after the k-th
// acquire was live through step k-1.
class Workspace {
public:
    float* acquire(int64_t elements) {
        if (replay_) {
            if (cursor_ >= requests_.size() || requests_[cursor_].size != elements) {
                throw std::logic_error("workspace: acquisition order diverged from trace");
            }
            float* p = arenas_[static_cast<size_t>(plan_.arena_of[cursor_])].data();
            live_[p] = cursor_;
            ++cursor_;
            ++step_;
            return p;
        }
        requests_.push_back({elements, step_, kOpenEnd});
        owned_.emplace_back(static_cast<size_t>(elements));
        float* p = owned_.back().data();
        live_[p] = requests_.size() - 1;
        ++step_;
        return p;
    }

    void release(const float* p) {
        auto it = live_.find(p);
        if (it == live_.end()) return;
        if (!replay_) requests_[it->second].last_use = step_ - 1;
        live_.erase(it);
    }

    void begin_pass() {
        step_ = 0;
        cursor_ = 0;
        live_.clear();
        if (!replay_) {
            requests_.clear();
            owned_.clear();
        }
    }

    // Builds the plan from the last traced pass and switches to replay mode.
    void finalize() {
        if (replay_) return;
        for (auto& r : requests_) {
            if (r.last_use == kOpenEnd) r.last_use = step_ - 1;  // never released: live to pass end
        }
        plan_ = buffer_plan(requests_);
        arenas_.clear();
        for (int64_t sz : plan_.arena_size) arenas_.emplace_back(static_cast<size_t>(sz));
        owned_.clear();
        replay_ = true;
    }

    bool replay() const { return replay_; }
    const std::vector<BufferRequest>& trace() const { return requests_; }
    const BufferPlan& plan() const { return plan_; }

private:
    static constexpr int kOpenEnd = std::numeric_limits<int>::max();
    bool replay_ = false;
    int step_ = 0;
    size_t cursor_ = 0;
    std::vector<BufferRequest> requests_;
    std::vector<std::vector<float>> owned_;
    std::vector<std::vector<float>> arenas_;
    BufferPlan plan_;
    std::unordered_map<const float*, size_t> live_;
};

}  // namespace qdiff::kernels
