#pragma once

// Detached targets (assignments, IoU-valued class targets, relation maps)
// can be recorded during one loss evaluation and replayed verbatim in later
// ones, which turns the loss into a fixed function of the parameters. The
// end-to-end gradient checks rely on this.

#include <functional>
#include <utility>
#include <vector>

#include "pfdetr/tensor.hpp"

namespace pfdetr {

/// (ground-truth index, prediction index) pairs.
struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;

    std::size_t size() const { return pairs.size(); }
};

class TargetCache {
public:
    /// Starts a new evaluation; replays if anything has been recorded.
    void rewind() {
        tensor_cursor_ = assignment_cursor_ = 0;
        replay_ = !tensors_.empty() || !assignments_.empty();
    }

    Tensor tensor(const std::function<Tensor()>& make) {
        if (!replay_) return tensors_.emplace_back(make());
        return tensors_.at(tensor_cursor_++);
    }

    Assignment assignment(const std::function<Assignment()>& make) {
        if (!replay_) return assignments_.emplace_back(make());
        return assignments_.at(assignment_cursor_++);
    }

    bool replaying() const { return replay_; }

private:
    std::vector<Tensor> tensors_;
    std::vector<Assignment> assignments_;
    std::size_t tensor_cursor_ = 0;
    std::size_t assignment_cursor_ = 0;
    bool replay_ = false;
};

/// Calls `make` directly when no cache is given.
inline Tensor cached(TargetCache* cache, const std::function<Tensor()>& make) {
    return cache ? cache->tensor(make) : make();
}

inline Assignment cached(TargetCache* cache, const std::function<Assignment()>& make) {
    return cache ? cache->assignment(make) : make();
}

}  // namespace pfdetr
