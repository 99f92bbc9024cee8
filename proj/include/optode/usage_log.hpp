#pragma once

#include <mutex>
#include <string>
#include <vector>

namespace optode::eval {

enum class Role { train, val, test };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::train: return "train";
        case Role::val: return "val";
        case Role::test: return "test";
    }
    return "?";
}

/// Append-only record of every (day, frame, role) an experiment touches.
/// The leakage guard audits it after the run.
class UsageLog {
public:
    struct Entry {
        long sequence;
        int day;
        int frame;
        Role role;
    };

    void record(int day, int frame, Role role) {
        std::lock_guard<std::mutex> lock(mu_);
        entries_.push_back({static_cast<long>(entries_.size()), day, frame, role});
    }

    std::vector<Entry> entries() const {
        std::lock_guard<std::mutex> lock(mu_);
        return entries_;
    }

    void save(const std::string& path) const;

private:
    mutable std::mutex mu_;
    std::vector<Entry> entries_;
};

}  // namespace optode::eval
