#include "icrl/grid_env.hpp"

#include <algorithm>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "icrl/serialize.hpp"

namespace icrl {

std::string env_kind_name(EnvKind k) {
    switch (k) {
        case EnvKind::DarkRoom: return "DarkRoom";
        case EnvKind::KeyToDoor: return "KeyToDoor";
        case EnvKind::Janus: return "Janus";
    }
    return "?";
}

EnvKind env_kind_from_name(const std::string& s) {
    if (s == "DarkRoom" || s == "DR") return EnvKind::DarkRoom;
    if (s == "KeyToDoor" || s == "K2D") return EnvKind::KeyToDoor;
    if (s == "Janus") return EnvKind::Janus;
    throw UsageError("unknown environment kind: " + s);
}

void EnvSpec::validate() const {
    auto in_grid = [&](const Cell& c) { return c.x >= 0 && c.x < grid_size && c.y >= 0 && c.y < grid_size; };
    if (grid_size <= 0) throw UsageError("EnvSpec: grid_size must be positive");
    if (episode_len <= 0) throw UsageError("EnvSpec: episode_len must be positive");
    if (kind == EnvKind::KeyToDoor) {
        if (!in_grid(key)) throw UsageError("EnvSpec: key cell out of range");
        if (!in_grid(door)) throw UsageError("EnvSpec: door cell out of range");
        if (key == door) throw UsageError("EnvSpec: key and door must differ");
    } else {
        if (!in_grid(goal)) throw UsageError("EnvSpec: goal cell out of range");
    }
}

EnvSpec default_spec(EnvKind kind, int grid_size) {
    EnvSpec s;
    s.kind = kind;
    s.grid_size = grid_size;
    switch (kind) {
        case EnvKind::DarkRoom:
        case EnvKind::Janus:
            s.episode_len = grid_size <= 9 ? 20 : 100;
            break;
        case EnvKind::KeyToDoor:
            s.episode_len = grid_size <= 9 ? 50 : 100;
            s.door = Cell{1, 0};  // placeholder distinct from key
            break;
    }
    return s;
}

nlohmann::json EnvSpec::to_json() const {
    nlohmann::json j;
    j["kind"] = env_kind_name(kind);
    j["grid_size"] = grid_size;
    j["episode_len"] = episode_len;
    if (kind == EnvKind::KeyToDoor) {
        j["key"] = {key.x, key.y};
        j["door"] = {door.x, door.y};
    } else {
        j["goal"] = {goal.x, goal.y};
    }
    if (kind == EnvKind::Janus) {
        j["dynamics"] = dynamics == Dynamics::Standard ? "Standard" : "Inverted";
        j["deploy_mode"] = deploy_mode == DeployMode::SingleDynamic ? "SingleDynamic" : "SplitGrid";
    }
    return j;
}

EnvSpec EnvSpec::from_json(const nlohmann::json& j) {
    EnvSpec s;
    s.kind = env_kind_from_name(j.at("kind").get<std::string>());
    s.grid_size = j.at("grid_size").get<int>();
    s.episode_len = j.at("episode_len").get<int>();
    auto cell = [](const nlohmann::json& c) { return Cell{c.at(0).get<int>(), c.at(1).get<int>()}; };
    if (s.kind == EnvKind::KeyToDoor) {
        s.key = cell(j.at("key"));
        s.door = cell(j.at("door"));
    } else {
        s.goal = cell(j.at("goal"));
    }
    if (s.kind == EnvKind::Janus) {
        if (j.contains("dynamics"))
            s.dynamics = j.at("dynamics").get<std::string>() == "Inverted" ? Dynamics::Inverted
                                                                           : Dynamics::Standard;
        if (j.contains("deploy_mode"))
            s.deploy_mode = j.at("deploy_mode").get<std::string>() == "SplitGrid" ? DeployMode::SplitGrid
                                                                                  : DeployMode::SingleDynamic;
    }
    s.validate();
    return s;
}

EnvInstance::EnvInstance(EnvSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

void EnvInstance::reset(Rng& rng) {
    if (spec_.kind == EnvKind::KeyToDoor) {
        int idx = (int)rng.uniform_u32((uint32_t)spec_.n_cells());
        pos_ = cell_from_index(idx, spec_.grid_size);
    } else {
        pos_ = Cell{spec_.grid_size / 2, spec_.grid_size / 2};
    }
    has_key_ = false;
    t_ = 0;
    done_ = false;
}

namespace {
// up <-> down, left <-> right; stay unchanged.
int invert_action(int a) {
    switch (a) {
        case 1: return 2;
        case 2: return 1;
        case 3: return 4;
        case 4: return 3;
        default: return a;
    }
}
}  // namespace

StepResult EnvInstance::step(int action) {
    if (done_) throw UsageError("env_step: episode already finished");
    if (action < 0 || action >= kNumActions) throw UsageError("env_step: action out of range");

    int a = action;
    bool inverted = false;
    if (spec_.kind == EnvKind::Janus) {
        if (spec_.deploy_mode == DeployMode::SplitGrid)
            inverted = in_inverted_zone(pos_.x, spec_.grid_size);
        else
            inverted = spec_.dynamics == Dynamics::Inverted;
    }
    if (inverted) a = invert_action(a);

    switch (a) {
        case 1: pos_.y = std::max(0, pos_.y - 1); break;
        case 2: pos_.y = std::min(spec_.grid_size - 1, pos_.y + 1); break;
        case 3: pos_.x = std::max(0, pos_.x - 1); break;
        case 4: pos_.x = std::min(spec_.grid_size - 1, pos_.x + 1); break;
        default: break;
    }

    ++t_;
    StepResult r;
    r.obs = pos_;
    if (spec_.kind == EnvKind::KeyToDoor) {
        if (!has_key_ && pos_ == spec_.key) {
            has_key_ = true;
            r.reward = 1;
        } else if (has_key_ && pos_ == spec_.door) {
            r.reward = 1;
            done_ = true;
        }
    } else {
        if (pos_ == spec_.goal) {
            r.reward = 1;
            done_ = true;
        }
    }
    if (t_ >= spec_.episode_len) done_ = true;
    r.done = done_;
    return r;
}

double expert_return(const EnvSpec& spec) {
    spec.validate();
    return spec.kind == EnvKind::KeyToDoor ? 2.0 : 1.0;
}

namespace {
EnvSpec task_from_goal(EnvKind kind, int grid_size, int goal_idx) {
    EnvSpec s = default_spec(kind, grid_size);
    s.goal = cell_from_index(goal_idx, grid_size);
    return s;
}

// Unordered draw of distinct (key, door) pairs encoded as key*n_cells+door.
EnvSpec task_from_pair(int grid_size, int64_t code) {
    EnvSpec s = default_spec(EnvKind::KeyToDoor, grid_size);
    int n = grid_size * grid_size;
    s.key = cell_from_index((int)(code / n), grid_size);
    s.door = cell_from_index((int)(code % n), grid_size);
    return s;
}
}  // namespace

TaskSplit goal_split(EnvKind kind, int grid_size, int n_train, uint64_t seed) {
    Rng rng(mix64(seed, 0x5E17u));
    TaskSplit out;
    int n = grid_size * grid_size;

    if (kind == EnvKind::DarkRoom || kind == EnvKind::Janus) {
        if (n_train > n) throw UsageError("goal_split: n_train exceeds number of goals");
        // partial Fisher-Yates over goal indices
        std::vector<int> goals(n);
        for (int i = 0; i < n; ++i) goals[(size_t)i] = i;
        for (int i = 0; i < n_train; ++i) {
            int j = i + (int)rng.uniform_u32((uint32_t)(n - i));
            std::swap(goals[(size_t)i], goals[(size_t)j]);
        }
        for (int i = 0; i < n_train; ++i) out.train.push_back(task_from_goal(kind, grid_size, goals[(size_t)i]));
        if (kind == EnvKind::DarkRoom) {
            // test on every excluded goal, in cell order
            std::vector<int> rest(goals.begin() + n_train, goals.end());
            std::sort(rest.begin(), rest.end());
            for (int g : rest) out.test.push_back(task_from_goal(kind, grid_size, g));
        } else {
            int want = std::min(100, n - n_train);
            std::vector<int> rest(goals.begin() + n_train, goals.end());
            for (int i = 0; i < want; ++i) {
                int j = i + (int)rng.uniform_u32((uint32_t)((int)rest.size() - i));
                std::swap(rest[(size_t)i], rest[(size_t)j]);
            }
            for (int i = 0; i < want; ++i) out.test.push_back(task_from_goal(kind, grid_size, rest[(size_t)i]));
        }
        return out;
    }

    // K2D: ordered (key, door) pairs, key != door
    int64_t total = (int64_t)n * (n - 1);
    if (n_train + 100 > total)
        throw UsageError("goal_split: n_train leaves no room for 100 test configurations");
    std::unordered_set<int64_t> used;
    auto draw = [&]() {
        for (;;) {
            int key = (int)rng.uniform_u32((uint32_t)n);
            int door = (int)rng.uniform_u32((uint32_t)n);
            if (key == door) continue;
            int64_t code = (int64_t)key * n + door;
            if (used.insert(code).second) return code;
        }
    };
    for (int i = 0; i < n_train; ++i) out.train.push_back(task_from_pair(grid_size, draw()));
    for (int i = 0; i < 100; ++i) out.test.push_back(task_from_pair(grid_size, draw()));
    return out;
}

}  // namespace icrl
