#pragma once

// Dark Room (MDP), Dark Key-to-Door (POMDP) and the Janus dual-dynamics
// variant as deterministic, seedable step simulators.
//
// Movement convention used throughout the project:
//   action 0 = stay, 1 = up (y-1), 2 = down (y+1), 3 = left (x-1), 4 = right (x+1)
// Moves clamp at grid walls. Observation is the agent position only; in K2D
// the key flag is never observed.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "icrl/rng.hpp"

#include <nlohmann/json_fwd.hpp>

namespace icrl {

constexpr int kNumActions = 5;

enum class EnvKind { DarkRoom, KeyToDoor, Janus };
enum class Dynamics { Standard, Inverted };
enum class DeployMode { SingleDynamic, SplitGrid };

struct Cell {
    int x = 0;
    int y = 0;
    bool operator==(const Cell&) const = default;
};

struct EnvSpec {
    EnvKind kind = EnvKind::DarkRoom;
    int grid_size = 9;
    int episode_len = 20;
    Cell goal{};                                     // DarkRoom / Janus
    Cell key{};                                      // K2D
    Cell door{};                                     // K2D
    Dynamics dynamics = Dynamics::Standard;          // Janus training instances
    DeployMode deploy_mode = DeployMode::SingleDynamic;

    int n_cells() const { return grid_size * grid_size; }
    void validate() const;  // throws UsageError on out-of-range cells

    nlohmann::json to_json() const;
    static EnvSpec from_json(const nlohmann::json& j);
};

// Paper defaults per environment family.
EnvSpec default_spec(EnvKind kind, int grid_size);

std::string env_kind_name(EnvKind k);
EnvKind env_kind_from_name(const std::string& s);

inline int obs_index(const Cell& c, int grid_size) { return c.y * grid_size + c.x; }
inline Cell cell_from_index(int idx, int grid_size) { return Cell{idx % grid_size, idx / grid_size}; }

// Janus split boundary: columns >= grid_size/2 run the inverted dynamic, so
// the central start cell falls inside the second (inverted) zone.
inline bool in_inverted_zone(int x, int grid_size) { return x >= grid_size / 2; }

struct StepResult {
    Cell obs;
    float reward = 0;
    bool done = false;
};

class EnvInstance {
public:
    explicit EnvInstance(EnvSpec spec);

    // DarkRoom/Janus start at the grid center; K2D draws the start uniformly
    // from the caller-supplied stream.
    void reset(Rng& rng);

    StepResult step(int action);  // throws UsageError once the episode is over

    const EnvSpec& spec() const { return spec_; }
    Cell agent_pos() const { return pos_; }
    bool has_key() const { return has_key_; }
    int t() const { return t_; }
    bool episode_over() const { return done_; }

private:
    EnvSpec spec_;
    Cell pos_{};
    bool has_key_ = false;
    int t_ = 0;
    bool done_ = true;  // must reset before stepping
};

// Per-episode return of an oracle that knows the task layout.
double expert_return(const EnvSpec& spec);

struct TaskSplit {
    std::vector<EnvSpec> train;
    std::vector<EnvSpec> test;
};

// DarkRoom/Janus tasks are goal cells; K2D tasks are (key, door) pairs with
// key != door. DarkRoom test = every cell not in train; other kinds get 100
// test configurations disjoint from train.
TaskSplit goal_split(EnvKind kind, int grid_size, int n_train, uint64_t seed);

}  // namespace icrl
