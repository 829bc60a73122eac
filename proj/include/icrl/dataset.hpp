#pragma once

// Dataset persistence and transforms: expertise splits, episode-stride
// subsampling, ordering transforms and context-segment sampling for training.
//
// File layout (.icrl, little-endian):
//   "ICRL" | u8 version=1 | u32 manifest_len | manifest JSON (UTF-8)
//   u32 history_count
//   per history: u32 transition_count, then packed records
//     obs:u16 action:u8 reward:f32 done:u8 step:u16
//   u32 CRC-32 of every preceding byte

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "icrl/grid_env.hpp"
#include "icrl/rng.hpp"
#include "icrl/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace icrl {

constexpr int kActionSentinel = 5;  // history-initial "previous action"

struct Transition {
    uint16_t obs = 0;
    uint8_t action = 0;
    float reward = 0;
    uint8_t done = 0;
    uint16_t step = 0;  // position within its episode

    bool operator==(const Transition&) const = default;
};

struct LearningHistory {
    EnvSpec task;
    std::vector<Transition> transitions;
    std::vector<int64_t> episode_offsets;  // start index of each episode

    void rebuild_offsets();
    int64_t n_episodes() const { return (int64_t)episode_offsets.size(); }
    std::pair<int64_t, int64_t> episode_range(int64_t ep) const;
};

enum class Expertise { Early, Mid, Late, Complete };
enum class Ordering { LearningHistory, Random, SortedRandom };

std::string expertise_name(Expertise e);
Expertise expertise_from_name(const std::string& s);
std::string ordering_name(Ordering o);
Ordering ordering_from_name(const std::string& s);

// "{env}{size}-{targets}-{histories}[-{expertise}]", e.g. DR9-70-5,
// K2D13-500-1-early, Janus19-150-5.
struct DatasetName {
    EnvKind kind = EnvKind::DarkRoom;
    int grid_size = 9;
    int n_targets = 1;
    int histories_per_target = 1;
    Expertise expertise = Expertise::Complete;

    std::string str() const;
    static DatasetName parse(const std::string& s);
};

struct DatasetStats {
    int64_t transitions = 0;
    int64_t trajectories = 0;
    double mean_traj_len = 0;
    double mean_return = 0;
    double success_rate = 0;
};

struct DatasetManifest {
    std::string name;
    EnvSpec env_template;
    int n_targets = 0;
    int histories_per_target = 0;
    Expertise expertise = Expertise::Complete;
    Ordering ordering = Ordering::LearningHistory;
    uint64_t master_seed = 0;
    uint64_t split_seed = 0;
    int subsample = 1;
    DatasetStats stats;
    std::string collector_json;  // provenance blob from the producer, may be empty

    nlohmann::json to_json(const std::vector<EnvSpec>& tasks) const;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<LearningHistory> histories;

    int64_t total_transitions() const;
    DatasetStats compute_stats() const;
    void refresh_stats() { manifest.stats = compute_stats(); }
};

// Episode return counts as success at >0 reward for DR/Janus and at the full
// key+door completion for K2D.
bool episode_success(EnvKind kind, double episode_return);

// Trajectory-wise thirds with floor boundaries; parts concatenate back to the
// original history. Requires >= 3 episodes.
struct ExpertiseSplit {
    LearningHistory early, mid, late;
};
ExpertiseSplit split_expertise(const LearningHistory& history);
Dataset split_expertise(const Dataset& ds, Expertise which);

// Keeps episodes with index % k == 0, preserving order.
LearningHistory subsample(const LearningHistory& history, int k);
Dataset subsample(const Dataset& ds, int k);

// random: uniform per-history trajectory shuffle. sorted_random: shuffle, then
// stable sort ascending by within-trajectory discounted return.
Dataset reorder(const Dataset& ds, Ordering mode, double gamma, uint64_t seed);

double discounted_return(const Transition* begin, const Transition* end, double gamma);

// One training batch of contiguous history segments. Rows shorter than
// seq_len (short histories only) are left-padded with sentinel records;
// valid marks real positions, td_mask marks positions with a temporal
// successor inside the row.
struct ContextBatch {
    int64_t batch = 0;
    int64_t seq_len = 0;
    int episode_len = 1;  // for step normalization
    IArray obs, prev_action, step, target_action;          // [b,s] int32
    Array<float> prev_reward, prev_done, reward, done;     // [b,s]
    Array<float> valid, td_mask;                           // [b,s]
    std::vector<int> first_valid;                          // per-row pad count
    std::vector<std::pair<int64_t, int64_t>> origin;       // (history, start) per row
};

ContextBatch sample_context_batch(const Dataset& ds, int64_t batch, int64_t seq_len, uint64_t seed);

// Build a batch row-by-row from explicit transition windows (evaluation path
// shares the training tokenization).
ContextBatch batch_from_windows(const std::vector<std::vector<Transition>>& windows, int episode_len);

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

std::vector<uint8_t> dataset_to_bytes(const Dataset& ds);
Dataset dataset_from_bytes(const std::vector<uint8_t>& bytes);

}  // namespace icrl
