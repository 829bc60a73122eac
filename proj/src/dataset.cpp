#include "icrl/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>

#include <nlohmann/json.hpp>

#include "icrl/serialize.hpp"

namespace icrl {

void LearningHistory::rebuild_offsets() {
    episode_offsets.clear();
    bool at_start = true;
    for (int64_t i = 0; i < (int64_t)transitions.size(); ++i) {
        if (at_start) episode_offsets.push_back(i);
        at_start = transitions[(size_t)i].done != 0;
    }
}

std::pair<int64_t, int64_t> LearningHistory::episode_range(int64_t ep) const {
    int64_t lo = episode_offsets[(size_t)ep];
    int64_t hi = ep + 1 < n_episodes() ? episode_offsets[(size_t)(ep + 1)] : (int64_t)transitions.size();
    return {lo, hi};
}

std::string expertise_name(Expertise e) {
    switch (e) {
        case Expertise::Early: return "early";
        case Expertise::Mid: return "mid";
        case Expertise::Late: return "late";
        case Expertise::Complete: return "complete";
    }
    return "?";
}

Expertise expertise_from_name(const std::string& s) {
    if (s == "early") return Expertise::Early;
    if (s == "mid") return Expertise::Mid;
    if (s == "late") return Expertise::Late;
    if (s == "complete" || s.empty()) return Expertise::Complete;
    throw UsageError("unknown expertise level: " + s);
}

std::string ordering_name(Ordering o) {
    switch (o) {
        case Ordering::LearningHistory: return "learning_history";
        case Ordering::Random: return "random";
        case Ordering::SortedRandom: return "sorted_random";
    }
    return "?";
}

Ordering ordering_from_name(const std::string& s) {
    if (s == "learning_history") return Ordering::LearningHistory;
    if (s == "random") return Ordering::Random;
    if (s == "sorted_random") return Ordering::SortedRandom;
    throw UsageError("unknown ordering mode: " + s);
}

std::string DatasetName::str() const {
    std::string prefix;
    switch (kind) {
        case EnvKind::DarkRoom: prefix = "DR"; break;
        case EnvKind::KeyToDoor: prefix = "K2D"; break;
        case EnvKind::Janus: prefix = "Janus"; break;
    }
    std::string s = prefix + std::to_string(grid_size) + "-" + std::to_string(n_targets) + "-" +
                    std::to_string(histories_per_target);
    if (expertise != Expertise::Complete) s += "-" + expertise_name(expertise);
    return s;
}

DatasetName DatasetName::parse(const std::string& s) {
    DatasetName out;
    size_t i = 0;
    while (i < s.size() && !std::isdigit((unsigned char)s[i])) ++i;
    std::string prefix = s.substr(0, i);
    // K2D carries a digit inside the prefix
    if (s.rfind("K2D", 0) == 0) {
        prefix = "K2D";
        i = 3;
    }
    if (prefix == "DR")
        out.kind = EnvKind::DarkRoom;
    else if (prefix == "K2D")
        out.kind = EnvKind::KeyToDoor;
    else if (prefix == "Janus")
        out.kind = EnvKind::Janus;
    else
        throw UsageError("dataset name: unknown environment prefix in \"" + s + "\"");

    std::vector<std::string> parts;
    std::string cur;
    for (size_t j = i; j < s.size(); ++j) {
        if (s[j] == '-') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += s[j];
        }
    }
    parts.push_back(cur);
    if (parts.size() < 3 || parts.size() > 4)
        throw UsageError("dataset name: expected {env}{size}-{targets}-{histories}[-{expertise}], got \"" + s +
                         "\"");
    auto to_int = [&](const std::string& p, const char* what) {
        try {
            size_t pos = 0;
            int v = std::stoi(p, &pos);
            if (pos != p.size() || v <= 0) throw std::invalid_argument(what);
            return v;
        } catch (...) {
            throw UsageError(std::string("dataset name: bad ") + what + " in \"" + s + "\"");
        }
    };
    out.grid_size = to_int(parts[0], "grid size");
    out.n_targets = to_int(parts[1], "target count");
    out.histories_per_target = to_int(parts[2], "history count");
    out.expertise = parts.size() == 4 ? expertise_from_name(parts[3]) : Expertise::Complete;
    return out;
}

nlohmann::json DatasetManifest::to_json(const std::vector<EnvSpec>& tasks) const {
    nlohmann::json j;
    j["name"] = name;
    j["env"] = env_template.to_json();
    j["n_targets"] = n_targets;
    j["histories_per_target"] = histories_per_target;
    j["expertise"] = expertise_name(expertise);
    j["ordering"] = ordering_name(ordering);
    j["master_seed"] = master_seed;
    j["split_seed"] = split_seed;
    j["subsample"] = subsample;
    j["counts"] = {{"transitions", stats.transitions}, {"trajectories", stats.trajectories}};
    j["stats"] = {{"mean_traj_len", stats.mean_traj_len},
                  {"mean_return", stats.mean_return},
                  {"success_rate", stats.success_rate}};
    if (!collector_json.empty()) j["collector"] = nlohmann::json::parse(collector_json);
    nlohmann::json tasks_json = nlohmann::json::array();
    for (const auto& t : tasks) tasks_json.push_back(t.to_json());
    j["tasks"] = std::move(tasks_json);
    return j;
}

bool episode_success(EnvKind kind, double episode_return) {
    return kind == EnvKind::KeyToDoor ? episode_return >= 1.5 : episode_return > 0;
}

int64_t Dataset::total_transitions() const {
    int64_t n = 0;
    for (const auto& h : histories) n += (int64_t)h.transitions.size();
    return n;
}

DatasetStats Dataset::compute_stats() const {
    DatasetStats st;
    double len_sum = 0, ret_sum = 0, succ_sum = 0;
    for (const auto& h : histories) {
        st.transitions += (int64_t)h.transitions.size();
        for (int64_t ep = 0; ep < h.n_episodes(); ++ep) {
            auto [lo, hi] = h.episode_range(ep);
            double ret = 0;
            for (int64_t i = lo; i < hi; ++i) ret += h.transitions[(size_t)i].reward;
            len_sum += (double)(hi - lo);
            ret_sum += ret;
            succ_sum += episode_success(manifest.env_template.kind, ret) ? 1 : 0;
            ++st.trajectories;
        }
    }
    if (st.trajectories > 0) {
        st.mean_traj_len = len_sum / (double)st.trajectories;
        st.mean_return = ret_sum / (double)st.trajectories;
        st.success_rate = succ_sum / (double)st.trajectories;
    }
    return st;
}

ExpertiseSplit split_expertise(const LearningHistory& history) {
    int64_t n = history.n_episodes();
    if (n < 3) throw UsageError("split_expertise: need at least 3 episodes, have " + std::to_string(n));
    int64_t b1 = n / 3, b2 = 2 * n / 3;
    auto cut = [&](int64_t ep_lo, int64_t ep_hi) {
        LearningHistory part;
        part.task = history.task;
        int64_t lo = history.episode_offsets[(size_t)ep_lo];
        int64_t hi = ep_hi < n ? history.episode_offsets[(size_t)ep_hi] : (int64_t)history.transitions.size();
        part.transitions.assign(history.transitions.begin() + lo, history.transitions.begin() + hi);
        part.rebuild_offsets();
        return part;
    };
    return ExpertiseSplit{cut(0, b1), cut(b1, b2), cut(b2, n)};
}

Dataset split_expertise(const Dataset& ds, Expertise which) {
    if (which == Expertise::Complete) return ds;
    Dataset out;
    out.manifest = ds.manifest;
    out.manifest.expertise = which;
    DatasetName nm = DatasetName::parse(ds.manifest.name);
    nm.expertise = which;
    out.manifest.name = nm.str();
    for (const auto& h : ds.histories) {
        ExpertiseSplit sp = split_expertise(h);
        switch (which) {
            case Expertise::Early: out.histories.push_back(std::move(sp.early)); break;
            case Expertise::Mid: out.histories.push_back(std::move(sp.mid)); break;
            case Expertise::Late: out.histories.push_back(std::move(sp.late)); break;
            case Expertise::Complete: break;
        }
    }
    out.refresh_stats();
    return out;
}

LearningHistory subsample(const LearningHistory& history, int k) {
    if (k < 1) throw UsageError("subsample: stride must be >= 1");
    if (k == 1) return history;
    LearningHistory out;
    out.task = history.task;
    for (int64_t ep = 0; ep < history.n_episodes(); ep += k) {
        auto [lo, hi] = history.episode_range(ep);
        out.transitions.insert(out.transitions.end(), history.transitions.begin() + lo,
                               history.transitions.begin() + hi);
    }
    out.rebuild_offsets();
    return out;
}

Dataset subsample(const Dataset& ds, int k) {
    if (k == 1) return ds;
    Dataset out;
    out.manifest = ds.manifest;
    out.manifest.subsample = k;
    for (const auto& h : ds.histories) out.histories.push_back(subsample(h, k));
    out.refresh_stats();
    return out;
}

double discounted_return(const Transition* begin, const Transition* end, double gamma) {
    double g = 0, w = 1;
    for (const Transition* t = begin; t != end; ++t) {
        g += w * (double)t->reward;
        w *= gamma;
    }
    return g;
}

Dataset reorder(const Dataset& ds, Ordering mode, double gamma, uint64_t seed) {
    if (mode == Ordering::LearningHistory) return ds;
    Dataset out;
    out.manifest = ds.manifest;
    out.manifest.ordering = mode;
    for (size_t hi = 0; hi < ds.histories.size(); ++hi) {
        const auto& h = ds.histories[hi];
        int64_t n = h.n_episodes();
        std::vector<int64_t> order((size_t)n);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix64(seed, (uint64_t)hi, 0x0RD));
        for (int64_t i = 0; i < n - 1; ++i) {
            int64_t j = i + (int64_t)rng.uniform_u64((uint64_t)(n - i));
            std::swap(order[(size_t)i], order[(size_t)j]);
        }
        if (mode == Ordering::SortedRandom) {
            std::vector<double> g((size_t)n);
            for (int64_t ep = 0; ep < n; ++ep) {
                auto [lo, hi2] = h.episode_range(ep);
                g[(size_t)ep] = discounted_return(h.transitions.data() + lo, h.transitions.data() + hi2, gamma);
            }
            std::stable_sort(order.begin(), order.end(),
                             [&](int64_t a, int64_t b) { return g[(size_t)a] < g[(size_t)b]; });
        }
        LearningHistory nh;
        nh.task = h.task;
        nh.transitions.reserve(h.transitions.size());
        for (int64_t ep : order) {
            auto [lo, hi2] = h.episode_range(ep);
            nh.transitions.insert(nh.transitions.end(), h.transitions.begin() + lo, h.transitions.begin() + hi2);
        }
        nh.rebuild_offsets();
        out.histories.push_back(std::move(nh));
    }
    out.refresh_stats();
    return out;
}

namespace {

void fill_row(ContextBatch& cb, int64_t row, const Transition* window, int64_t len, int64_t pad,
              const Transition* prev_of_first) {
    int64_t s = cb.seq_len;
    for (int64_t j = 0; j < pad; ++j) {
        int64_t at = row * s + j;
        cb.obs.data[(size_t)at] = 0;
        cb.prev_action.data[(size_t)at] = kActionSentinel;
        cb.step.data[(size_t)at] = 0;
        cb.target_action.data[(size_t)at] = 0;
        cb.prev_reward.data[(size_t)at] = 0;
        cb.prev_done.data[(size_t)at] = 1;
        cb.reward.data[(size_t)at] = 0;
        cb.done.data[(size_t)at] = 1;
        cb.valid.data[(size_t)at] = 0;
    }
    for (int64_t j = 0; j < len; ++j) {
        int64_t at = row * s + pad + j;
        const Transition& tr = window[j];
        cb.obs.data[(size_t)at] = tr.obs;
        cb.step.data[(size_t)at] = tr.step;
        cb.target_action.data[(size_t)at] = tr.action;
        cb.reward.data[(size_t)at] = tr.reward;
        cb.done.data[(size_t)at] = tr.done;
        cb.valid.data[(size_t)at] = 1;
        const Transition* prev = j > 0 ? &window[j - 1] : prev_of_first;
        if (prev) {
            cb.prev_action.data[(size_t)at] = prev->action;
            cb.prev_reward.data[(size_t)at] = prev->reward;
            cb.prev_done.data[(size_t)at] = prev->done;
        } else {
            cb.prev_action.data[(size_t)at] = kActionSentinel;
            cb.prev_reward.data[(size_t)at] = 0;
            cb.prev_done.data[(size_t)at] = 1;
        }
    }
    for (int64_t j = 0; j < s; ++j) {
        int64_t at = row * s + j;
        cb.td_mask.data[(size_t)at] = (j + 1 < s && cb.valid.data[(size_t)at] != 0) ? 1.0f : 0.0f;
    }
    cb.first_valid[(size_t)row] = (int)pad;
}

ContextBatch make_batch(int64_t batch, int64_t seq_len, int episode_len) {
    ContextBatch cb;
    cb.batch = batch;
    cb.seq_len = seq_len;
    cb.episode_len = episode_len;
    cb.obs = IArray::zeros({batch, seq_len});
    cb.prev_action = IArray::zeros({batch, seq_len});
    cb.step = IArray::zeros({batch, seq_len});
    cb.target_action = IArray::zeros({batch, seq_len});
    cb.prev_reward = Array<float>::zeros({batch, seq_len});
    cb.prev_done = Array<float>::zeros({batch, seq_len});
    cb.reward = Array<float>::zeros({batch, seq_len});
    cb.done = Array<float>::zeros({batch, seq_len});
    cb.valid = Array<float>::zeros({batch, seq_len});
    cb.td_mask = Array<float>::zeros({batch, seq_len});
    cb.first_valid.assign((size_t)batch, 0);
    return cb;
}

}  // namespace

ContextBatch sample_context_batch(const Dataset& ds, int64_t batch, int64_t seq_len, uint64_t seed) {
    if (ds.histories.empty()) throw UsageError("sample_context_batch: empty dataset");
    if (batch < 1 || seq_len < 2) throw UsageError("sample_context_batch: need batch >= 1, seq_len >= 2");

    // joint-uniform over (history, start offset); short histories contribute
    // a single padded start
    std::vector<int64_t> cum;
    cum.reserve(ds.histories.size() + 1);
    cum.push_back(0);
    for (const auto& h : ds.histories) {
        int64_t len = (int64_t)h.transitions.size();
        int64_t starts = len >= seq_len ? len - seq_len + 1 : 1;
        cum.push_back(cum.back() + starts);
    }
    int64_t total = cum.back();

    ContextBatch cb = make_batch(batch, seq_len, ds.manifest.env_template.episode_len);
    Rng rng(mix64(seed, 0xBA7C4));
    for (int64_t row = 0; row < batch; ++row) {
        int64_t pick = (int64_t)rng.uniform_u64((uint64_t)total);
        size_t hi = (size_t)(std::upper_bound(cum.begin(), cum.end(), pick) - cum.begin() - 1);
        int64_t off = pick - cum[hi];
        const auto& h = ds.histories[hi];
        int64_t len = std::min<int64_t>(seq_len, (int64_t)h.transitions.size() - off);
        int64_t pad = seq_len - len;
        const Transition* prev = off > 0 ? &h.transitions[(size_t)(off - 1)] : nullptr;
        fill_row(cb, row, h.transitions.data() + off, len, pad, prev);
        cb.origin.emplace_back((int64_t)hi, off);
    }
    return cb;
}

ContextBatch batch_from_windows(const std::vector<std::vector<Transition>>& windows, int episode_len) {
    if (windows.empty()) throw UsageError("batch_from_windows: empty batch");
    int64_t s = (int64_t)windows[0].size();
    for (const auto& w : windows)
        if ((int64_t)w.size() != s) throw UsageError("batch_from_windows: unequal window lengths");
    ContextBatch cb = make_batch((int64_t)windows.size(), s, episode_len);
    for (size_t i = 0; i < windows.size(); ++i)
        fill_row(cb, (int64_t)i, windows[i].data(), s, 0, nullptr);
    return cb;
}

// ---- binary io ----

std::vector<uint8_t> dataset_to_bytes(const Dataset& ds) {
    ByteWriter w;
    w.str("ICRL");
    w.u8(1);
    std::vector<EnvSpec> tasks;
    tasks.reserve(ds.histories.size());
    for (const auto& h : ds.histories) tasks.push_back(h.task);
    std::string manifest = ds.manifest.to_json(tasks).dump();
    w.u32((uint32_t)manifest.size());
    w.str(manifest);
    w.u32((uint32_t)ds.histories.size());
    for (const auto& h : ds.histories) {
        w.u32((uint32_t)h.transitions.size());
        for (const auto& t : h.transitions) {
            w.u16(t.obs);
            w.u8(t.action);
            w.f32(t.reward);
            w.u8(t.done);
            w.u16(t.step);
        }
    }
    uint32_t crc = crc32(w.data().data(), w.size());
    w.u32(crc);
    return w.data();
}

Dataset dataset_from_bytes(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 13) throw FormatError("dataset file too short");
    uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    uint32_t actual = crc32(bytes.data(), bytes.size() - 4);
    if (stored != actual)
        throw FormatError("dataset checksum mismatch at offset " + std::to_string(bytes.size() - 4));

    ByteReader r(bytes.data(), bytes.size() - 4);
    if (r.str(4) != "ICRL") throw FormatError("bad magic at offset 0 (expected ICRL)");
    uint8_t version = r.u8();
    if (version != 1) throw FormatError("unsupported dataset version " + std::to_string(version));
    uint32_t mlen = r.u32();
    nlohmann::json mj;
    try {
        mj = nlohmann::json::parse(r.str(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest parse failure: ") + e.what());
    }

    Dataset ds;
    DatasetManifest& m = ds.manifest;
    m.name = mj.at("name").get<std::string>();
    m.env_template = EnvSpec::from_json(mj.at("env"));
    m.n_targets = mj.at("n_targets").get<int>();
    m.histories_per_target = mj.at("histories_per_target").get<int>();
    m.expertise = expertise_from_name(mj.at("expertise").get<std::string>());
    m.ordering = ordering_from_name(mj.at("ordering").get<std::string>());
    m.master_seed = mj.at("master_seed").get<uint64_t>();
    m.split_seed = mj.at("split_seed").get<uint64_t>();
    m.subsample = mj.at("subsample").get<int>();
    m.stats.transitions = mj.at("counts").at("transitions").get<int64_t>();
    m.stats.trajectories = mj.at("counts").at("trajectories").get<int64_t>();
    m.stats.mean_traj_len = mj.at("stats").at("mean_traj_len").get<double>();
    m.stats.mean_return = mj.at("stats").at("mean_return").get<double>();
    m.stats.success_rate = mj.at("stats").at("success_rate").get<double>();
    if (mj.contains("collector")) m.collector_json = mj.at("collector").dump();

    std::vector<EnvSpec> tasks;
    for (const auto& tj : mj.at("tasks")) tasks.push_back(EnvSpec::from_json(tj));

    uint32_t n_hist = r.u32();
    if (tasks.size() != n_hist)
        throw FormatError("manifest lists " + std::to_string(tasks.size()) + " tasks but file has " +
                          std::to_string(n_hist) + " histories");
    ds.histories.resize(n_hist);
    for (uint32_t i = 0; i < n_hist; ++i) {
        auto& h = ds.histories[i];
        h.task = tasks[i];
        uint32_t n = r.u32();
        h.transitions.resize(n);
        for (uint32_t j = 0; j < n; ++j) {
            auto& t = h.transitions[j];
            t.obs = r.u16();
            t.action = r.u8();
            t.reward = r.f32();
            t.done = r.u8();
            t.step = r.u16();
        }
        h.rebuild_offsets();
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after payload at offset " + std::to_string(r.pos()));
    return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) { write_file_bytes(path, dataset_to_bytes(ds)); }

Dataset read_dataset(const std::string& path) { return dataset_from_bytes(read_file_bytes(path)); }

}  // namespace icrl
