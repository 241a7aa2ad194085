#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "dsl/distill.hpp"
#include "dsl/segment.hpp"

namespace dsl {

// Experiment configuration: a JSON tree layered as defaults <- file <- --set
// overrides. Unknown keys are rejected so typos fail loudly.
class ExperimentConfig {
public:
    ExperimentConfig();  // defaults

    static ExperimentConfig from_file(const std::string& path);
    static nlohmann::json defaults();

    // Deep-merges `patch`; every key must already exist in the tree.
    void merge(const nlohmann::json& patch);
    // "a.b.c=value"; value parsed as JSON when possible, else taken as a string.
    void set(const std::string& assignment);

    const nlohmann::json& tree() const { return j_; }
    template <class T>
    T get(const std::string& dotted) const;

    // FNV-1a 64 over the canonical dump, output_dir excluded.
    std::string hash() const;
    // Same, restricted to the keys that shape a trained model.
    std::string train_hash() const;

    // Resolved against DSL_OUTPUT_ROOT when the configured dir is relative.
    std::string output_dir() const;

    TrainConfig train_config() const;
    SegmentOptions segment_options() const;
    HuThresholds thresholds() const;
    HuWindow window() const;
    PhantomSpec phantom_spec(std::uint64_t seed) const;

    void validate() const;

private:
    const nlohmann::json& at(const std::string& dotted) const;
    nlohmann::json j_;
};

std::string fnv1a_hex(const std::string& text);

template <class T>
T ExperimentConfig::get(const std::string& dotted) const {
    try {
        return at(dotted).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument("config key '" + dotted + "' has the wrong type: " + e.what());
    }
}

}  // namespace dsl
