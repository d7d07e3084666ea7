#pragma once
// Flat key=value configuration covering model, data, training, sampling and control.

#include <string>
#include <vector>

#include "magd/control.hpp"
#include "magd/data.hpp"
#include "magd/diffusion.hpp"
#include "magd/model.hpp"

namespace magd {

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  std::uint64_t dataset_seed = 1;
  int dataset_count = 2000;
  TrainConfig train;
  std::uint64_t init_seed = 1;
  int checkpoint_every = 500;
  SamplerConfig sampler;
  GuidanceConfig guidance;
  int jobs = 0;  // 0: one per hardware thread

  static const std::vector<std::string>& keys();
  void set(const std::string& key, const std::string& value);  // ConfigError on unknown key or bad value
  std::string get(const std::string& key) const;
  void validate() const;

  friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.dump() == b.dump(); }
  // Every key in fixed order, one "key = value" per line.
  std::string dump() const;
};

// Blank lines and '#' comments allowed. Errors name the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

std::string format_double(double v);

}  // namespace magd
