#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace looplab {

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<uint64_t> seed_override, int64_t steps_override);

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& out_dir, const std::string& k_list_csv);

int cmd_diagnose(const std::vector<std::string>& config_paths, int64_t steps,
                 const std::string& out_dir);

int cmd_plot(const std::vector<std::string>& log_paths, const std::string& out_dir);

}  // namespace looplab
