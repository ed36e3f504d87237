#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace fud {

// config document violations map to exit code 2
class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

const std::vector<std::string>& command_names();

// runs one experiment command; throws on failure. The config document is
// validated strictly (unknown keys rejected) before any work happens.
void run_command(const std::string& command, const nlohmann::json& config,
                 const std::filesystem::path& out_dir);

// CLI wrapper: loads the config, applies the optional seed override to every
// "seed" field, runs, and maps failures to exit codes (0 ok, 2 schema,
// 3 divergence, 1 other) with a one-line JSON error on stderr.
int run_cli(const std::string& command,
            const std::filesystem::path& config_path,
            const std::optional<std::filesystem::path>& out_dir,
            std::optional<std::uint64_t> seed_override);

}  // namespace fud
