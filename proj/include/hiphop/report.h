#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hiphop/training.h"

namespace hiphop {

struct RunHistory {
  std::string name;
  std::vector<EpochRecord> epochs;
};

// Reads one epoch record per line. Throws on an empty or malformed file.
RunHistory read_history(const std::filesystem::path& path);

// Side-by-side summary: epochs run, best epoch and validation metrics at
// the best epoch, final training loss.
std::string history_markdown(const std::vector<RunHistory>& runs, int k = 20);
std::string history_csv(const std::vector<RunHistory>& runs);

// Writes <dir>/<name>_loss.svg and <dir>/<name>_metrics.svg per run and
// returns the written paths.
std::vector<std::filesystem::path> plot_histories(const std::vector<RunHistory>& runs,
                                                  const std::filesystem::path& dir);

}  // namespace hiphop
