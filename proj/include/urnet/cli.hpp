#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "urnet/metrics.hpp"

namespace urnet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitDivergence = 3 };

/// Entry point of the `urnet` tool: train, eval, usage-map, calibrate, resolve.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// 0.2, 0.3, ..., 1.0
std::vector<double> default_scale_grid();

void write_calibration_json(const std::filesystem::path& path, const std::vector<CalibrationPoint>& table,
                            bool envelope_applied);
std::vector<CalibrationPoint> read_calibration_json(const std::filesystem::path& path);

}  // namespace urnet
