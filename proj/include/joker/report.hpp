#pragma once

#include <string>

#include "joker/detectors.hpp"

namespace joker {

enum class ReportFormat { Text, Json };

// Human text mirroring the device tool's output phrasing, or the versioned
// JSON document (schema in the README). Both renderings are deterministic:
// equal reports produce identical bytes. verbose adds evidence hex dumps to
// the text form (JSON always carries evidence).
std::string render_report(const DetectionReport& r, ReportFormat format, bool verbose = false);

// Process exit status for a finished run: 0 clean, 3 rootkit alert, 4 clean
// but with skipped detectors (an alert outranks a skip).
int exit_code_for(const DetectionReport& r);

} // namespace joker
