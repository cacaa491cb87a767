#pragma once

#include "tase/eval.hpp"

#include <json.hpp>

#include <string>

namespace tase::report {

inline nlohmann::json benchmark_json(const eval::BenchmarkReport& b, bool is_probe) {
  nlohmann::json j{{"overall", b.overall},
                   {"per_class", b.per_class},
                   {"head", b.head},
                   {"mid", b.mid},
                   {"tail", b.tail},
                   {"range", b.range}};
  if (is_probe) j["absent_classes"] = b.absent_classes;
  return j;
}

inline nlohmann::json report_json(const eval::FullReport& rep, const std::string& features) {
  nlohmann::json benchmarks = nlohmann::json::object();
  for (const auto& b : rep.benchmarks) {
    const bool is_probe = b.name.find("LP") != std::string::npos;
    benchmarks[b.name] = benchmark_json(b, is_probe);
  }
  nlohmann::json j;
  j["benchmarks"] = benchmarks;
  j["diagnostics"] = {{"uniformity", rep.uniformity},
                      {"tolerance", rep.tolerance ? nlohmann::json(*rep.tolerance) : nlohmann::json(nullptr)}};
  j["features"] = features;
  return j;
}

}  // namespace tase::report
