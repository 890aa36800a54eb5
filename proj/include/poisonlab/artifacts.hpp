#pragma once

// Shared artifact encodings for the stage drivers and the command-line
// front end. Every writer returns the exact byte stream that lands on disk;
// loaders accept only files these writers produced.

#include <string>
#include <vector>

#include "poisonlab/pipeline.hpp"

namespace poisonlab {

std::string eval_json(const EvalResult& e);
std::string stage1_trace_json(const Stage1Result& s);
std::string selection_json(const SelectionResult& s, SelectionMode mode);
std::string stage2_json(const Stage2Result& s);
std::string fisher_json(const Stage2Result& s);
std::string snapshots_json(const Stage2Result& s);
std::string epoch_losses_json(const std::vector<double>& losses);
std::string indices_json(const ExperimentResult& run);
std::string report_json(const ExperimentResult& run);
std::string theory_json(const TheoryRunReport& t);
std::string contraction_csv(const ContractionTrace& t);
std::string curvature_csv(const CurvatureReport& r);

std::vector<std::size_t> load_selection_chosen(const std::string& path);
std::vector<std::vector<double>> load_snapshots(const std::string& path);
std::vector<double> load_fisher(const std::string& path);

}  // namespace poisonlab
