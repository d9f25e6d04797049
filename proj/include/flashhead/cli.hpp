#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flashhead/clustering.hpp"
#include "flashhead/evalbench.hpp"
#include "flashhead/head.hpp"

namespace flashhead {

enum class Command {
  GenEmbeddings,
  GenQueries,
  Cluster,
  Decode,
  Eval,
  Bench,
  McEval,
  Sweep,
  Dump,
};

enum class OutputFormat { Csv, Table };

/// Everything a CLI invocation can set.
struct RunConfig {
  std::filesystem::path embeddings;
  std::filesystem::path hidden;
  std::filesystem::path index;
  std::filesystem::path out;  // empty = stdout
  OutputFormat format = OutputFormat::Csv;

  // synthetic generators
  std::size_t vocab = 0;
  std::size_t dim = 0;
  std::size_t queries = 1000;
  QueryMode query_mode = QueryMode::Normal;

  // clustering
  std::size_t clusters = 8016;
  bool balanced = true;
  int max_iterations = 1000;
  double tolerance = 1e-6;
  InitMethod init = InitMethod::KMeansPlusPlus;
  std::vector<std::size_t> cluster_grid = {4008, 8016, 16032};

  // decoding
  std::size_t probes = 512;
  std::vector<std::size_t> probe_grid = {128, 256, 512};
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  std::optional<double> stage1_temperature;
  std::uint64_t seed = 0;
  Accumulation accumulation = Accumulation::F32;
  bool use_quant = false;

  // quantization (0 = none)
  int bits = 0;
  std::size_t group_size = 64;

  // evaluation
  std::size_t k = 1;
  std::vector<std::uint64_t> mc_samples = {10000};
  std::size_t query_row = 0;
  std::size_t reps = 100;
  std::size_t warmup = 10;
  std::vector<std::size_t> dump_clusters;

  // --gate thresholds
  bool gate = false;
  double min_fraction = 0.0;
  double min_speedup = 2.0;
  double max_l1 = 0.01;
};

/// Throws InvalidConfig (or InvalidOptions for clustering shape) when the
/// fields used by `cmd` are inconsistent. `vocab` and `index_clusters` enable
/// the checks that need file contents.
void validate(Command cmd, const RunConfig& cfg,
              std::optional<std::size_t> vocab = std::nullopt,
              std::optional<std::size_t> index_clusters = std::nullopt);

/// CLI entry point. Returns 0 on success, 1 when a --gate check fails, 2 on a
/// library error, and CLI11's code on a usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err);

}  // namespace flashhead
