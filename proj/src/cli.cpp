#include "flashhead/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "flashhead/error.hpp"
#include "flashhead/kernels.hpp"
#include "flashhead/mc.hpp"
#include "flashhead/quant.hpp"
#include "flashhead/tensor_io.hpp"

namespace flashhead {
namespace {

[[noreturn]] void bad_config(const std::string& msg) {
  throw Error(ErrorCode::InvalidConfig, msg);
}

std::string num(double x, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

const char* mode_name(DecodeMode m) {
  return m == DecodeMode::Greedy ? "greedy" : "sample";
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string render(const Table& t, OutputFormat format) {
  std::ostringstream os;
  if (format == OutputFormat::Csv) {
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) os << ',';
        os << cells[i];
      }
      os << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    return os.str();
  }
  std::vector<std::size_t> width(t.header.size());
  for (std::size_t i = 0; i < width.size(); ++i) width[i] = t.header[i].size();
  for (const auto& r : t.rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os << "  ";
      os << cells[i];
      if (i + 1 < cells.size()) os << std::string(width[i] - cells[i].size(), ' ');
    }
    os << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return os.str();
}

// Reports go to --out when given, else stdout. Nothing is written until the
// command has finished.
void emit(const RunConfig& cfg, const std::string& text, std::ostream& out) {
  if (cfg.out.empty()) {
    out << text;
    return;
  }
  write_file(cfg.out, std::vector<std::uint8_t>(text.begin(), text.end()));
}

DecodeConfig decode_config(const RunConfig& cfg) {
  DecodeConfig d;
  d.probes = cfg.probes;
  d.mode = cfg.mode;
  d.temperature = cfg.temperature;
  d.stage1_temperature = cfg.stage1_temperature;
  d.seed = cfg.seed;
  d.accumulation = cfg.accumulation;
  return d;
}

ClusterOptions cluster_options(const RunConfig& cfg, std::size_t c) {
  ClusterOptions o;
  o.clusters = c;
  o.max_iterations = cfg.max_iterations;
  o.seed = cfg.seed;
  o.balanced = cfg.balanced;
  o.tolerance = cfg.tolerance;
  o.init = cfg.init;
  return o;
}

struct Inputs {
  EmbeddingMatrix e;
  LoadedIndex loaded;
  HiddenBatch queries;
  std::optional<QuantizedCentroids> stage1;

  const QuantizedCentroids* stage1_ptr() const {
    return stage1 ? &*stage1 : nullptr;
  }
};

// Loads E, the index and the hidden batch, then runs the checks that need
// their shapes.
Inputs load_inputs(Command cmd, const RunConfig& cfg) {
  Inputs in;
  in.loaded = load_index(cfg.index);
  in.e = load_embeddings(cfg.embeddings);
  const auto& index = in.loaded.index;
  if (index.vocab != in.e.vocab() || index.dim() != in.e.dim()) {
    throw Error(ErrorCode::DimMismatch, "index does not match embeddings");
  }
  validate(cmd, cfg, in.e.vocab(), index.clusters());
  in.queries = load_hidden(cfg.hidden, in.e.dim());
  if (cfg.bits != 0) {
    in.stage1 = quantize_centroids(index.centroids, cfg.bits, cfg.group_size);
  } else if (cfg.use_quant) {
    if (!in.loaded.stage1) bad_config("index has no quantized stage-1 section");
    in.stage1 = in.loaded.stage1;
  }
  return in;
}

int gate_result(const RunConfig& cfg, bool pass, const std::string& what,
                std::ostream& err) {
  if (!cfg.gate) return 0;
  err << "gate " << (pass ? "PASS" : "FAIL") << ": " << what << '\n';
  return pass ? 0 : 1;
}

int cmd_gen_embeddings(const RunConfig& cfg, std::ostream& out) {
  validate(Command::GenEmbeddings, cfg);
  SyntheticSpec spec;
  spec.vocab = cfg.vocab;
  spec.dim = cfg.dim;
  spec.seed = cfg.seed;
  const auto e = synthetic_embeddings(spec);
  save_matrix(e.m, cfg.out);
  out << "embeddings " << e.vocab() << 'x' << e.dim() << " -> " << cfg.out.string() << '\n';
  return 0;
}

int cmd_gen_queries(const RunConfig& cfg, std::ostream& out) {
  validate(Command::GenQueries, cfg);
  const auto e = load_embeddings(cfg.embeddings);
  const auto q = synthetic_queries(e, cfg.queries, cfg.query_mode, cfg.seed);
  save_matrix(q.m, cfg.out);
  out << "queries " << q.count() << 'x' << q.dim() << " -> " << cfg.out.string() << '\n';
  return 0;
}

int cmd_cluster(const RunConfig& cfg, std::ostream& out) {
  validate(Command::Cluster, cfg);
  const auto e = load_embeddings(cfg.embeddings);
  validate(Command::Cluster, cfg, e.vocab());
  const auto norm = normalize_rows(e, ZeroRowPolicy::SubstituteBasis);
  const auto index = spherical_kmeans(norm.unit, cluster_options(cfg, cfg.clusters));
  check_index(index);
  std::optional<QuantizedCentroids> q;
  if (cfg.bits != 0) q = quantize_centroids(index.centroids, cfg.bits, cfg.group_size);
  save_index(index, cfg.out, q ? &*q : nullptr);

  const auto& trace = index.meta.objective_trace;
  out << "clusters " << index.clusters() << " cluster_size " << index.cluster_size
      << " vocab " << index.vocab << " balanced " << (index.balanced ? "yes" : "no")
      << '\n';
  out << "iterations " << index.meta.iterations;
  if (!trace.empty()) {
    out << " objective " << num(trace.front()) << " -> " << num(trace.back());
  }
  out << '\n';
  if (!norm.zero_rows.empty()) {
    out << "zero rows replaced " << norm.zero_rows.size() << '\n';
  }
  if (q) out << "stage1 int" << q->bits << " group " << q->group_size << '\n';
  out << "exact cover OK\n";
  return 0;
}

int cmd_decode(RunConfig cfg, bool oracle, std::ostream& out) {
  if (oracle) cfg.probes = 1;  // the dense head ignores --p
  validate(Command::Decode, cfg);
  const auto in = load_inputs(Command::Decode, cfg);
  std::vector<TokenId> tokens(in.queries.count());
  if (oracle) {
    parallel_for(tokens.size(), 16, [&](std::size_t b, std::size_t end) {
      for (std::size_t i = b; i < end; ++i) {
        tokens[i] = dense_head_oracle(in.e, in.queries.row(i), 1, cfg.accumulation)[0];
      }
    });
  } else {
    tokens = decode_batch(in.loaded.index, in.e, in.queries, decode_config(cfg),
                          in.stage1_ptr());
  }
  std::string text;
  for (auto t : tokens) text += std::to_string(t) + '\n';
  emit(cfg, text, out);
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  validate(Command::Eval, cfg);
  const auto in = load_inputs(Command::Eval, cfg);
  const auto r = containment(in.loaded.index, in.e, in.queries, decode_config(cfg),
                             cfg.k, in.stage1_ptr());
  Table t{{"k", "n", "hits", "fraction", "c", "p", "mode", "quant_bits"}, {}};
  t.rows.push_back({std::to_string(r.k), std::to_string(r.n), std::to_string(r.hits),
                    num(r.fraction, "%.6f"), std::to_string(r.clusters),
                    std::to_string(r.probes), mode_name(r.mode),
                    std::to_string(r.quant_bits)});
  emit(cfg, render(t, cfg.format), out);
  return gate_result(cfg, r.fraction >= cfg.min_fraction,
                     "fraction " + num(r.fraction) + " >= " + num(cfg.min_fraction), err);
}

int cmd_bench(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  validate(Command::Bench, cfg);
  const auto in = load_inputs(Command::Bench, cfg);
  const auto& index = in.loaded.index;
  const auto r = bench_tpot_head(in.e, index, in.queries, decode_config(cfg),
                                 {cfg.reps, cfg.warmup}, in.stage1_ptr());
  std::string cost;
  if (in.e.vocab() % index.clusters() == 0) {
    cost = num(cost_model(in.e.vocab(), in.e.dim(), index.clusters(), cfg.probes).ratio, "%.4f");
  }
  Table t{{"c", "p", "b", "reps", "warmup", "head_mean_ms", "head_median_ms",
           "head_p95_ms", "dense_mean_ms", "dense_median_ms", "dense_p95_ms",
           "speedup", "cost_ratio", "hardware"},
          {}};
  t.rows.push_back({std::to_string(index.clusters()), std::to_string(cfg.probes),
                    std::to_string(index.cluster_size), std::to_string(r.reps),
                    std::to_string(r.warmup), num(r.head.mean_ms, "%.4f"),
                    num(r.head.median_ms, "%.4f"), num(r.head.p95_ms, "%.4f"),
                    num(r.dense.mean_ms, "%.4f"), num(r.dense.median_ms, "%.4f"),
                    num(r.dense.p95_ms, "%.4f"), num(r.speedup_vs_dense, "%.3f"), cost,
                    '"' + r.hardware + '"'});
  emit(cfg, render(t, cfg.format), out);
  return gate_result(cfg, r.speedup_vs_dense >= cfg.min_speedup,
                     "speedup " + num(r.speedup_vs_dense) + " >= " + num(cfg.min_speedup),
                     err);
}

int cmd_mc(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  validate(Command::McEval, cfg);
  const auto in = load_inputs(Command::McEval, cfg);
  if (cfg.query_row >= in.queries.count()) bad_config("--query is past the last row");
  const auto h = in.queries.row(cfg.query_row);
  const auto& index = in.loaded.index;

  std::optional<MarginalEstimate> exact;
  try {
    exact = exact_marginal(index, in.e, h, cfg.probes, cfg.temperature);
  } catch (const Error& ex) {
    if (ex.code() != ErrorCode::TooManySubsets) throw;
  }

  Table t{{"N", "l1_to_oracle", "clipped", "wall_ms"}, {}};
  bool normalized = true;
  double last_l1 = 0.0;
  for (std::size_t i = 0; i < cfg.mc_samples.size(); ++i) {
    const auto n = cfg.mc_samples[i];
    Rng rng(derive_seed(cfg.seed, i));
    const auto t0 = std::chrono::steady_clock::now();
    const auto est = mc_marginal(index, in.e, h, cfg.probes, cfg.temperature, n, rng);
    const auto t1 = std::chrono::steady_clock::now();
    const double total = std::accumulate(est.probs.begin(), est.probs.end(), 0.0);
    normalized = normalized && std::abs(total - 1.0) <= 1e-12;
    std::string l1;
    if (exact) {
      last_l1 = l1_distance(est.probs, exact->probs);
      l1 = num(last_l1, "%.8f");
    }
    const auto clipped = clip_zeros(est).clipped;
    t.rows.push_back({std::to_string(n), l1, std::to_string(clipped),
                      num(std::chrono::duration<double, std::milli>(t1 - t0).count(), "%.3f")});
  }
  emit(cfg, render(t, cfg.format), out);
  if (!exact) {
    return gate_result(cfg, false, "exact marginal infeasible for this (c, p)", err);
  }
  return gate_result(cfg, normalized && last_l1 <= cfg.max_l1,
                     "l1 " + num(last_l1) + " <= " + num(cfg.max_l1) +
                         (normalized ? "" : ", estimate not normalized"),
                     err);
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  validate(Command::Sweep, cfg);
  const auto e = load_embeddings(cfg.embeddings);
  validate(Command::Sweep, cfg, e.vocab());
  const auto queries = load_hidden(cfg.hidden, e.dim());
  auto probes = cfg.probe_grid;
  std::sort(probes.begin(), probes.end());
  const auto rows = sweep(e, cluster_options(cfg, cfg.cluster_grid.front()), cfg.cluster_grid,
                          probes, queries, cfg.k, {cfg.reps, cfg.warmup});

  Table t{{"c", "p", "b", "containment", "head_median_ms", "dense_median_ms", "speedup",
           "cost_ratio"},
          {}};
  bool monotone = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const bool timed = cfg.reps > 0;
    t.rows.push_back({std::to_string(r.clusters), std::to_string(r.probes),
                      std::to_string(r.cluster_size), num(r.containment, "%.6f"),
                      timed ? num(r.latency.head.median_ms, "%.4f") : "",
                      timed ? num(r.latency.dense.median_ms, "%.4f") : "",
                      timed ? num(r.latency.speedup_vs_dense, "%.3f") : "",
                      r.cost_ratio > 0 ? num(r.cost_ratio, "%.4f") : ""});
    if (i > 0 && rows[i - 1].clusters == r.clusters &&
        r.containment < rows[i - 1].containment) {
      monotone = false;
    }
  }
  emit(cfg, render(t, cfg.format), out);
  return gate_result(cfg, monotone, "containment non-decreasing in p", err);
}

int cmd_dump(const RunConfig& cfg, std::ostream& out) {
  validate(Command::Dump, cfg);
  const auto loaded = load_index(cfg.index);
  const auto& index = loaded.index;
  for (auto k : cfg.dump_clusters) {
    if (k >= index.clusters()) bad_config("--cluster is past the last cluster");
  }
  std::size_t lo = index.cluster_size;
  std::size_t hi = 0;
  for (std::size_t k = 0; k < index.clusters(); ++k) {
    lo = std::min(lo, index.members(k));
    hi = std::max(hi, index.members(k));
  }
  std::ostringstream os;
  os << "clusters " << index.clusters() << "\ndim " << index.dim() << "\ncluster_size "
     << index.cluster_size << "\nvocab " << index.vocab << "\nbalanced "
     << (index.balanced ? "yes" : "no") << "\nmembers " << lo << ".." << hi << "\nseed "
     << index.meta.seed << "\niterations " << index.meta.iterations << '\n';
  const auto& trace = index.meta.objective_trace;
  if (!trace.empty()) {
    os << "objective " << num(trace.front()) << " -> " << num(trace.back()) << '\n';
  }
  if (loaded.stage1) {
    os << "stage1 int" << loaded.stage1->bits << " group " << loaded.stage1->group_size
       << '\n';
  }
  for (auto k : cfg.dump_clusters) {
    os << "cluster " << k << ':';
    for (auto t : index.row(k)) {
      if (t != kPadToken) os << ' ' << t;
    }
    os << '\n';
  }
  emit(cfg, os.str(), out);
  return 0;
}

template <class T>
CLI::Option* add_enum(CLI::App* app, const std::string& name, T& target,
                      const std::map<std::string, T>& names, const std::string& help) {
  return app->add_option(name, target, help)
      ->transform(CLI::CheckedTransformer(names, CLI::ignore_case));
}

}  // namespace

void validate(Command cmd, const RunConfig& cfg, std::optional<std::size_t> vocab,
              std::optional<std::size_t> index_clusters) {
  auto need_path = [](const std::filesystem::path& p, const char* flag) {
    if (p.empty()) bad_config(std::string(flag) + " is required");
  };
  const bool decodes = cmd == Command::Decode || cmd == Command::Eval ||
                       cmd == Command::Bench || cmd == Command::McEval;
  switch (cmd) {
    case Command::GenEmbeddings:
      if (cfg.vocab == 0 || cfg.dim == 0) bad_config("--vocab and --dim must be positive");
      need_path(cfg.out, "--out");
      break;
    case Command::GenQueries:
      need_path(cfg.embeddings, "--embeddings");
      need_path(cfg.out, "--out");
      if (cfg.queries == 0) bad_config("--n must be positive");
      break;
    case Command::Cluster:
      need_path(cfg.embeddings, "--embeddings");
      need_path(cfg.out, "--out");
      if (cfg.clusters == 0) bad_config("--c must be positive");
      if (cfg.max_iterations < 1) bad_config("--max-iter must be positive");
      if (!(cfg.tolerance >= 0)) bad_config("--tolerance must be non-negative");
      break;
    case Command::Sweep:
      need_path(cfg.embeddings, "--embeddings");
      need_path(cfg.hidden, "--hidden");
      if (cfg.cluster_grid.empty() || cfg.probe_grid.empty()) bad_config("empty sweep grid");
      if (cfg.max_iterations < 1) bad_config("--max-iter must be positive");
      if (cfg.reps > 0 && (cfg.reps < 30 || cfg.warmup < 10)) {
        bad_config("timed sweeps need --reps >= 30 and --warmup >= 10");
      }
      for (auto c : cfg.cluster_grid) {
        for (auto p : cfg.probe_grid) {
          if (p < 1 || p > c) bad_config("every sweep probe count must be in [1, c]");
        }
      }
      break;
    case Command::Dump:
      need_path(cfg.index, "--index");
      break;
    default:
      need_path(cfg.embeddings, "--embeddings");
      need_path(cfg.index, "--index");
      need_path(cfg.hidden, "--hidden");
      break;
  }
  if (decodes) {
    if (cfg.probes < 1) bad_config("--p must be at least 1");
    if (cfg.mode == DecodeMode::Sample || cmd == Command::McEval) {
      if (!(cfg.temperature > 0)) bad_config("--temperature must be positive");
      if (cfg.stage1_temperature && !(*cfg.stage1_temperature > 0)) {
        bad_config("--stage1-temperature must be positive");
      }
    }
  }
  if (cmd == Command::Cluster || decodes) {
    if (cfg.bits != 0 && cfg.bits != 4 && cfg.bits != 8) bad_config("--quant-bits must be 4 or 8");
    if (cfg.bits != 0 && cfg.group_size == 0) bad_config("--group-size must be positive");
  }
  if (cmd == Command::Eval || cmd == Command::Sweep) {
    if (cfg.k < 1) bad_config("--k must be at least 1");
    if (vocab && cfg.k > *vocab) bad_config("--k exceeds the vocabulary");
  }
  if (cmd == Command::Bench && (cfg.reps < 30 || cfg.warmup < 10)) {
    bad_config("bench needs --reps >= 30 and --warmup >= 10");
  }
  if (cmd == Command::McEval) {
    if (cfg.mc_samples.empty()) bad_config("--n needs at least one sample count");
    for (auto n : cfg.mc_samples) {
      if (n < 1) bad_config("--n values must be positive");
    }
  }
  if (index_clusters && decodes && cfg.probes > *index_clusters) {
    bad_config("--p exceeds the number of clusters in the index");
  }
  if (vocab && (cmd == Command::Cluster || cmd == Command::Sweep)) {
    const std::vector<std::size_t> single{cfg.clusters};
    const auto& counts = cmd == Command::Cluster ? single : cfg.cluster_grid;
    for (auto c : counts) {
      if (c > *vocab) {
        throw Error(ErrorCode::InvalidOptions, "more clusters than tokens");
      }
      if (cfg.balanced && *vocab % c != 0) {
        throw Error(ErrorCode::InvalidOptions,
                    "balanced clustering needs c to divide v (c=" + std::to_string(c) +
                        ", v=" + std::to_string(*vocab) + ")");
      }
    }
  }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  int threads = 0;
  bool oracle = false;

  CLI::App app{"Two-stage clustered LM head: build, decode, evaluate, benchmark"};
  app.set_config("--config", "", "Read options from a TOML/INI file");
  app.add_option("--threads", threads, "Worker threads (0 = default)")
      ->envname("FLASHHEAD_THREADS")
      ->check(CLI::NonNegativeNumber);
  app.require_subcommand(1);

  const std::map<std::string, DecodeMode> modes{{"greedy", DecodeMode::Greedy},
                                                {"sample", DecodeMode::Sample}};
  const std::map<std::string, QueryMode> qmodes{{"normal", QueryMode::Normal},
                                                {"hard", QueryMode::Hard}};
  const std::map<std::string, InitMethod> inits{{"kmeans++", InitMethod::KMeansPlusPlus},
                                                {"uniform", InitMethod::UniformRandom}};
  const std::map<std::string, Accumulation> accs{{"f32", Accumulation::F32},
                                                 {"f64", Accumulation::F64}};
  const std::map<std::string, OutputFormat> formats{{"csv", OutputFormat::Csv},
                                                    {"table", OutputFormat::Table}};

  auto embeddings = [&](CLI::App* s) {
    s->add_option("--embeddings,-e", cfg.embeddings, "Embedding matrix (v x d)");
  };
  auto hidden = [&](CLI::App* s) {
    s->add_option("--hidden", cfg.hidden, "Hidden-state batch (n x d)");
  };
  auto index = [&](CLI::App* s) { s->add_option("--index,-i", cfg.index, "Index file"); };
  auto output = [&](CLI::App* s) {
    s->add_option("--out,-o", cfg.out, "Output path (default stdout)");
    add_enum(s, "--format", cfg.format, formats, "csv or table");
  };
  auto seed = [&](CLI::App* s) { s->add_option("--seed", cfg.seed, "Random seed"); };
  auto clustering = [&](CLI::App* s) {
    s->add_option("--max-iter", cfg.max_iterations, "Iteration budget");
    s->add_option("--tolerance", cfg.tolerance, "Relative objective change for early stop");
    s->add_flag("!--unbalanced", cfg.balanced, "Plain spherical k-means with padded C2T");
    add_enum(s, "--init", cfg.init, inits, "kmeans++ or uniform");
  };
  auto decoding = [&](CLI::App* s) {
    s->add_option("--p", cfg.probes, "Probes per query");
    add_enum(s, "--mode", cfg.mode, modes, "greedy or sample");
    s->add_option("--temperature", cfg.temperature, "Softmax temperature");
    s->add_option("--stage1-temperature", cfg.stage1_temperature,
                  "Stage-1 temperature (default: --temperature)");
    add_enum(s, "--accumulation", cfg.accumulation, accs, "f32 or f64 stage-2 sums");
  };
  auto quant = [&](CLI::App* s) {
    s->add_option("--quant-bits", cfg.bits, "Quantize stage 1 to 4 or 8 bits");
    s->add_option("--group-size", cfg.group_size, "Weights per quantization scale");
  };
  auto stored_quant = [&](CLI::App* s) {
    s->add_flag("--use-quant", cfg.use_quant, "Use the quantized section stored in the index");
  };
  auto gate = [&](CLI::App* s) {
    s->add_flag("--gate", cfg.gate, "Exit 1 when the acceptance check fails");
  };

  auto* gen_e = app.add_subcommand("gen-embeddings", "Write a synthetic embedding matrix");
  gen_e->add_option("--vocab", cfg.vocab, "Rows (tokens)")->required();
  gen_e->add_option("--dim", cfg.dim, "Columns")->required();
  gen_e->add_option("--out,-o", cfg.out, "Output path")->required();
  seed(gen_e);

  auto* gen_q = app.add_subcommand("gen-queries", "Write a synthetic hidden-state batch");
  embeddings(gen_q);
  gen_q->add_option("--n", cfg.queries, "Number of queries");
  add_enum(gen_q, "--query-mode", cfg.query_mode, qmodes, "normal or hard");
  gen_q->add_option("--out,-o", cfg.out, "Output path")->required();
  seed(gen_q);

  auto* cluster = app.add_subcommand("cluster", "Build a clustered index");
  embeddings(cluster);
  cluster->add_option("--c", cfg.clusters, "Number of clusters");
  clustering(cluster);
  quant(cluster);
  cluster->add_option("--out,-o", cfg.out, "Index path")->required();
  seed(cluster);

  auto* decode_cmd = app.add_subcommand("decode", "Print one token id per query row");
  embeddings(decode_cmd);
  index(decode_cmd);
  hidden(decode_cmd);
  decoding(decode_cmd);
  quant(decode_cmd);
  stored_quant(decode_cmd);
  seed(decode_cmd);
  decode_cmd->add_flag("--oracle", oracle, "Print the dense head's argmax instead");
  decode_cmd->add_option("--out,-o", cfg.out, "Output path (default stdout)");

  auto* eval = app.add_subcommand("eval", "Top-k containment against the dense head");
  embeddings(eval);
  index(eval);
  hidden(eval);
  decoding(eval);
  quant(eval);
  stored_quant(eval);
  seed(eval);
  eval->add_option("--k", cfg.k, "Containment order");
  eval->add_option("--min-fraction", cfg.min_fraction, "Gate threshold");
  gate(eval);
  output(eval);

  auto* bench = app.add_subcommand("bench", "Head-only latency against the dense head");
  embeddings(bench);
  index(bench);
  hidden(bench);
  decoding(bench);
  quant(bench);
  stored_quant(bench);
  seed(bench);
  bench->add_option("--reps", cfg.reps, "Timed repetitions (>= 30)");
  bench->add_option("--warmup", cfg.warmup, "Untimed warmup calls (>= 10)");
  bench->add_option("--min-speedup", cfg.min_speedup, "Gate threshold");
  gate(bench);
  output(bench);

  auto* mc = app.add_subcommand("mc-eval", "Monte Carlo marginal against exact enumeration");
  embeddings(mc);
  index(mc);
  hidden(mc);
  mc->add_option("--p", cfg.probes, "Probes per sample");
  mc->add_option("--temperature", cfg.temperature, "Softmax temperature");
  mc->add_option("--n", cfg.mc_samples, "Sample counts")->expected(1, -1);
  mc->add_option("--query", cfg.query_row, "Row of the hidden batch");
  mc->add_option("--max-l1", cfg.max_l1, "Gate threshold at the largest N");
  seed(mc);
  gate(mc);
  output(mc);

  auto* sweep_cmd = app.add_subcommand("sweep", "Cluster/probe grid");
  embeddings(sweep_cmd);
  hidden(sweep_cmd);
  sweep_cmd->add_option("--c", cfg.cluster_grid, "Cluster counts")->expected(1, -1);
  sweep_cmd->add_option("--p", cfg.probe_grid, "Probe counts")->expected(1, -1);
  clustering(sweep_cmd);
  seed(sweep_cmd);
  sweep_cmd->add_option("--k", cfg.k, "Containment order");
  sweep_cmd->add_option("--reps", cfg.reps, "Timed repetitions (0 skips timing)");
  sweep_cmd->add_option("--warmup", cfg.warmup, "Untimed warmup calls");
  gate(sweep_cmd);
  output(sweep_cmd);

  auto* dump = app.add_subcommand("dump", "Describe an index file");
  index(dump);
  dump->add_option("--cluster", cfg.dump_clusters, "List the members of these clusters")
      ->expected(1, -1);
  dump->add_option("--out,-o", cfg.out, "Output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (threads > 0) set_thread_count(threads);

  try {
    if (gen_e->parsed()) return cmd_gen_embeddings(cfg, out);
    if (gen_q->parsed()) return cmd_gen_queries(cfg, out);
    if (cluster->parsed()) return cmd_cluster(cfg, out);
    if (decode_cmd->parsed()) return cmd_decode(cfg, oracle, out);
    if (eval->parsed()) return cmd_eval(cfg, out, err);
    if (bench->parsed()) return cmd_bench(cfg, out, err);
    if (mc->parsed()) return cmd_mc(cfg, out, err);
    if (sweep_cmd->parsed()) return cmd_sweep(cfg, out, err);
    if (dump->parsed()) return cmd_dump(cfg, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace flashhead
