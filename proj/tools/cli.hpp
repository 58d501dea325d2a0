#pragma once

// Command-line front end: preprocess, fit, transform, sweep, eval, check.
// Exit codes: 0 success, 1 user error (bad input, flags or files), 2 internal
// failure (numerical breakdown, failed self-check, unexpected exception).

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gplvm/checkpoint.hpp"
#include "gplvm/design.hpp"
#include "gplvm/eval.hpp"
#include "gplvm/expression.hpp"
#include "gplvm/init.hpp"
#include "gplvm/preprocess.hpp"
#include "gplvm/selfcheck.hpp"
#include "gplvm/trainer.hpp"

namespace gplvm::cli {

inline constexpr const char *kVersion = "0.1.0";

enum ExitCode : int { ok = 0, user_error = 1, internal_error = 2 };

namespace fs = std::filesystem;

// ---------------------------------------------------------------- hashing

inline std::string sha256_hex(const std::string &bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::io, "SHA-256 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

inline std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const std::string &path) { return sha256_hex(read_file(path)); }

/// Write via a sibling temporary and rename, so readers never see a partial file.
inline void write_file_atomic(const std::string &path, const std::string &bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(out.good(), ErrorKind::io, "failed writing '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, ErrorKind::io, "cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

// --------------------------------------------------------------- manifest

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// key: value lines, rewritten atomically on every update.
class Manifest {
public:
  Manifest(std::string path, const std::string &command)
      : path_(std::move(path)), start_(std::chrono::steady_clock::now()) {
    set("tool", "gplvm-cli");
    set("version", kVersion);
    set("command", command);
    set("status", "running");
    set("started", utc_now());
  }

  void set(const std::string &key, const std::string &value) {
    for (auto &kv : entries_) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    entries_.emplace_back(key, value);
  }

  void input(const std::string &name, const std::string &path) {
    set("input." + name, path);
    set("input." + name + ".sha256", sha256_file(path));
  }

  void output(const std::string &name, const std::string &path) {
    set("output." + name, path);
    set("output." + name + ".sha256", sha256_file(path));
  }

  void write() const {
    std::string text;
    for (const auto &[k, v] : entries_) {
      std::string flat = v;
      std::replace(flat.begin(), flat.end(), '\n', ' ');
      text += k + ": " + flat + "\n";
    }
    write_file_atomic(path_, text);
  }

  void finish(bool success, const std::string &error = {}) {
    set("status", success ? "ok" : "failed");
    set("finished", utc_now());
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    set("elapsed_seconds", io::format_double(s));
    if (!error.empty()) {
      set("error", error);
    }
    write();
  }

private:
  std::string path_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Owns the manifest of the running command so failures can still finalise it.
struct RunContext {
  std::optional<Manifest> manifest;
  std::string config_file;
};

// ---------------------------------------------------------------- options

struct InputOptions {
  std::string path;
  std::string labels; // "cells.txt,genes.txt" for MatrixMarket input
  bool transpose = false;

  void add_to(CLI::App *app, bool required) {
    auto *in = app->add_option("--in", path,
                               "Expression matrix: dense CSV or MatrixMarket (.mtx)");
    if (required) {
      in->required();
    }
    app->add_option("--labels", labels,
                    "Comma-separated cell and gene label files for MatrixMarket input");
    app->add_flag("--transpose", transpose,
                  "MatrixMarket file is genes x cells (rows are genes)");
  }

  bool is_matrix_market() const {
    const auto ext = fs::path(path).extension().string();
    return ext == ".mtx" || ext == ".mm";
  }

  ExpressionMatrix load() const {
    io::ExpressionSource src;
    src.path = path;
    src.transpose = transpose;
    if (is_matrix_market()) {
      src.format = io::ExpressionFormat::matrix_market;
      const auto parts = io::split(labels, ',');
      require(parts.size() == 2 && !parts[0].empty() && !parts[1].empty(),
              ErrorKind::configuration,
              "MatrixMarket input needs --labels cells.txt,genes.txt");
      src.cell_labels = parts[0];
      src.gene_labels = parts[1];
    }
    return io::load_expression(src);
  }

  void record(Manifest &m) const {
    m.input("expression", path);
    if (is_matrix_market() && !labels.empty()) {
      const auto parts = io::split(labels, ',');
      if (parts.size() == 2) {
        m.input("cell_labels", parts[0]);
        m.input("gene_labels", parts[1]);
      }
    }
  }
};

/// Every option of a subcommand as config.<name>: value.
inline void record_options(Manifest &m, const CLI::App *app) {
  for (const CLI::Option *opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") {
      continue;
    }
    std::string value;
    if (opt->get_expected_min() == 0) {
      value = opt->count() > 0 ? "true" : "false";
    } else if (opt->count() > 0) {
      for (const auto &r : opt->results()) {
        value += (value.empty() ? "" : ",") + r;
      }
    } else {
      value = opt->get_default_str();
    }
    m.set("config." + name, value);
  }
}

inline Manifest &open_manifest(RunContext &ctx, const std::string &dir,
                               const std::string &command, const CLI::App *app) {
  auto &m = ctx.manifest.emplace((fs::path(dir) / "manifest.txt").string(), command);
  record_options(m, app);
  if (!ctx.config_file.empty()) {
    m.input("config", ctx.config_file);
  }
  return m;
}

inline std::vector<std::string> split_list(const std::string &s) {
  std::vector<std::string> out;
  if (s.empty()) {
    return out;
  }
  for (const auto &p : io::split(s, ',')) {
    out.push_back(std::string(io::trim(p)));
  }
  return out;
}

inline std::vector<std::string> read_gene_list(const std::string &path) {
  std::vector<std::string> genes;
  for (const auto &line : io::read_lines(path)) {
    const auto t = io::trim(line);
    if (!t.empty() && t.front() != '#') {
      genes.emplace_back(t);
    }
  }
  return genes;
}

inline std::string dim_name(Index q, DimensionRole role) {
  return "x" + std::to_string(q) + "_" + role_name(role);
}

inline std::vector<DimensionRole> roles_of(const Checkpoint &c) {
  return c.roles.size() == static_cast<std::size_t>(c.state.q())
             ? c.roles
             : dimension_roles(c.state.q(), false);
}

// ------------------------------------------------------------- preprocess

struct PreprocessArgs {
  InputOptions input;
  Index hvg = 5000;
  std::string out;
  std::string format = "csv";
};

inline int cmd_preprocess(RunContext &ctx, const PreprocessArgs &a, const CLI::App *app,
                          std::ostream &out, std::ostream &err) {
  require(a.hvg > 0, ErrorKind::configuration,
          "--hvg must be a positive gene count, got " + std::to_string(a.hvg));
  fs::create_directories(a.out);
  auto &manifest = open_manifest(ctx, a.out, "preprocess", app);
  a.input.record(manifest);
  manifest.write();

  Warnings warnings;
  const ExpressionMatrix raw = a.input.load();
  const ExpressionMatrix processed = preprocess(raw, a.hvg, &warnings);
  for (const auto &w : warnings.messages) {
    err << "warning: " << w << '\n';
  }
  manifest.set("warnings", std::to_string(warnings.messages.size()));
  manifest.set("cells", std::to_string(processed.rows()));
  manifest.set("genes", std::to_string(processed.cols()));

  if (a.format == "mtx") {
    const auto mtx = (fs::path(a.out) / "matrix.mtx").string();
    const auto cells = (fs::path(a.out) / "cells.txt").string();
    const auto genes = (fs::path(a.out) / "genes.txt").string();
    io::write_matrix_market(mtx, cells, genes, processed);
    manifest.output("matrix", mtx);
    manifest.output("cells", cells);
    manifest.output("genes", genes);
  } else {
    const auto csv = (fs::path(a.out) / "expression.csv").string();
    io::write_dense_csv(csv, processed);
    manifest.output("expression", csv);
  }
  manifest.finish(true);
  out << "preprocessed " << raw.rows() << " x " << raw.cols() << " -> " << processed.rows()
      << " x " << processed.cols() << " into " << a.out << '\n';
  return ok;
}

// -------------------------------------------------------------------- fit

struct FitArgs {
  InputOptions input;
  std::string covariates;
  std::string design;
  std::string severity_col;
  std::string severity_order;
  std::string cc_markers;
  int q = 11;
  Index m = 147;
  Index batch = 200;
  int epochs = 100;
  double lr1 = 0.01;
  std::optional<double> lr2;
  int phase1_epochs = 0;
  bool encoder = false;
  std::string encoder_hidden = "128,32";
  bool encoder_covariates = false;
  std::string zeta = "per-gene";
  std::optional<double> grad_clip;
  bool no_whiten = false;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int checkpoint_every = 0;
  std::string out;
};

struct FitInputs {
  ExpressionMatrix expr;
  DesignMatrix design;
  nlohmann::ordered_json design_encoder = nlohmann::ordered_json::array();
  std::optional<Vector> severity;
};

inline FitInputs load_fit_inputs(const FitArgs &a) {
  FitInputs in;
  in.expr = a.input.load();
  const auto n = static_cast<std::size_t>(in.expr.rows());
  in.design.values = Matrix(in.expr.rows(), 0);
  const bool need_table = !a.design.empty() || !a.severity_col.empty();
  require(!need_table || !a.covariates.empty(), ErrorKind::configuration,
          "--design and --severity-col need --covariates");
  if (!need_table) {
    return in;
  }
  const CovariateTable table =
      io::read_covariates_csv(a.covariates).aligned_to(in.expr.cell_ids());
  if (!a.design.empty()) {
    const auto encoder = DesignEncoder::fit(table, parse_design_spec(a.design));
    in.design = encoder.transform(table);
    in.design_encoder = encoder.to_json();
  }
  if (!a.severity_col.empty()) {
    const auto &vals = table.column(a.severity_col);
    require(vals.size() == n, ErrorKind::dimension_mismatch, "severity column length");
    in.severity = encode_severity(vals, split_list(a.severity_order));
  }
  return in;
}

inline std::vector<Index> parse_hidden(const std::string &s) {
  std::vector<Index> widths;
  for (const auto &w : split_list(s)) {
    double v = 0.0;
    require(io::parse_double(w, v) && v >= 1.0 && v == std::floor(v),
            ErrorKind::configuration, "invalid encoder width '" + w + "'");
    widths.push_back(static_cast<Index>(v));
  }
  return widths;
}

inline int cmd_fit(RunContext &ctx, const FitArgs &a, const CLI::App *app,
                   std::ostream &out, std::ostream &) {
  require(a.zeta == "per-gene" || a.zeta == "shared", ErrorKind::configuration,
          "--zeta must be per-gene or shared");
  fs::create_directories(a.out);
  auto &manifest = open_manifest(ctx, a.out, "fit", app);
  manifest.set("seed", std::to_string(a.seed));
  a.input.record(manifest);
  if (!a.covariates.empty()) {
    manifest.input("covariates", a.covariates);
  }
  if (!a.cc_markers.empty()) {
    manifest.input("cc_markers", a.cc_markers);
  }
  manifest.write();

  const FitInputs in = load_fit_inputs(a);
  InitOptions init;
  init.q = a.q;
  init.m = a.m;
  init.seed = a.seed;
  init.extra_init = in.severity;
  init.encoder = a.encoder;
  init.encoder_hidden = parse_hidden(a.encoder_hidden);
  init.encoder_appends_covariates = a.encoder_covariates;
  init.zeta_mode = a.zeta == "shared" ? ZetaMode::shared : ZetaMode::per_gene;
  if (!a.cc_markers.empty()) {
    init.cc_markers = read_gene_list(a.cc_markers);
  }
  const ModelState start = initialize(in.expr, in.design.values, init);

  TrainConfig cfg;
  cfg.lr_phase1 = a.lr1;
  cfg.lr_phase2 = a.lr2.value_or(a.lr1);
  cfg.phase1_epochs = a.phase1_epochs;
  cfg.total_epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.grad_clip = a.grad_clip;
  cfg.whiten_variational = !a.no_whiten;
  cfg.threads = a.threads;
  cfg.checkpoint_every = a.checkpoint_every;

  // Everything that determines the result; paths and thread count excluded so
  // identical runs give identical checkpoints wherever they are written.
  nlohmann::ordered_json config;
  config["q"] = a.q;
  config["m"] = a.m;
  config["batch_size"] = a.batch;
  config["epochs"] = a.epochs;
  config["lr_phase1"] = cfg.lr_phase1;
  config["lr_phase2"] = cfg.lr_phase2;
  config["phase1_epochs"] = a.phase1_epochs;
  config["seed"] = a.seed;
  config["encoder"] = a.encoder;
  config["encoder_hidden"] = init.encoder_hidden;
  config["encoder_covariates"] = a.encoder_covariates;
  config["zeta"] = a.zeta;
  config["design"] = a.design;
  config["severity_col"] = a.severity_col;
  config["cc_markers"] = init.cc_markers;
  config["whiten_variational"] = !a.no_whiten;
  config["grad_clip"] = a.grad_clip ? nlohmann::ordered_json(*a.grad_clip)
                                    : nlohmann::ordered_json(nullptr);

  auto make_checkpoint = [&](const ModelState &s) {
    Checkpoint c;
    c.state = s;
    c.cell_ids = in.expr.cell_ids();
    c.gene_ids = in.expr.gene_ids();
    c.design_labels = in.design.labels;
    c.design_encoder = in.design_encoder;
    c.roles = dimension_roles(a.q, in.severity.has_value());
    c.training_phi = in.design.values;
    c.config = config;
    return c;
  };

  const Matrix y = in.expr.dense();
  auto on_checkpoint = [&](int epoch, const ModelState &s) {
    const auto path = (fs::path(a.out) / ("checkpoint-epoch-" + std::to_string(epoch) +
                                          ".gplvm"))
                          .string();
    write_file_atomic(path, serialize_checkpoint(make_checkpoint(s)));
  };
  auto [state, trace] = fit(y, in.design.values, start, cfg, on_checkpoint);

  const auto ckpt_path = (fs::path(a.out) / "checkpoint.gplvm").string();
  write_file_atomic(ckpt_path, serialize_checkpoint(make_checkpoint(state)));
  const auto trace_path = (fs::path(a.out) / "trace.jsonl").string();
  {
    std::ostringstream os;
    write_trace(os, trace);
    write_file_atomic(trace_path, os.str());
  }
  const double final_elbo = elbo_full(y, in.design.values, state).total;
  manifest.set("final_elbo", io::format_double(final_elbo));
  manifest.set("steps", std::to_string(trace.steps.size()));
  manifest.output("checkpoint", ckpt_path);
  manifest.output("trace", trace_path);
  manifest.finish(true);
  out << "fitted " << y.rows() << " cells x " << y.cols() << " genes, Q=" << a.q
      << " M=" << a.m << " P=" << in.design.values.cols() << ", " << trace.steps.size()
      << " steps, final ELBO " << final_elbo << '\n';
  return ok;
}

// -------------------------------------------------------------- transform

struct TransformArgs {
  std::string checkpoint;
  InputOptions input;
  std::string covariates;
  std::string out;
};

/// Expression columns reordered to the checkpoint's genes.
inline Matrix align_genes(const ExpressionMatrix &m, const std::vector<std::string> &genes) {
  Matrix y(m.rows(), static_cast<Index>(genes.size()));
  std::vector<std::string> missing;
  for (std::size_t k = 0; k < genes.size(); ++k) {
    const Index j = m.gene_index(genes[k]);
    if (j < 0) {
      missing.push_back(genes[k]);
    } else {
      y.col(static_cast<Index>(k)) = m.column(j);
    }
  }
  if (!missing.empty()) {
    std::string msg = "genes of the checkpoint missing from the input:";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 10); ++i) {
      msg += " " + missing[i];
    }
    throw Error(ErrorKind::configuration, msg);
  }
  return y;
}

inline int cmd_transform(RunContext &ctx, const TransformArgs &a, const CLI::App *app,
                         std::ostream &out, std::ostream &) {
  fs::create_directories(a.out);
  auto &manifest = open_manifest(ctx, a.out, "transform", app);
  manifest.input("checkpoint", a.checkpoint);
  if (!a.input.path.empty()) {
    a.input.record(manifest);
  }
  manifest.write();

  const std::string bytes = read_file(a.checkpoint);
  const std::string hash = sha256_hex(bytes);
  const Checkpoint c = deserialize_checkpoint(bytes, a.checkpoint);
  const ModelState &s = c.state;

  Matrix latents;
  std::vector<std::string> cells;
  if (a.input.path.empty()) {
    latents = s.x;
    cells = c.cell_ids;
  } else {
    const ExpressionMatrix m = a.input.load();
    cells = m.cell_ids();
    if (s.encoder) {
      const Matrix y = align_genes(m, c.gene_ids);
      Matrix phi(y.rows(), s.p());
      if (s.encoder_appends_covariates && s.p() > 0) {
        require(!a.covariates.empty(), ErrorKind::configuration,
                "this encoder reads covariates; pass --covariates");
        const auto table = io::read_covariates_csv(a.covariates).aligned_to(cells);
        phi = DesignEncoder::from_json(c.design_encoder).transform(table).values;
      }
      latents = detail::encoder_means(s, y, phi);
    } else {
      std::unordered_map<std::string, Index> pos;
      for (std::size_t i = 0; i < c.cell_ids.size(); ++i) {
        pos.emplace(c.cell_ids[i], static_cast<Index>(i));
      }
      std::vector<std::string> unseen;
      latents.resize(static_cast<Index>(cells.size()), s.q());
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto it = pos.find(cells[i]);
        if (it == pos.end()) {
          unseen.push_back(cells[i]);
        } else {
          latents.row(static_cast<Index>(i)) = s.x.row(it->second);
        }
      }
      if (!unseen.empty()) {
        std::string msg = "checkpoint holds point-estimate latents and cannot embed " +
                          std::to_string(unseen.size()) +
                          " unseen cells (first: " + unseen.front() +
                          "); refit with --encoder to transform new cells";
        throw Error(ErrorKind::unsupported, msg);
      }
    }
  }

  const auto roles = roles_of(c);
  const auto path = (fs::path(a.out) / "latents.csv").string();
  {
    auto f = io::open_output(path);
    io::write_hash_header(f, hash);
    f << "# dimension_roles:";
    for (auto r : roles) {
      f << ' ' << role_name(r);
    }
    f << "\n# inverse_lengthscale_ranking:";
    for (Index q : rank_dimensions(s.spec)) {
      f << ' ' << dim_name(q, roles[static_cast<std::size_t>(q)]) << '='
        << io::format_double(1.0 / s.spec.lengthscales[q]);
    }
    f << "\ncell_id";
    for (Index q = 0; q < s.q(); ++q) {
      f << ',' << dim_name(q, roles[static_cast<std::size_t>(q)]);
    }
    f << '\n';
    for (Index i = 0; i < latents.rows(); ++i) {
      f << cells[static_cast<std::size_t>(i)];
      for (Index q = 0; q < latents.cols(); ++q) {
        f << ',' << io::format_double(latents(i, q));
      }
      f << '\n';
    }
  }
  manifest.output("latents", path);
  manifest.finish(true);
  out << "wrote " << latents.rows() << " x " << latents.cols() << " latents to " << path
      << '\n';
  return ok;
}

// ------------------------------------------------------------------ sweep

struct SweepArgs {
  std::string checkpoint;
  std::optional<Index> dim;
  std::optional<double> grid_min;
  std::optional<double> grid_max;
  int grid_points = 25;
  Index top = 20;
  std::string out;
};

inline int cmd_sweep(RunContext &ctx, const SweepArgs &a, const CLI::App *app,
                     std::ostream &out, std::ostream &) {
  require(a.grid_points >= 1, ErrorKind::configuration, "--grid-points must be positive");
  fs::create_directories(a.out);
  auto &manifest = open_manifest(ctx, a.out, "sweep", app);
  manifest.input("checkpoint", a.checkpoint);
  manifest.write();

  const std::string bytes = read_file(a.checkpoint);
  const Checkpoint c = deserialize_checkpoint(bytes, a.checkpoint);
  const ModelState &s = c.state;
  const auto roles = roles_of(c);
  Index dim = 0;
  if (a.dim) {
    dim = *a.dim;
  } else {
    const auto it = std::find(roles.begin(), roles.end(), DimensionRole::extra);
    if (it != roles.end()) {
      dim = static_cast<Index>(it - roles.begin());
    } else {
      const auto ranked = rank_dimensions(s.spec);
      require(!ranked.empty(), ErrorKind::configuration,
              "no SE-ARD dimension to sweep; pass --dim");
      dim = ranked.front();
    }
  }
  require(dim >= 0 && dim < s.q(), ErrorKind::out_of_range,
          "--dim " + std::to_string(dim) + " outside [0, " + std::to_string(s.q()) + ")");
  const double lo = a.grid_min.value_or(s.x.col(dim).minCoeff());
  const double hi = a.grid_max.value_or(s.x.col(dim).maxCoeff());
  std::vector<double> grid;
  for (int i = 0; i < a.grid_points; ++i) {
    grid.push_back(a.grid_points == 1 ? lo : lo + (hi - lo) * i / (a.grid_points - 1));
  }
  const auto result = severity_sweep(s, dim, grid, default_baseline(s, c.training_phi), a.top);
  const auto path = (fs::path(a.out) / "sweep.csv").string();
  io::write_sweep_csv(path, sha256_hex(bytes), c.gene_ids, result);
  manifest.set("sweep_dim", dim_name(dim, roles[static_cast<std::size_t>(dim)]));
  manifest.output("sweep", path);
  manifest.finish(true);
  out << "swept " << dim_name(dim, roles[static_cast<std::size_t>(dim)]) << " over "
      << grid.size() << " points; top gene "
      << (result.top.empty() ? std::string("-")
                             : c.gene_ids[static_cast<std::size_t>(result.top[0].gene)])
      << '\n';
  return ok;
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint;
  std::string out;
  std::string covariates;
  std::string label_col;
  Index k = 100;
  std::string dims;
  InputOptions input;
  std::string signature;
  Index bins = 25;
  Index background = 50;
  std::uint64_t seed = 0;
  std::string mask_col;
  std::string mask_values;
};

inline int cmd_eval(RunContext &ctx, const EvalArgs &a, const CLI::App *app,
                    std::ostream &out, std::ostream &) {
  const bool purity = !a.label_col.empty();
  const bool signature = !a.signature.empty();
  require(purity || signature, ErrorKind::configuration,
          "nothing to evaluate: pass --label-col for KNN purity and/or --signature");
  require(!purity || !a.covariates.empty(), ErrorKind::configuration,
          "--label-col needs --covariates");
  require(!signature || !a.input.path.empty(), ErrorKind::configuration,
          "--signature needs --in with the expression matrix");
  fs::create_directories(a.out);
  auto &manifest = open_manifest(ctx, a.out, "eval", app);
  manifest.input("checkpoint", a.checkpoint);
  if (!a.covariates.empty()) {
    manifest.input("covariates", a.covariates);
  }
  if (signature) {
    manifest.input("signature", a.signature);
    a.input.record(manifest);
  }
  manifest.write();

  const std::string bytes = read_file(a.checkpoint);
  const std::string hash = sha256_hex(bytes);
  const Checkpoint c = deserialize_checkpoint(bytes, a.checkpoint);
  const ModelState &s = c.state;
  const auto roles = roles_of(c);

  std::vector<Index> dims;
  for (const auto &d : split_list(a.dims)) {
    double v = -1.0;
    require(io::parse_double(d, v) && v >= 0 && v < s.q() && v == std::floor(v),
            ErrorKind::configuration, "invalid --dims entry '" + d + "'");
    dims.push_back(static_cast<Index>(v));
  }
  if (dims.empty()) {
    for (Index q = 0; q < s.q(); ++q) {
      dims.push_back(q);
    }
  }
  Matrix latents(s.num_cells(), static_cast<Index>(dims.size()));
  std::vector<std::string> names;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    latents.col(static_cast<Index>(k)) = s.x.col(dims[k]);
    names.push_back(dim_name(dims[k], roles[static_cast<std::size_t>(dims[k])]));
  }

  std::optional<CovariateTable> table;
  if (!a.covariates.empty()) {
    table = io::read_covariates_csv(a.covariates).aligned_to(c.cell_ids);
  }
  if (purity) {
    const Vector p = knn_purity(latents, table->column(a.label_col), a.k);
    const auto path = (fs::path(a.out) / "purity.csv").string();
    io::write_purity_csv(path, hash, c.cell_ids, p);
    manifest.set("mean_purity", io::format_double(p.mean()));
    manifest.output("purity", path);
    out << "mean KNN purity (k=" << a.k << ", " << a.label_col << "): " << p.mean() << '\n';
  }
  if (signature) {
    const ExpressionMatrix m = a.input.load();
    require(m.cell_ids() == c.cell_ids, ErrorKind::configuration,
            "--in must hold the checkpoint's cells in the same order");
    SignatureOptions opt;
    opt.n_bins = a.bins;
    opt.n_background = a.background;
    opt.seed = a.seed;
    const auto score = signature_score(m, read_gene_list(a.signature), opt);
    std::vector<bool> mask;
    if (!a.mask_col.empty()) {
      require(table.has_value(), ErrorKind::configuration, "--mask-col needs --covariates");
      const auto keep = split_list(a.mask_values);
      for (const auto &v : table->column(a.mask_col)) {
        mask.push_back(std::find(keep.begin(), keep.end(), v) != keep.end());
      }
    }
    const auto corr = lv_signature_correlation(latents, score.score, mask);
    const auto path = (fs::path(a.out) / "correlation.csv").string();
    io::write_correlation_csv(path, hash, names, corr);
    manifest.output("correlation", path);
    for (Index q = 0; q < corr.r.size(); ++q) {
      out << names[static_cast<std::size_t>(q)] << " r=" << corr.r[q] << '\n';
    }
  }
  manifest.finish(true);
  return ok;
}

// ------------------------------------------------------------------ check

struct CheckArgs {
  std::uint64_t seed = 0;
  int instances = 0;
  bool inject_fault = false;
  std::string out;
};

inline int cmd_check(RunContext &ctx, const CheckArgs &a, const CLI::App *app,
                     std::ostream &out, std::ostream &) {
  auto &manifest = ctx.manifest;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    open_manifest(ctx, a.out, "check", app);
    manifest->set("seed", std::to_string(a.seed));
    manifest->write();
  }
  const auto results = selfcheck::run_all({a.seed, a.instances, a.inject_fault});
  std::string report;
  bool all = true;
  for (const auto &r : results) {
    report += selfcheck::format_result(r) + '\n';
    all = all && r.passed;
  }
  out << report;
  out << (all ? "all checks passed" : "some checks FAILED") << '\n';
  if (manifest) {
    const auto path = (fs::path(a.out) / "report.txt").string();
    write_file_atomic(path, report);
    manifest->output("report", path);
    manifest->finish(all, all ? "" : "self-check failed");
    manifest.reset();
  }
  return all ? ok : internal_error;
}

// ---------------------------------------------------------------- driver

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
  case ErrorKind::non_finite:
  case ErrorKind::ill_conditioned:
    return internal_error;
  default:
    return user_error;
  }
}

inline int run(const std::vector<std::string> &argv, std::ostream &out, std::ostream &err) {
  CLI::App app{"Scalable GPLVM with covariate-augmented kernel", "gplvm-cli"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  // One TOML/INI file for all commands: [fit], [sweep], ... sections.
  // Flags given on the command line win over the file.
  app.set_config("--config", "", "Configuration file with one section per command");
  app.fallthrough();

  PreprocessArgs pre;
  auto *c_pre = app.add_subcommand("preprocess", "Normalise, log-transform and select HVGs");
  pre.input.add_to(c_pre, true);
  c_pre->add_option("--hvg", pre.hvg, "Number of highly variable genes to keep")
      ->capture_default_str();
  c_pre->add_option("--out", pre.out, "Output directory")->required();
  c_pre->add_option("--format", pre.format, "Output format")
      ->check(CLI::IsMember({"csv", "mtx"}))
      ->capture_default_str();

  FitArgs fa;
  auto *c_fit = app.add_subcommand("fit", "Train the model by minibatch SVI");
  fa.input.add_to(c_fit, true);
  c_fit->add_option("--covariates", fa.covariates, "Covariate CSV keyed by cell_id");
  c_fit->add_option("--design", fa.design,
                    "Design columns, e.g. batch,age:num (categorical unless :num)");
  c_fit->add_option("--severity-col", fa.severity_col,
                    "Covariate column used to initialise an extra latent dimension");
  c_fit->add_option("--severity-order", fa.severity_order,
                    "Comma-separated severity levels, lowest first");
  c_fit->add_option("--cc-markers", fa.cc_markers, "Cell-cycle marker genes, one per line");
  c_fit->add_option("--q", fa.q, "Latent dimensions (1 periodic + SE-ARD [+ severity])")
      ->capture_default_str();
  c_fit->add_option("--m", fa.m, "Inducing points")->capture_default_str();
  c_fit->add_option("--batch", fa.batch, "Minibatch size")->capture_default_str();
  c_fit->add_option("--epochs", fa.epochs, "Training epochs")->capture_default_str();
  c_fit->add_option("--lr1", fa.lr1, "Learning rate (phase 1, or whole run)")
      ->capture_default_str();
  c_fit->add_option("--lr2", fa.lr2, "Phase-2 learning rate (default: --lr1)");
  c_fit->add_option("--phase1-epochs", fa.phase1_epochs,
                    "Epochs with latents frozen at their initialisation")
      ->capture_default_str();
  c_fit->add_flag("--encoder", fa.encoder, "Amortised latents via an encoder network");
  c_fit->add_option("--encoder-hidden", fa.encoder_hidden, "Encoder hidden widths")
      ->capture_default_str();
  c_fit->add_flag("--encoder-covariates", fa.encoder_covariates,
                  "Append design columns to the encoder input");
  c_fit->add_option("--zeta", fa.zeta, "Fixed-effect weights per gene or shared")
      ->check(CLI::IsMember({"per-gene", "shared"}))
      ->capture_default_str();
  c_fit->add_option("--grad-clip", fa.grad_clip, "Clip the global gradient norm");
  c_fit->add_flag("--no-whiten", fa.no_whiten,
                  "Plain Adam on (m, C) instead of whitened coordinates for q(u)");
  c_fit->add_option("--seed", fa.seed, "Random seed")->capture_default_str();
  c_fit->add_option("--threads", fa.threads, "Worker threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_fit->add_option("--checkpoint-every", fa.checkpoint_every,
                    "Also write a checkpoint every k epochs")
      ->capture_default_str();
  c_fit->add_option("--out", fa.out, "Output directory")->required();

  TransformArgs ta;
  auto *c_tr = app.add_subcommand("transform", "Export latent coordinates");
  c_tr->add_option("--checkpoint", ta.checkpoint, "Checkpoint file")->required();
  ta.input.add_to(c_tr, false);
  c_tr->add_option("--covariates", ta.covariates, "Covariates for encoder inputs");
  c_tr->add_option("--out", ta.out, "Output directory")->required();

  SweepArgs sa;
  auto *c_sw = app.add_subcommand("sweep", "Vary one latent dimension and rank genes");
  c_sw->add_option("--checkpoint", sa.checkpoint, "Checkpoint file")->required();
  c_sw->add_option("--dim", sa.dim,
                   "Dimension to sweep (default: severity, else top-ranked SE-ARD)");
  c_sw->add_option("--grid-min", sa.grid_min, "Grid start (default: min of the dimension)");
  c_sw->add_option("--grid-max", sa.grid_max, "Grid end (default: max of the dimension)");
  c_sw->add_option("--grid-points", sa.grid_points, "Grid size")->capture_default_str();
  c_sw->add_option("--top", sa.top, "Genes to report")->capture_default_str();
  c_sw->add_option("--out", sa.out, "Output directory")->required();

  EvalArgs ea;
  auto *c_ev = app.add_subcommand("eval", "KNN purity and signature correlations");
  c_ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  c_ev->add_option("--out", ea.out, "Output directory")->required();
  c_ev->add_option("--covariates", ea.covariates, "Covariate CSV keyed by cell_id");
  c_ev->add_option("--label-col", ea.label_col, "Label column for KNN purity");
  c_ev->add_option("--k", ea.k, "Neighbours for KNN purity")->capture_default_str();
  c_ev->add_option("--dims", ea.dims, "Latent dimensions to use (default: all)");
  ea.input.add_to(c_ev, false);
  c_ev->add_option("--signature", ea.signature, "Signature genes, one per line");
  c_ev->add_option("--bins", ea.bins, "Expression bins for the background")
      ->capture_default_str();
  c_ev->add_option("--background", ea.background, "Background genes per signature gene")
      ->capture_default_str();
  c_ev->add_option("--seed", ea.seed, "Background sampling seed")->capture_default_str();
  c_ev->add_option("--mask-col", ea.mask_col, "Restrict correlations to cells where ...");
  c_ev->add_option("--mask-values", ea.mask_values, "... this column takes these values");

  CheckArgs ca;
  auto *c_ck = app.add_subcommand("check", "Run the numerical self-checks");
  c_ck->add_option("--seed", ca.seed, "Instance seed")->capture_default_str();
  c_ck->add_option("--instances", ca.instances, "Instances per check (0: defaults)")
      ->capture_default_str();
  c_ck->add_option("--out", ca.out, "Optional directory for report and manifest");
  c_ck->add_flag("--inject-fault", ca.inject_fault)->group("");

  try {
    std::vector<std::string> args(argv.rbegin(), argv.rend());
    args.pop_back(); // program name
    app.parse(args);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : user_error;
  }

  RunContext ctx;
  if (const auto *cfg = app.get_config_ptr(); cfg != nullptr && cfg->count() > 0) {
    ctx.config_file = cfg->as<std::string>();
  }
  auto fail = [&](int code, const std::string &what) {
    if (ctx.manifest) {
      try {
        ctx.manifest->finish(false, what);
      } catch (const std::exception &) {
        // the original error is the one worth reporting
      }
    }
    return code;
  };
  try {
    if (*c_pre) {
      return cmd_preprocess(ctx, pre, c_pre, out, err);
    }
    if (*c_fit) {
      return cmd_fit(ctx, fa, c_fit, out, err);
    }
    if (*c_tr) {
      return cmd_transform(ctx, ta, c_tr, out, err);
    }
    if (*c_sw) {
      return cmd_sweep(ctx, sa, c_sw, out, err);
    }
    if (*c_ev) {
      return cmd_eval(ctx, ea, c_ev, out, err);
    }
    return cmd_check(ctx, ca, c_ck, out, err);
  } catch (const Error &e) {
    err << "error: " << e.what() << '\n';
    return fail(exit_code_for(e.kind()), e.what());
  } catch (const fs::filesystem_error &e) {
    err << "error: " << e.what() << '\n';
    return fail(user_error, e.what());
  } catch (const std::exception &e) {
    err << "internal error: " << e.what() << '\n';
    return fail(internal_error, e.what());
  }
}

} // namespace gplvm::cli
