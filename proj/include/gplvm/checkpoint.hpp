#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gplvm/error.hpp"
#include "gplvm/init.hpp"
#include "gplvm/model.hpp"

namespace gplvm {

inline constexpr const char *kCheckpointFormat = "gplvm-v1";

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as little-endian float64");

/// Model state plus what is needed to reuse it: labels, the fitted design
/// encoding, the training design matrix and the role of each latent dim.
struct Checkpoint {
  ModelState state;
  std::vector<std::string> cell_ids;
  std::vector<std::string> gene_ids;
  std::vector<std::string> design_labels;
  nlohmann::ordered_json design_encoder = nlohmann::ordered_json::array();
  std::vector<DimensionRole> roles;
  Matrix training_phi;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

namespace detail {

inline nlohmann::ordered_json role_json(const std::vector<DimensionRole> &roles) {
  auto arr = nlohmann::ordered_json::array();
  for (auto r : roles) {
    arr.push_back(role_name(r));
  }
  return arr;
}

inline DimensionRole role_from(const std::string &s) {
  if (s == "periodic") {
    return DimensionRole::periodic;
  }
  if (s == "rbf") {
    return DimensionRole::rbf;
  }
  require(s == "severity", ErrorKind::parse, "unknown dimension role '" + s + "'");
  return DimensionRole::extra;
}

struct BlobWriter {
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::string bytes;

  void add(const std::string &name, Index rows, Index cols, const double *data,
           Index count) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["rows"] = rows;
    e["cols"] = cols;
    e["offset"] = bytes.size();
    table.push_back(std::move(e));
    bytes.append(reinterpret_cast<const char *>(data),
                 static_cast<std::size_t>(count) * sizeof(double));
  }
  void add(const std::string &name, const Matrix &m) {
    add(name, m.rows(), m.cols(), m.data(), m.size());
  }
  void add_lower(const std::string &name, const Matrix &m) {
    std::vector<double> packed;
    packed.reserve(static_cast<std::size_t>(m.rows() * (m.rows() + 1) / 2));
    for (Index j = 0; j < m.cols(); ++j) {
      for (Index i = j; i < m.rows(); ++i) {
        packed.push_back(m(i, j));
      }
    }
    add(name, m.rows(), m.cols(), packed.data(), static_cast<Index>(packed.size()));
  }
};

struct BlobReader {
  const nlohmann::ordered_json &table;
  const std::string &bytes;
  std::size_t next = 0;

  const nlohmann::ordered_json &entry(const std::string &name) {
    require(next < table.size(), ErrorKind::parse,
            "checkpoint is missing blob '" + name + "'");
    const auto &e = table[next++];
    require(e.at("name").get<std::string>() == name, ErrorKind::parse,
            "checkpoint blob order mismatch: expected '" + name + "', found '" +
                e.at("name").get<std::string>() + "'");
    return e;
  }

  void copy(const nlohmann::ordered_json &e, double *dst, Index count) {
    const auto offset = e.at("offset").get<std::size_t>();
    const std::size_t len = static_cast<std::size_t>(count) * sizeof(double);
    require(offset + len <= bytes.size(), ErrorKind::parse,
            "checkpoint blob '" + e.at("name").get<std::string>() + "' is truncated");
    if (len > 0) {
      std::memcpy(dst, bytes.data() + offset, len);
    }
  }

  Matrix matrix(const std::string &name) {
    const auto &e = entry(name);
    Matrix m(e.at("rows").get<Index>(), e.at("cols").get<Index>());
    copy(e, m.data(), m.size());
    return m;
  }
  Vector vector(const std::string &name) {
    Matrix m = matrix(name);
    return Eigen::Map<Vector>(m.data(), m.size());
  }
  Matrix lower(const std::string &name) {
    const auto &e = entry(name);
    const Index n = e.at("rows").get<Index>();
    std::vector<double> packed(static_cast<std::size_t>(n * (n + 1) / 2));
    copy(e, packed.data(), static_cast<Index>(packed.size()));
    Matrix m = Matrix::Zero(n, n);
    std::size_t k = 0;
    for (Index j = 0; j < n; ++j) {
      for (Index i = j; i < n; ++i) {
        m(i, j) = packed[k++];
      }
    }
    return m;
  }
};

} // namespace detail

/// Serialised form: a magic line, one line of JSON header, then raw
/// little-endian float64 blobs at the offsets listed in the header. Output is
/// a pure function of the checkpoint contents.
inline std::string serialize_checkpoint(const Checkpoint &c) {
  const ModelState &s = c.state;
  s.validate();
  detail::BlobWriter w;
  w.add("x", s.x);
  w.add("z", s.z.values);
  if (s.z.block_form()) {
    Vector mask(s.z.count());
    for (Index i = 0; i < s.z.count(); ++i) {
      mask[i] = s.z.is_sentinel(i) ? 1.0 : 0.0;
    }
    w.add("z_sentinel", mask);
  }
  w.add("lengthscales", s.spec.lengthscales);
  w.add("var_means", s.var_means);
  for (std::size_t d = 0; d < s.var_chol.size(); ++d) {
    w.add_lower("var_chol", s.var_chol[d]);
  }
  w.add("zeta", s.zeta);
  w.add("training_phi", c.training_phi);
  if (s.encoder) {
    const auto &e = *s.encoder;
    for (std::size_t l = 0; l < e.trunk_weights.size(); ++l) {
      w.add("enc_w", e.trunk_weights[l]);
      w.add("enc_b", e.trunk_biases[l]);
    }
    w.add("enc_mean_w", e.mean_weights);
    w.add("enc_mean_b", e.mean_bias);
    w.add("enc_var_w", e.var_weights);
    w.add("enc_var_b", e.var_bias);
  }

  nlohmann::ordered_json h;
  h["format"] = kCheckpointFormat;
  h["n"] = s.num_cells();
  h["d"] = s.num_genes();
  h["q"] = s.q();
  h["p"] = s.p();
  h["m"] = s.num_inducing();
  h["signal_variance"] = s.spec.signal_variance;
  h["linear_scale"] = s.spec.linear_scale;
  h["mean_f"] = s.mean_f;
  h["noise_variance"] = s.noise_variance;
  h["zeta_mode"] = s.zeta_mode == ZetaMode::shared ? "shared" : "per_gene";
  h["block_form"] = s.z.block_form();
  h["dimension_roles"] = detail::role_json(c.roles);
  if (s.encoder) {
    nlohmann::ordered_json e;
    e["input_dim"] = s.encoder->input_dim();
    e["hidden"] = s.encoder->hidden_widths();
    e["appends_covariates"] = s.encoder_appends_covariates;
    h["encoder"] = std::move(e);
  } else {
    h["encoder"] = nullptr;
  }
  h["cell_ids"] = c.cell_ids;
  h["gene_ids"] = c.gene_ids;
  h["design_labels"] = c.design_labels;
  h["design_encoder"] = c.design_encoder;
  h["config"] = c.config;
  h["blobs"] = std::move(w.table);

  std::string out = std::string(kCheckpointFormat) + "\n";
  out += h.dump();
  out += "\n";
  out += w.bytes;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string &bytes,
                                         const std::string &origin = "checkpoint") {
  const std::size_t l1 = bytes.find('\n');
  require(l1 != std::string::npos && bytes.compare(0, l1, kCheckpointFormat) == 0,
          ErrorKind::parse,
          origin + ": not a " + std::string(kCheckpointFormat) + " checkpoint");
  const std::size_t l2 = bytes.find('\n', l1 + 1);
  require(l2 != std::string::npos, ErrorKind::parse, origin + ": truncated header");
  nlohmann::ordered_json h;
  try {
    h = nlohmann::ordered_json::parse(bytes.substr(l1 + 1, l2 - l1 - 1));
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::parse, origin + ": invalid header: " + e.what());
  }
  const std::string payload = bytes.substr(l2 + 1);

  Checkpoint c;
  ModelState &s = c.state;
  try {
    const int q = h.at("q").get<int>();
    const int p = h.at("p").get<int>();
    const Index d = h.at("d").get<Index>();
    detail::BlobReader r{h.at("blobs"), payload};
    s.x = r.matrix("x");
    s.z = InducingInputs(r.matrix("z"), q, p);
    if (h.at("block_form").get<bool>()) {
      const Vector mask = r.vector("z_sentinel");
      s.z.sentinel.resize(static_cast<std::size_t>(mask.size()));
      for (Index i = 0; i < mask.size(); ++i) {
        s.z.sentinel[static_cast<std::size_t>(i)] = mask[i] != 0.0;
      }
    }
    s.spec = KernelSpec::with_dims(q, p);
    s.spec.lengthscales = r.vector("lengthscales");
    s.spec.signal_variance = h.at("signal_variance").get<double>();
    s.spec.linear_scale = h.at("linear_scale").get<double>();
    s.var_means = r.matrix("var_means");
    for (Index k = 0; k < d; ++k) {
      s.var_chol.push_back(r.lower("var_chol"));
    }
    s.zeta = r.matrix("zeta");
    c.training_phi = r.matrix("training_phi");
    s.mean_f = h.at("mean_f").get<double>();
    s.noise_variance = h.at("noise_variance").get<double>();
    s.zeta_mode = h.at("zeta_mode").get<std::string>() == "shared" ? ZetaMode::shared
                                                                   : ZetaMode::per_gene;
    if (!h.at("encoder").is_null()) {
      const auto &ej = h.at("encoder");
      const auto hidden = ej.at("hidden").get<std::vector<Index>>();
      EncoderParams e = EncoderParams::zeros(ej.at("input_dim").get<Index>(), hidden, q);
      for (std::size_t l = 0; l < hidden.size(); ++l) {
        e.trunk_weights[l] = r.matrix("enc_w");
        e.trunk_biases[l] = r.vector("enc_b");
      }
      e.mean_weights = r.matrix("enc_mean_w");
      e.mean_bias = r.vector("enc_mean_b");
      e.var_weights = r.matrix("enc_var_w");
      e.var_bias = r.vector("enc_var_b");
      s.encoder = std::move(e);
      s.encoder_appends_covariates = ej.at("appends_covariates").get<bool>();
    }
    for (const auto &role : h.at("dimension_roles")) {
      c.roles.push_back(detail::role_from(role.get<std::string>()));
    }
    c.cell_ids = h.at("cell_ids").get<std::vector<std::string>>();
    c.gene_ids = h.at("gene_ids").get<std::vector<std::string>>();
    c.design_labels = h.at("design_labels").get<std::vector<std::string>>();
    c.design_encoder = h.at("design_encoder");
    c.config = h.at("config");
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::parse, origin + ": malformed header: " + e.what());
  }
  s.validate();
  return c;
}

inline void write_checkpoint(const std::string &path, const Checkpoint &c) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::io, "cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::io, "failed writing checkpoint '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

} // namespace gplvm
