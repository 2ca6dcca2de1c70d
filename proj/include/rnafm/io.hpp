#pragma once

// File formats: TSV matrices, JSON documents, the float32 feature container
// and the model checkpoint container.
//
// Both binary containers are laid out as
//   8-byte magic | uint64 little-endian header length | JSON header | payload
// with the payload in row-major little-endian order.

#include "rnafm/conditioning.hpp"
#include "rnafm/data_metrics.hpp"
#include "rnafm/flow_engine.hpp"
#include "rnafm/velocity_network.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace rnafm::io {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

namespace fs = std::filesystem;

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  return out;
}

// ---- TSV --------------------------------------------------------------------

struct LabeledMatrix {
  std::vector<std::string> row_ids;
  std::vector<std::string> col_ids;
  Mat values;
};

// Header: <corner label> then column ids; each row: id then values.
inline LabeledMatrix read_labeled_tsv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  LabeledMatrix m;
  auto header = split_tabs(line);
  if (header.size() < 2) throw ParseError(path.string() + ":1: header needs an id column and at least one column");
  m.col_ids.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_tabs(line);
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (f.size() != header.size())
      throw ParseError(ctx + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    m.row_ids.push_back(f[0]);
    std::vector<double> r;
    r.reserve(f.size() - 1);
    for (std::size_t i = 1; i < f.size(); ++i) r.push_back(parse_double(f[i], ctx));
    rows.push_back(std::move(r));
  }
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.col_ids.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

inline void write_labeled_tsv(const fs::path& path, const std::string& corner, const std::vector<std::string>& row_ids,
                              const std::vector<std::string>& col_ids, const Mat& values) {
  require_shape(static_cast<Eigen::Index>(row_ids.size()) == values.rows() &&
                    static_cast<Eigen::Index>(col_ids.size()) == values.cols(),
                "write_labeled_tsv: label counts differ from matrix shape");
  auto out = open_out(path);
  out << corner;
  for (const auto& c : col_ids) out << '\t' << c;
  out << '\n';
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    out << row_ids[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < values.cols(); ++c) out << '\t' << format_double(values(r, c));
    out << '\n';
  }
}

inline ExpressionMatrix read_expression_tsv(const fs::path& path, ExpressionSpace space) {
  auto m = read_labeled_tsv(path);
  ExpressionMatrix e;
  e.sample_ids = std::move(m.row_ids);
  e.genes = std::move(m.col_ids);
  e.values = std::move(m.values);
  e.space = space;
  return e;
}

inline void write_expression_tsv(const fs::path& path, const ExpressionMatrix& e) {
  write_labeled_tsv(path, "sample_id", e.sample_ids, e.genes, e.values);
}

// Ensemble matrix: header of gene ids, one generated sample per row.
inline void write_ensemble_tsv(const fs::path& path, const std::vector<std::string>& genes, const Mat& samples) {
  require_shape(static_cast<Eigen::Index>(genes.size()) == samples.cols(), "write_ensemble_tsv: gene count");
  auto out = open_out(path);
  for (std::size_t g = 0; g < genes.size(); ++g) out << (g ? "\t" : "") << genes[g];
  out << '\n';
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    for (Eigen::Index c = 0; c < samples.cols(); ++c) out << (c ? "\t" : "") << format_double(samples(r, c));
    out << '\n';
  }
}

inline std::pair<std::vector<std::string>, Mat> read_ensemble_tsv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  auto genes = split_tabs(line);
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_tabs(line);
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    if (f.size() != genes.size()) throw ParseError(ctx + ": field count differs from header");
    std::vector<double> r;
    for (const auto& s : f) r.push_back(parse_double(s, ctx));
    rows.push_back(std::move(r));
  }
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(genes.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < genes.size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return {std::move(genes), std::move(m)};
}

// ---- JSON -------------------------------------------------------------------

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

inline nlohmann::json split_to_json(const std::vector<std::string>& ids, const std::vector<int>& folds) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < ids.size(); ++i) j[ids[i]] = folds[i];
  return j;
}

// ---- binary containers ------------------------------------------------------

namespace detail {

inline void write_header(std::ostream& out, const char (&magic)[9], const nlohmann::json& header) {
  const std::string h = header.dump();
  out.write(magic, 8);
  const std::uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
}

inline nlohmann::json read_header(std::istream& in, const char (&magic)[9], const std::string& source) {
  char m[8];
  if (!in.read(m, 8) || std::memcmp(m, magic, 8) != 0) throw ParseError(source + ": bad container magic");
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1ULL << 32))
    throw ParseError(source + ": truncated header");
  std::string h(len, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw ParseError(source + ": truncated header");
  try {
    return nlohmann::json::parse(h);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source + ": header is not JSON: " + e.what());
  }
}

}  // namespace detail

inline constexpr char kFeatureMagic[9] = "RNAFMF32";
inline constexpr char kCheckpointMagic[9] = "RNAFMCKP";

// Header must carry "d" and either "n_tiles" (tile features) or "k" (slide
// representation); the payload is rows x d float32.
inline void write_feature_container(const fs::path& path, nlohmann::json header, const Mat& values) {
  auto out = open_out(path);
  header["d"] = values.cols();
  detail::write_header(out, kFeatureMagic, header);
  std::vector<float> buf(static_cast<std::size_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(values.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

struct FeatureContainer {
  nlohmann::json header;
  Mat values;
};

inline FeatureContainer read_feature_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  FeatureContainer fc;
  fc.header = detail::read_header(in, kFeatureMagic, path.string());
  if (!fc.header.contains("d")) throw ParseError(path.string() + ": header lacks 'd'");
  const auto d = fc.header["d"].get<Eigen::Index>();
  Eigen::Index rows = 0;
  if (fc.header.contains("k"))
    rows = fc.header["k"].get<Eigen::Index>();
  else if (fc.header.contains("n_tiles"))
    rows = fc.header["n_tiles"].get<Eigen::Index>();
  else
    throw ParseError(path.string() + ": header lacks 'k' or 'n_tiles'");
  std::vector<float> buf(static_cast<std::size_t>(rows * d));
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw ParseError(path.string() + ": truncated payload");
  fc.values.resize(rows, d);
  for (std::size_t i = 0; i < buf.size(); ++i) fc.values.data()[i] = static_cast<double>(buf[i]);
  return fc;
}

inline void write_slide(const fs::path& path, const SlideRepresentation& rep) {
  write_feature_container(path, {{"k", rep.y.rows()}, {"slide_id", rep.slide_id}}, rep.y);
}

inline void write_tiles(const fs::path& path, const TileFeatures& tiles) {
  write_feature_container(path, {{"n_tiles", tiles.features.rows()}, {"slide_id", tiles.slide_id}}, tiles.features);
}

// Loads a condition for one slide: a slide representation is returned as is,
// tile features (binary or TSV) are clustered into k rows.
inline SlideRepresentation load_condition(const fs::path& path, int k) {
  if (path.extension() == ".tsv") {
    auto m = read_labeled_tsv(path);
    return cluster_slide({path.stem().string(), m.values}, k);
  }
  auto fc = read_feature_container(path);
  const std::string id = fc.header.value("slide_id", path.stem().string());
  if (fc.header.contains("k")) return {id, std::move(fc.values)};
  return cluster_slide({id, std::move(fc.values)}, k);
}

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
  nlohmann::json meta;
  NetworkConfig network;
  std::string fingerprint;
  std::vector<std::string> names;
  std::vector<Mat> params;
  TrainState train;
  std::optional<Standardizer> standardizer;
};

inline nlohmann::json standardizer_to_json(const Standardizer& s) {
  std::vector<double> mean(s.mean().data(), s.mean().data() + s.mean().size());
  std::vector<double> sd(s.stddev().data(), s.stddev().data() + s.stddev().size());
  return {{"mean", mean}, {"std", sd}, {"fingerprint", s.fingerprint()}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  auto mean = j.at("mean").get<std::vector<double>>();
  auto sd = j.at("std").get<std::vector<double>>();
  return Standardizer(Eigen::Map<Vec>(mean.data(), static_cast<Eigen::Index>(mean.size())),
                      Eigen::Map<Vec>(sd.data(), static_cast<Eigen::Index>(sd.size())),
                      j.at("fingerprint").get<std::string>());
}

inline void save_checkpoint(const fs::path& path, const VelocityModel& model, const TrainState& state,
                            const Standardizer* standardizer, const nlohmann::json& meta) {
  const auto& ps = model.parameters();
  nlohmann::json header;
  header["format_version"] = 1;
  header["network"] = model.config();
  header["fingerprint"] = model.fingerprint();
  header["meta"] = meta;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ps.size(); ++i)
    tensors.push_back({{"name", ps.name(i)}, {"rows", ps.value(i).rows()}, {"cols", ps.value(i).cols()}});
  header["train"] = {{"epochs_done", state.epochs_done},
                     {"loss_history", state.loss_history},
                     {"adam_step", state.optimizer.step},
                     {"has_optimizer", !state.optimizer.first_moment.empty()}};
  if (standardizer) header["standardizer"] = standardizer_to_json(*standardizer);

  auto out = open_out(path);
  detail::write_header(out, kCheckpointMagic, header);
  auto dump = [&](const std::vector<Mat>& mats) {
    for (const auto& m : mats) out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  };
  dump(ps.values());
  dump(state.ema.empty() ? ps.values() : state.ema);
  if (!state.optimizer.first_moment.empty()) {
    dump(state.optimizer.first_moment);
    dump(state.optimizer.second_moment);
  }
  if (!out) throw ConfigError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  const auto header = detail::read_header(in, kCheckpointMagic, path.string());
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  ck.network = header.at("network").get<NetworkConfig>();
  ck.fingerprint = header.at("fingerprint").get<std::string>();
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  for (const auto& t : header.at("tensors")) {
    ck.names.push_back(t.at("name").get<std::string>());
    shapes.emplace_back(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
  }
  auto read_set = [&](std::vector<Mat>& dst) {
    dst.clear();
    for (auto [r, c] : shapes) {
      Mat m(r, c);
      if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
        throw ParseError(path.string() + ": truncated tensor payload");
      dst.push_back(std::move(m));
    }
  };
  read_set(ck.params);
  read_set(ck.train.ema);
  const auto& tr = header.at("train");
  ck.train.epochs_done = tr.at("epochs_done").get<int>();
  ck.train.loss_history = tr.at("loss_history").get<std::vector<double>>();
  ck.train.optimizer.step = tr.at("adam_step").get<std::uint64_t>();
  if (tr.value("has_optimizer", false)) {
    read_set(ck.train.optimizer.first_moment);
    read_set(ck.train.optimizer.second_moment);
  }
  if (header.contains("standardizer")) ck.standardizer = standardizer_from_json(header["standardizer"]);
  return ck;
}

// Rebuilds the model for `collection` and installs the stored parameters.
// `use_ema` selects the EMA shadow parameters.
inline VelocityModel restore_model(const Checkpoint& ck, std::shared_ptr<const PathwayCollection> collection,
                                   const std::string& expected_fingerprint, bool use_ema) {
  if (ck.fingerprint != expected_fingerprint)
    throw FingerprintError("checkpoint fingerprint " + ck.fingerprint + " does not match pathway collection " +
                           expected_fingerprint);
  VelocityModel model(ck.network, std::move(collection), ck.fingerprint, 0);
  auto& ps = model.parameters();
  if (ps.size() != ck.names.size()) throw FingerprintError("checkpoint parameter layout differs from the model");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.name(i) != ck.names[i]) throw FingerprintError("checkpoint parameter '" + ck.names[i] + "' unexpected");
  }
  return with_parameters(model, use_ema ? ck.train.ema : ck.params);
}

}  // namespace rnafm::io
