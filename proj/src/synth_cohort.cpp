#include "mirror/synth_cohort.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include <Eigen/QR>
#include <json.hpp>

#include "mirror/errors.hpp"
#include "mirror/rng.hpp"

namespace mirror {

namespace {

enum Stream : std::uint64_t {
  kClassMeans = 1,
  kSlideMap = 2,
  kRnaMap = 3,
  kSurvivalWeights = 4,
  kInformativeGenes = 5,
  kSampleBase = 1000,
};

Eigen::MatrixXd gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n(rng);
  return m;
}

Eigen::VectorXd gaussian_vector(Rng& rng, Eigen::Index n, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

std::string base64_encode(const std::string& in) {
  static constexpr char kTable[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (static_cast<std::uint8_t>(in[i]) << 16) | (static_cast<std::uint8_t>(in[i + 1]) << 8) |
                            static_cast<std::uint8_t>(in[i + 2]);
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += kTable[(v >> 6) & 63];
    out += kTable[v & 63];
  }
  if (i < in.size()) {
    std::uint32_t v = static_cast<std::uint8_t>(in[i]) << 16;
    if (i + 1 < in.size()) v |= static_cast<std::uint8_t>(in[i + 1]) << 8;
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += i + 1 < in.size() ? kTable[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw FormatError("ground truth: malformed base64");
  std::string out;
  for (std::size_t i = 0; i < in.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = in[i + static_cast<std::size_t>(j)];
      if (c == '=') {
        ++pad;
        v <<= 6;
        continue;
      }
      const int x = value(c);
      if (x < 0) throw FormatError("ground truth: malformed base64");
      v = (v << 6) | static_cast<std::uint32_t>(x);
    }
    out += static_cast<char>((v >> 16) & 0xff);
    if (pad < 2) out += static_cast<char>((v >> 8) & 0xff);
    if (pad < 1) out += static_cast<char>(v & 0xff);
  }
  return out;
}

std::string encode_f32(const Eigen::MatrixXd& m) {
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c)));
      for (int i = 0; i < 4; ++i) bytes += static_cast<char>((u >> (8 * i)) & 0xff);
    }
  return base64_encode(bytes);
}

Eigen::MatrixXd decode_f32(const std::string& b64, Eigen::Index rows, Eigen::Index cols) {
  const std::string bytes = base64_decode(b64);
  if (bytes.size() != static_cast<std::size_t>(rows * cols * 4)) throw DimensionError("ground truth: block size mismatch");
  Eigen::MatrixXd m(rows, cols);
  std::size_t p = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      std::uint32_t u = 0;
      for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[p++])) << (8 * i);
      m(r, c) = static_cast<double>(std::bit_cast<float>(u));
    }
  return m;
}

Eigen::MatrixXd stack(const SyntheticGroundTruth& gt, Eigen::VectorXd LatentFactors::*field) {
  if (gt.factors.empty()) return {};
  const Eigen::Index d = (gt.factors.front().*field).size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(gt.factors.size()), d);
  for (std::size_t i = 0; i < gt.factors.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = (gt.factors[i].*field).transpose();
  return m;
}

std::string padded_id(char prefix, int i, int width) {
  std::string digits = std::to_string(i);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  return std::string(1, prefix) + digits;
}

}  // namespace

void CohortConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("cohort config: " + m); };
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (n_classes < 1) fail("n_classes must be >= 1");
  if (d_p < 1 || k_genes < 1) fail("d_p and k_genes must be >= 1");
  if (d_rs < 1 || d_ru < 1 || d_is < 1 || d_iu < 1) fail("factor dimensions must be >= 1");
  if (n_classes > d_rs) fail("n_classes must not exceed d_rs (class means use orthogonal directions)");
  if (n_informative_genes < 1 || n_informative_genes > k_genes) fail("n_informative_genes must be in [1, k_genes]");
  if (!(tumor_patch_fraction > 0.0 && tumor_patch_fraction <= 1.0)) fail("tumor_patch_fraction must be in (0, 1]");
  if (patches_min < 1 || patches_min > patches_max) fail("need 1 <= patches_min <= patches_max");
  if (!(censor_fraction >= 0.0 && censor_fraction < 1.0)) fail("censor_fraction must be in [0, 1)");
  if (!(class_separation >= 0.0) || !(slide_noise >= 0.0) || !(rna_noise >= 0.0) || !(survival_noise >= 0.0))
    fail("generator scales must be non-negative");
}

std::pair<Dataset, SyntheticGroundTruth> generate_cohort(const CohortConfig& cfg) {
  cfg.validate();
  const int n_factors = cfg.d_rs + cfg.d_ru + cfg.d_is + cfg.d_iu;
  const double map_sd = 1.0 / std::sqrt(static_cast<double>(n_factors));

  // Cohort-level draws.
  Eigen::MatrixXd class_means(cfg.d_rs, cfg.n_classes);
  {
    Rng rng = make_rng(cfg.seed, kClassMeans);
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(rng, cfg.d_rs, cfg.d_rs, 1.0));
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cfg.d_rs, cfg.d_rs);
    const double radius = cfg.n_classes > 1 ? cfg.class_separation / std::sqrt(2.0) : 0.0;
    class_means = q.leftCols(cfg.n_classes) * radius;
  }
  Rng slide_rng = make_rng(cfg.seed, kSlideMap);
  const Eigen::MatrixXd slide_map = gaussian_matrix(slide_rng, cfg.d_p, n_factors, map_sd);
  Rng rna_rng = make_rng(cfg.seed, kRnaMap);
  const Eigen::MatrixXd rna_map = gaussian_matrix(rna_rng, cfg.n_informative_genes, n_factors, map_sd);
  Rng surv_rng = make_rng(cfg.seed, kSurvivalWeights);
  const int d_surv = cfg.d_rs + 2 * cfg.d_ru;
  // u_rs carries the class offset, so its weights are damped to keep the
  // linear predictor on a unit scale.
  Eigen::VectorXd w = gaussian_vector(surv_rng, d_surv, 1.0 / std::sqrt(static_cast<double>(d_surv)));
  std::vector<int> informative(static_cast<std::size_t>(cfg.k_genes));
  {
    std::iota(informative.begin(), informative.end(), 0);
    Rng rng = make_rng(cfg.seed, kInformativeGenes);
    std::shuffle(informative.begin(), informative.end(), rng);
    informative.resize(static_cast<std::size_t>(cfg.n_informative_genes));
    std::sort(informative.begin(), informative.end());
  }

  // Second moment of each factor coordinate, used to match non-tumor patch variance.
  Eigen::VectorXd factor_moment = Eigen::VectorXd::Ones(n_factors);
  for (int k = 0; k < cfg.d_rs; ++k) factor_moment(k) += class_means.row(k).squaredNorm() / cfg.n_classes;
  const Eigen::VectorXd background_sd =
      ((slide_map.array().square().rowwise() * factor_moment.transpose().array()).rowwise().sum() +
       cfg.slide_noise * cfg.slide_noise)
          .sqrt();

  auto genes = std::make_shared<std::vector<std::string>>();
  for (int g = 0; g < cfg.k_genes; ++g) genes->push_back(padded_id('G', g, 4));
  const GenePanelIds panel = genes;

  Dataset ds;
  ds.n_classes = cfg.n_classes;
  ds.d_p = cfg.d_p;
  ds.k_genes = cfg.k_genes;
  ds.gene_ids = panel;
  ds.manifest["generator"] = "synthetic";
  ds.manifest["seed"] = std::to_string(cfg.seed);
  SyntheticGroundTruth gt;
  gt.informative_gene_indices = informative;
  gt.survival_weights = w;

  Eigen::MatrixXd expression(cfg.n_samples, cfg.k_genes);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int i = 0; i < cfg.n_samples; ++i) {
    Rng rng = make_rng(cfg.seed, kSampleBase + static_cast<std::uint64_t>(i));
    PairedSample s;
    const std::string id = padded_id('S', i, 4);
    s.bag.slide_id = id;
    s.rna.sample_id = id;
    s.rna.gene_ids = panel;
    s.subtype = std::uniform_int_distribution<int>(0, cfg.n_classes - 1)(rng);

    LatentFactors f;
    f.shared_relevant = class_means.col(s.subtype) + gaussian_vector(rng, cfg.d_rs);
    f.slide_relevant = gaussian_vector(rng, cfg.d_ru);
    f.rna_relevant = gaussian_vector(rng, cfg.d_ru);
    f.shared_irrelevant = gaussian_vector(rng, cfg.d_is);
    f.slide_irrelevant = gaussian_vector(rng, cfg.d_iu);
    f.rna_irrelevant = gaussian_vector(rng, cfg.d_iu);

    Eigen::VectorXd slide_factors(n_factors), rna_factors(n_factors);
    slide_factors << f.shared_relevant, f.slide_relevant, f.shared_irrelevant, f.slide_irrelevant;
    rna_factors << f.shared_relevant, f.rna_relevant, f.shared_irrelevant, f.rna_irrelevant;

    // Patch layout: unique cells on a grid with some empty background.
    const int n_patches = std::uniform_int_distribution<int>(cfg.patches_min, cfg.patches_max)(rng);
    const int side = static_cast<int>(std::ceil(std::sqrt(1.5 * n_patches)));
    std::vector<int> cells(static_cast<std::size_t>(side * side));
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    cells.resize(static_cast<std::size_t>(n_patches));
    std::sort(cells.begin(), cells.end());
    s.bag.coords.reserve(cells.size());
    for (int c : cells) s.bag.coords.push_back(GridCoord{c / side, c % side});

    const int n_tumor = std::clamp(static_cast<int>(std::lround(cfg.tumor_patch_fraction * n_patches)), 1, n_patches);
    std::vector<int> order(static_cast<std::size_t>(n_patches));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> tumor(static_cast<std::size_t>(n_patches), 0);
    for (int t = 0; t < n_tumor; ++t) tumor[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = 1;

    const Eigen::VectorXd tumor_signal = slide_map * slide_factors;
    s.bag.features.resize(n_patches, cfg.d_p);
    for (int p = 0; p < n_patches; ++p) {
      for (int d = 0; d < cfg.d_p; ++d) {
        const double z = std_normal(rng);
        const double v = tumor[static_cast<std::size_t>(p)] ? tumor_signal(d) + cfg.slide_noise * z : background_sd(d) * z;
        s.bag.features(p, d) = static_cast<float>(v);
      }
    }

    for (int g = 0; g < cfg.k_genes; ++g) expression(i, g) = std_normal(rng);
    const Eigen::VectorXd rna_signal = rna_map * rna_factors;
    for (int j = 0; j < cfg.n_informative_genes; ++j) {
      const int g = informative[static_cast<std::size_t>(j)];
      expression(i, g) = rna_signal(j) + cfg.rna_noise * expression(i, g);
    }

    Eigen::VectorXd surv_x(d_surv);
    surv_x << f.shared_relevant, f.slide_relevant, f.rna_relevant;
    double time = std::exp(w.dot(surv_x) + cfg.survival_noise * std_normal(rng));
    bool event = true;
    if (unit(rng) < cfg.censor_fraction) {
      event = false;
      time *= 1.0 - unit(rng);  // (0, 1]
    }
    s.survival = SurvivalLabel{time, event};

    gt.factors.push_back(std::move(f));
    gt.tumor_mask.push_back(std::move(tumor));
    ds.samples.push_back(std::move(s));
  }

  // Per-gene z-scoring across the cohort.
  for (int g = 0; g < cfg.k_genes; ++g) {
    const double mean = expression.col(g).mean();
    const double sd = std::sqrt((expression.col(g).array() - mean).square().mean());
    const double inv = sd > 0 ? 1.0 / sd : 0.0;
    for (int i = 0; i < cfg.n_samples; ++i) expression(i, g) = (expression(i, g) - mean) * inv;
  }
  for (int i = 0; i < cfg.n_samples; ++i) {
    auto& values = ds.samples[static_cast<std::size_t>(i)].rna.values;
    values.resize(cfg.k_genes);
    for (int g = 0; g < cfg.k_genes; ++g) values(g) = static_cast<float>(expression(i, g));
  }
  return {std::move(ds), std::move(gt)};
}

Eigen::MatrixXd probe_targets(const SyntheticGroundTruth& gt, FactorBlock which) {
  switch (which) {
    case FactorBlock::shared_relevant:
      return stack(gt, &LatentFactors::shared_relevant);
    case FactorBlock::slide_specific:
      return stack(gt, &LatentFactors::slide_relevant);
    case FactorBlock::rna_specific:
      return stack(gt, &LatentFactors::rna_relevant);
    case FactorBlock::irrelevant: {
      const Eigen::MatrixXd a = stack(gt, &LatentFactors::shared_irrelevant);
      const Eigen::MatrixXd b = stack(gt, &LatentFactors::slide_irrelevant);
      const Eigen::MatrixXd c = stack(gt, &LatentFactors::rna_irrelevant);
      Eigen::MatrixXd m(a.rows(), a.cols() + b.cols() + c.cols());
      m << a, b, c;
      return m;
    }
  }
  throw ValidationError("probe_targets: unknown block");
}

Eigen::VectorXd survival_linear_predictor(const SyntheticGroundTruth& gt) {
  Eigen::VectorXd lp(static_cast<Eigen::Index>(gt.factors.size()));
  for (std::size_t i = 0; i < gt.factors.size(); ++i) {
    const auto& f = gt.factors[i];
    Eigen::VectorXd x(gt.survival_weights.size());
    x << f.shared_relevant, f.slide_relevant, f.rna_relevant;
    lp(static_cast<Eigen::Index>(i)) = gt.survival_weights.dot(x);
  }
  return lp;
}

void write_ground_truth(const SyntheticGroundTruth& gt, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["n_samples"] = gt.factors.size();
  j["informative_gene_indices"] = gt.informative_gene_indices;
  j["survival_weights"] = std::vector<double>(gt.survival_weights.data(),
                                              gt.survival_weights.data() + gt.survival_weights.size());
  auto block = [&](const char* name, Eigen::VectorXd LatentFactors::*field) {
    const Eigen::MatrixXd m = stack(gt, field);
    j["blocks"][name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"float32_le_base64", encode_f32(m)}};
  };
  block("u_rs", &LatentFactors::shared_relevant);
  block("u_ru_s", &LatentFactors::slide_relevant);
  block("u_ru_t", &LatentFactors::rna_relevant);
  block("e_is", &LatentFactors::shared_irrelevant);
  block("e_iu_s", &LatentFactors::slide_irrelevant);
  block("e_iu_t", &LatentFactors::rna_irrelevant);
  std::vector<std::string> masks;
  for (const auto& m : gt.tumor_mask) masks.push_back(base64_encode(std::string(m.begin(), m.end())));
  j["tumor_mask_base64"] = masks;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

SyntheticGroundTruth read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  SyntheticGroundTruth gt;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    const auto n = j.at("n_samples").get<std::size_t>();
    gt.informative_gene_indices = j.at("informative_gene_indices").get<std::vector<int>>();
    const auto w = j.at("survival_weights").get<std::vector<double>>();
    gt.survival_weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    gt.factors.resize(n);
    auto block = [&](const char* name, Eigen::VectorXd LatentFactors::*field) {
      const auto& b = j.at("blocks").at(name);
      const auto rows = b.at("rows").get<Eigen::Index>();
      const auto cols = b.at("cols").get<Eigen::Index>();
      if (static_cast<std::size_t>(rows) != n) throw DimensionError("ground truth: block row count mismatch");
      const Eigen::MatrixXd m = decode_f32(b.at("float32_le_base64").get<std::string>(), rows, cols);
      for (std::size_t i = 0; i < n; ++i) gt.factors[i].*field = m.row(static_cast<Eigen::Index>(i)).transpose();
    };
    block("u_rs", &LatentFactors::shared_relevant);
    block("u_ru_s", &LatentFactors::slide_relevant);
    block("u_ru_t", &LatentFactors::rna_relevant);
    block("e_is", &LatentFactors::shared_irrelevant);
    block("e_iu_s", &LatentFactors::slide_irrelevant);
    block("e_iu_t", &LatentFactors::rna_irrelevant);
    for (const auto& s : j.at("tumor_mask_base64")) {
      const std::string bytes = base64_decode(s.get<std::string>());
      gt.tumor_mask.emplace_back(bytes.begin(), bytes.end());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("ground truth: " + std::string(e.what()));
  }
  return gt;
}

}  // namespace mirror
