#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "gcnforge/error.hpp"
#include "gcnforge/metrics.hpp"
#include "gcnforge/util.hpp"

namespace gcnforge {

namespace {

constexpr char kMagic[8] = {'G', 'C', 'N', 'F', 'E', 'M', 'B', '1'};

}  // namespace

std::span<const double> EmbeddingTable::row(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
    throw ShapeError("embedding: token id " + std::to_string(id) + " outside table of " +
                     std::to_string(vocab_size));
  }
  return std::span<const double>(vectors).subspan(static_cast<std::size_t>(id) * dim, dim);
}

double EmbeddingTable::cosine(int a, int b) const {
  const auto x = row(a);
  const auto y = row(b);
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return dot / std::sqrt(nx * ny);
}

void EmbeddingTable::save(const std::filesystem::path& path) const {
  std::string bytes(kMagic, sizeof(kMagic));
  const std::uint64_t header[2] = {vocab_size, dim};
  bytes.append(reinterpret_cast<const char*>(header), sizeof(header));
  bytes.append(reinterpret_cast<const char*>(vectors.data()), vectors.size() * sizeof(double));
  write_file(path, bytes);
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = "embeddings '" + path.string() + "'";
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(where + ": not an embedding table");
  }
  std::uint64_t header[2];
  std::memcpy(header, bytes.data() + 8, sizeof(header));
  EmbeddingTable t;
  t.vocab_size = header[0];
  t.dim = header[1];
  const std::size_t n = t.vocab_size * t.dim;
  if (bytes.size() != 24 + n * sizeof(double)) {
    throw ChecksumError(where + ": expected " + std::to_string(24 + n * sizeof(double)) +
                        " bytes, found " + std::to_string(bytes.size()));
  }
  t.vectors.resize(n);
  std::memcpy(t.vectors.data(), bytes.data() + 24, n * sizeof(double));
  return t;
}

EmbeddingTable train_embeddings(const Corpus& corpus, const Vocab& vocab, std::size_t dim,
                                std::size_t window) {
  if (corpus.empty()) throw ValidationError("train_embeddings: empty corpus");
  if (dim == 0 || window == 0) throw ConfigError("train_embeddings: dim and window must be positive");
  const std::size_t v = vocab.size();
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(v),
                                                 static_cast<Eigen::Index>(v));
  for (const auto& conv : corpus.conversations) {
    for (const auto& turn : conv.turns) {
      const auto ids = vocab.encode_text(turn.text);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = i + 1; j < ids.size() && j <= i + window; ++j) {
          counts(ids[i], ids[j]) += 1.0;
          counts(ids[j], ids[i]) += 1.0;
        }
      }
    }
  }
  const Eigen::VectorXd row_sums = counts.rowwise().sum();
  const double total = row_sums.sum();
  Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(counts.rows(), counts.cols());
  if (total > 0.0) {
    for (Eigen::Index i = 0; i < counts.rows(); ++i) {
      for (Eigen::Index j = 0; j < counts.cols(); ++j) {
        const double c = counts(i, j);
        if (c <= 0.0) continue;
        ppmi(i, j) = std::max(0.0, std::log(c * total / (row_sums(i) * row_sums(j))));
      }
    }
  }

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ppmi);
  if (eig.info() != Eigen::Success) throw NumericError("train_embeddings: eigendecomposition failed");
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(lambda.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(lambda(a)) > std::abs(lambda(b));
  });

  EmbeddingTable table;
  table.vocab_size = v;
  table.dim = dim;
  table.vectors.assign(v * dim, 0.0);
  const double tiny = 1e-10 * (lambda.size() > 0 ? std::abs(lambda(order[0])) : 0.0);
  for (std::size_t k = 0; k < dim && k < order.size(); ++k) {
    const double sigma = std::abs(lambda(order[k]));
    if (sigma <= tiny) break;  // beyond the rank: zero padding
    Eigen::VectorXd u = eig.eigenvectors().col(order[k]);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < u.size(); ++i) {
      if (std::abs(u(i)) > std::abs(u(arg))) arg = i;
    }
    if (u(arg) < 0.0) u = -u;
    const double s = std::sqrt(sigma);
    for (std::size_t i = 0; i < v; ++i) {
      table.vectors[i * dim + k] = u(static_cast<Eigen::Index>(i)) * s;
    }
  }
  for (std::size_t i = 0; i < v; ++i) {
    double norm = 0.0;
    const auto row = std::span<double>(table.vectors).subspan(i * dim, dim);
    for (const double x : row) norm += x * x;
    norm = std::sqrt(norm);
    // Rows built only from numerical noise are treated as unseen tokens.
    if (row_sums(static_cast<Eigen::Index>(i)) == 0.0 || norm < 1e-12) {
      std::fill(row.begin(), row.end(), 0.0);
      continue;
    }
    for (auto& x : row) x /= norm;
  }
  return table;
}

PRF embed_score(std::span<const int> hyp, std::span<const int> ref, const EmbeddingTable& table) {
  if (ref.empty()) throw ValidationError("embed_score: empty reference");
  if (!table.frozen) throw ValidationError("embed_score: embedding table must be frozen");
  PRF out;
  if (hyp.empty()) return out;
  std::vector<double> sim(hyp.size() * ref.size());
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      sim[i * ref.size() + j] =
          hyp[i] == ref[j] ? 1.0 : std::clamp(table.cosine(hyp[i], ref[j]), 0.0, 1.0);
    }
  }
  double p = 0.0;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < ref.size(); ++j) best = std::max(best, sim[i * ref.size() + j]);
    p += best;
  }
  double r = 0.0;
  for (std::size_t j = 0; j < ref.size(); ++j) {
    double best = 0.0;
    for (std::size_t i = 0; i < hyp.size(); ++i) best = std::max(best, sim[i * ref.size() + j]);
    r += best;
  }
  out.precision = p / static_cast<double>(hyp.size());
  out.recall = r / static_cast<double>(ref.size());
  out.f1 = harmonic_mean(out.precision, out.recall);
  return out;
}

}  // namespace gcnforge
