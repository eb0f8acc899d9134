#include "nmcrl/evaluation.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"

namespace nmcrl {

using nlohmann::json;

json EvalReport::to_json() const {
  json m = json::object(), pc = json::object();
  for (const auto& [k, acc] : metrics) m["top" + std::to_string(k)] = acc;
  for (const auto& [c, acc] : per_class) pc[std::to_string(c)] = acc;
  return {{"protocol",
           {{"n_way", n_way},
            {"k_list", k_list},
            {"repetitions_averaged", repetitions_averaged},
            {"trials_evaluated", trials_evaluated}}},
          {"metrics", m},
          {"per_class", pc},
          {"seed", seed}};
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

struct Query {
  std::vector<double> embedding;
  int label = 0;
};

std::vector<Query> build_queries(const Tensor& emb, std::span<const int> labels, std::span<const int> exemplars,
                                 bool average) {
  const std::size_t T = emb.dim(0), F = emb.dim(1);
  std::vector<Query> out;
  if (!average) {
    out.reserve(T);
    for (std::size_t i = 0; i < T; ++i) {
      auto r = emb.row(i, F);
      out.push_back({{r.begin(), r.end()}, labels[i]});
    }
    return out;
  }
  if (exemplars.size() != T) throw DataError("repetition averaging needs one exemplar id per trial");
  std::map<std::pair<int, int>, std::pair<std::vector<double>, std::size_t>> groups;
  for (std::size_t i = 0; i < T; ++i) {
    auto& [sum, n] = groups[{labels[i], exemplars[i]}];
    if (sum.empty()) sum.assign(F, 0.0);
    auto r = emb.row(i, F);
    for (std::size_t j = 0; j < F; ++j) sum[j] += r[j];
    ++n;
  }
  for (auto& [key, g] : groups) {
    auto& [sum, n] = g;
    double norm = 0.0;
    for (auto& x : sum) {
      x /= static_cast<double>(n);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (auto& x : sum) x /= norm;
    out.push_back({std::move(sum), key.first});
  }
  return out;
}

}  // namespace

EvalReport zero_shot_classify(const Tensor& emb, std::span<const int> labels, std::span<const int> exemplars,
                              const EmbeddingTable& candidates, std::span<const int> candidate_classes,
                              const EvalProtocol& protocol) {
  if (emb.rank() != 2 || emb.dim(0) != labels.size())
    throw ShapeError("zero_shot_classify: embeddings " + shape_str(emb.shape) + " vs " +
                     std::to_string(labels.size()) + " labels");
  if (emb.dim(1) != candidates.dim)
    throw ShapeError("zero_shot_classify: embedding dim " + std::to_string(emb.dim(1)) + " vs candidate dim " +
                     std::to_string(candidates.dim));
  std::vector<int> pool(candidate_classes.begin(), candidate_classes.end());
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  const std::size_t n_way = protocol.n_way == 0 ? pool.size() : protocol.n_way;
  if (n_way < 2) throw ConfigError("n_way must be >= 2");
  if (n_way > pool.size())
    throw ConfigError("n_way " + std::to_string(n_way) + " exceeds the " + std::to_string(pool.size()) +
                      " candidate classes");
  if (protocol.k_list.empty()) throw ConfigError("k_list must not be empty");
  std::map<int, std::size_t> index_of;
  for (std::size_t i = 0; i < pool.size(); ++i) index_of[pool[i]] = i;
  for (int l : labels)
    if (!index_of.count(l)) throw DataError("label " + std::to_string(l) + " is not among the candidate classes");

  std::vector<std::vector<double>> cand(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) cand[i] = candidates.at(pool[i]);

  const auto queries = build_queries(emb, labels, exemplars, protocol.repetitions_averaged);
  std::map<std::size_t, std::size_t> hits;
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // hits@1, count
  std::vector<std::size_t> others;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& query = queries[q];
    const std::size_t truth = index_of.at(query.label);
    others.clear();
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (i != truth) others.push_back(i);
    if (n_way < pool.size()) {
      std::mt19937_64 rng(derive_seed(protocol.seed, "eval/distractors", q));
      for (std::size_t i = 0; i + 1 < n_way; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, others.size() - 1);
        std::swap(others[i], others[pick(rng)]);
      }
      others.resize(n_way - 1);
    }
    const double s_true = cosine(query.embedding, cand[truth]);
    std::size_t rank = 0;
    for (std::size_t o : others) {
      const double s = cosine(query.embedding, cand[o]);
      if (s > s_true || (s == s_true && pool[o] < pool[truth])) ++rank;
    }
    for (std::size_t k : protocol.k_list)
      if (rank < k) ++hits[k];
    auto& pc = per_class[query.label];
    pc.first += rank == 0 ? 1 : 0;
    pc.second += 1;
  }

  EvalReport r;
  r.n_way = n_way;
  r.k_list = protocol.k_list;
  r.repetitions_averaged = protocol.repetitions_averaged;
  r.trials_evaluated = queries.size();
  r.seed = protocol.seed;
  const double n = static_cast<double>(queries.size());
  for (std::size_t k : protocol.k_list) r.metrics[k] = n > 0 ? static_cast<double>(hits[k]) / n : 0.0;
  for (const auto& [c, pc] : per_class) r.per_class[c] = static_cast<double>(pc.first) / static_cast<double>(pc.second);
  return r;
}

EvalReport zero_shot_classify(const Tensor& emb, std::span<const int> labels, std::span<const int> exemplars,
                              const EmbeddingTable& candidates, const EvalProtocol& protocol) {
  const auto ids = candidates.class_ids();
  return zero_shot_classify(emb, labels, exemplars, candidates, ids, protocol);
}

EmbeddingTable class_mean_embeddings(const Tensor& emb, std::span<const int> labels) {
  if (emb.rank() != 2 || emb.dim(0) != labels.size()) throw ShapeError("class_mean_embeddings: shape mismatch");
  const std::size_t F = emb.dim(1);
  EmbeddingTable out;
  out.dim = F;
  out.kind = EmbeddingKind::image;
  out.normalized = true;
  std::map<int, std::vector<double>> sums;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& s = sums[labels[i]];
    if (s.empty()) s.assign(F, 0.0);
    auto r = emb.row(i, F);
    for (std::size_t j = 0; j < F; ++j) s[j] += r[j];
  }
  for (auto& [c, s] : sums) {
    double norm = 0.0;
    for (double x : s) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw DataError("class " + std::to_string(c) + " has a zero mean embedding");
    for (auto& x : s) x /= norm;
    out.entries[{c, 0}] = std::move(s);
  }
  return out;
}

SimilarityReport similarity_matrix(const EmbeddingTable& eeg, const EmbeddingTable& image,
                                   const std::map<int, std::string>& category_map) {
  const auto a = eeg.class_ids(), b = image.class_ids();
  if (a != b) throw DataError("similarity_matrix: EEG and image tables cover different class sets");
  if (eeg.dim != image.dim) throw ShapeError("similarity_matrix: dimension mismatch");
  SimilarityReport r;
  r.class_order = a;
  auto category = [&](int c) {
    auto it = category_map.find(c);
    return it == category_map.end() ? std::string() : it->second;
  };
  std::stable_sort(r.class_order.begin(), r.class_order.end(), [&](int x, int y) {
    const auto cx = category(x), cy = category(y);
    return cx != cy ? cx < cy : x < y;
  });
  for (int c : r.class_order) r.category_map[c] = category(c);
  const std::size_t n = r.class_order.size();
  r.matrix = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      r.matrix[i * n + j] = std::clamp(cosine(eeg.at(r.class_order[i]), image.at(r.class_order[j])), -1.0, 1.0);
  return r;
}

void SimilarityReport::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.precision(9);
  out << "class_id";
  for (int c : class_order) out << ',' << c;
  out << '\n';
  const std::size_t n = class_order.size();
  for (std::size_t i = 0; i < n; ++i) {
    out << class_order[i];
    for (std::size_t j = 0; j < n; ++j) out << ',' << matrix[i * n + j];
    out << '\n';
  }
}

void SimilarityReport::write_png(const std::string& path) const {
  const std::size_t n = class_order.size();
  const std::size_t cell = std::max<std::size_t>(1, 512 / std::max<std::size_t>(n, 1));
  const std::size_t side = n * cell;
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("libpng failed writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(side), static_cast<png_uint_32>(side), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(side * 3);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double v = matrix[(y / cell) * n + (x / cell)];
      const double t = std::clamp((v + 1.0) / 2.0, 0.0, 1.0);
      row[x * 3 + 0] = static_cast<png_byte>(255.0 * t);
      row[x * 3 + 1] = static_cast<png_byte>(255.0 * (1.0 - std::abs(2.0 * t - 1.0)));
      row[x * 3 + 2] = static_cast<png_byte>(255.0 * (1.0 - t));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace nmcrl
