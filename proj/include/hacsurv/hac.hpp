#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hacsurv/generators.hpp"

namespace hacsurv {

// ---------------------------------------------------------------------------
// Two-level generator tree over leaf indices {0..K} (0 = censoring): leaves
// either hang directly off the root or sit inside one inner copula each.
// ---------------------------------------------------------------------------

struct HacNode {
  GeneratorPtr gen;
  std::vector<int> leaves;
};

struct HacTree {
  GeneratorPtr root;
  std::vector<int> outer_leaves;
  std::vector<HacNode> inner;

  int dimension() const {
    std::size_t n = outer_leaves.size();
    for (const auto& node : inner) n += node.leaves.size();
    return static_cast<int>(n);
  }

  // Leaf cover and nesting conditions; grid kept moderate so empirical
  // generators stay away from underflow.
  void validate() const {
    if (!root) throw StructureError("HacTree: missing root generator");
    const int dim = dimension();
    std::vector<int> seen(static_cast<std::size_t>(dim), 0);
    auto mark = [&](int leaf) {
      if (leaf < 0 || leaf >= dim)
        throw StructureError("HacTree: leaf index out of range");
      if (seen[static_cast<std::size_t>(leaf)]++)
        throw StructureError("HacTree: leaf index appears twice");
    };
    for (int l : outer_leaves) mark(l);
    for (const auto& node : inner) {
      if (!node.gen) throw StructureError("HacTree: missing inner generator");
      if (node.leaves.size() < 2)
        throw StructureError("HacTree: inner node needs at least two leaves");
      for (int l : node.leaves) mark(l);
    }
    std::vector<double> grid;
    for (double x = 0.0; x <= 4.0; x += 0.5) grid.push_back(x);
    for (const auto& node : inner) {
      NestingReport rep = check_nesting(*root, *node.gen, grid);
      if (!rep.pass)
        throw StructureError("HacTree: nesting check failed: " + rep.message);
    }
  }

  json to_json() const {
    json inner_json = json::array();
    for (const auto& node : inner)
      inner_json.push_back({{"generator", node.gen->to_json()},
                            {"leaves", node.leaves}});
    return {{"root", root->to_json()},
            {"outer_leaves", outer_leaves},
            {"inner", inner_json}};
  }

  static HacTree from_json(const json& j) {
    HacTree tree;
    tree.root = generator_from_json(j.at("root"));
    tree.outer_leaves = j.at("outer_leaves").get<std::vector<int>>();
    for (const auto& nj : j.at("inner")) {
      HacNode node;
      // Subordinator inners must share the tree root instance.
      const json& gj = nj.at("generator");
      if (gj.at("kind").get<std::string>() == "subordinator") {
        auto jumps = EmpiricalGenerator::from_json(gj.at("jumps"));
        node.gen = std::make_shared<SubordinatorGenerator>(
            tree.root, jumps, gj.at("raw_mu").get<double>(),
            gj.at("raw_beta").get<double>());
      } else {
        node.gen = generator_from_json(gj);
      }
      node.leaves = nj.at("leaves").get<std::vector<int>>();
      tree.inner.push_back(std::move(node));
    }
    return tree;
  }
};

enum class CopulaKind { Independent, Symmetric, Hierarchical };

namespace detail {

// Set partitions of {0..n-1}, reported as block sizes only. n <= 4 in
// practice (one inner group's differentiated coordinates).
inline void enumerate_partitions(int n, std::vector<int>& sizes,
                                 std::vector<std::vector<int>>& out,
                                 std::vector<int>& assignment, int item) {
  if (item == n) {
    out.push_back(sizes);
    return;
  }
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    // Only extend the first block of each size run started by earlier items:
    // standard restricted-growth enumeration keeps partitions distinct.
    sizes[b]++;
    assignment[static_cast<std::size_t>(item)] = static_cast<int>(b);
    enumerate_partitions(n, sizes, out, assignment, item + 1);
    sizes[b]--;
  }
  sizes.push_back(1);
  assignment[static_cast<std::size_t>(item)] = static_cast<int>(sizes.size()) - 1;
  enumerate_partitions(n, sizes, out, assignment, item + 1);
  sizes.pop_back();
}

inline const std::vector<std::vector<int>>& partitions_block_sizes(int n) {
  static std::vector<std::vector<std::vector<int>>> cache(6);
  auto& slot = cache[static_cast<std::size_t>(n)];
  if (slot.empty() && n > 0) {
    std::vector<int> sizes;
    std::vector<int> assignment(static_cast<std::size_t>(n));
    enumerate_partitions(n, sizes, slot, assignment, 0);
  }
  return slot;
}

}  // namespace detail

class CopulaModel {
 public:
  static CopulaModel independent(int dim) {
    CopulaModel m;
    m.kind_ = CopulaKind::Independent;
    m.dim_ = dim;
    return m;
  }
  static CopulaModel symmetric(GeneratorPtr gen, int dim) {
    if (!gen) throw StructureError("symmetric copula: null generator");
    CopulaModel m;
    m.kind_ = CopulaKind::Symmetric;
    m.dim_ = dim;
    m.tree_ = HacTree{};
    m.tree_->root = std::move(gen);
    for (int i = 0; i < dim; ++i) m.tree_->outer_leaves.push_back(i);
    return m;
  }
  static CopulaModel hierarchical(HacTree tree) {
    tree.validate();
    CopulaModel m;
    m.kind_ = CopulaKind::Hierarchical;
    m.dim_ = tree.dimension();
    m.tree_ = std::move(tree);
    return m;
  }

  CopulaKind kind() const { return kind_; }
  int dimension() const { return dim_; }
  const HacTree& tree() const { return *tree_; }
  const Generator& root_generator() const { return *tree_->root; }

  double cdf(std::span<const double> u) const {
    check_dim(u);
    for (double ui : u)
      if (!(ui >= 0.0 && ui <= 1.0))
        throw DomainError("cdf: arguments must lie in [0,1]");
    for (double ui : u)
      if (ui == 0.0) return 0.0;
    if (kind_ == CopulaKind::Independent) {
      double p = 1.0;
      for (double ui : u) p *= ui;
      return p;
    }
    return mixed_partial(u, {});
  }

  // d C / d u_k. For the Independent model this is exactly the product of the
  // other coordinates.
  double partial(std::span<const double> u, int k) const {
    check_dim(u);
    if (k < 0 || k >= dim_) throw DomainError("partial: coordinate out of range");
    if (!(u[static_cast<std::size_t>(k)] > 0.0 && u[static_cast<std::size_t>(k)] < 1.0))
      throw DomainError("partial: differentiated coordinate must be interior");
    if (kind_ == CopulaKind::Independent) {
      double p = 1.0;
      for (int i = 0; i < dim_; ++i)
        if (i != k) p *= u[static_cast<std::size_t>(i)];
      return p;
    }
    int diff[] = {k};
    return mixed_partial(u, diff);
  }

  // Mixed partial over distinct coordinates `diff`; diff empty gives the cdf.
  // Coordinates equal to 1 drop out of the generator sums exactly.
  double mixed_partial(std::span<const double> u, std::span<const int> diff) const {
    check_dim(u);
    if (kind_ == CopulaKind::Independent) {
      double p = 1.0;
      for (int i = 0; i < dim_; ++i) {
        bool in_diff = std::find(diff.begin(), diff.end(), i) != diff.end();
        if (!in_diff) p *= u[static_cast<std::size_t>(i)];
      }
      return p;
    }
    const HacTree& tree = *tree_;
    const Generator& root = *tree.root;

    // group id per coordinate: -1 outer leaf, else index into tree.inner
    std::vector<int> group(static_cast<std::size_t>(dim_), -1);
    for (std::size_t j = 0; j < tree.inner.size(); ++j)
      for (int l : tree.inner[j].leaves) group[static_cast<std::size_t>(l)] = static_cast<int>(j);

    // Outer argument T and per-group inner sums.
    std::vector<double> s(tree.inner.size(), 0.0);
    double T = 0.0;
    std::vector<double> a(static_cast<std::size_t>(dim_), 0.0);
    for (int i = 0; i < dim_; ++i) {
      double ui = u[static_cast<std::size_t>(i)];
      if (ui == 1.0) continue;
      int g = group[static_cast<std::size_t>(i)];
      const Generator& gen = g < 0 ? root : *tree.inner[static_cast<std::size_t>(g)].gen;
      a[static_cast<std::size_t>(i)] = gen.inverse(ui);
      if (g < 0)
        T += a[static_cast<std::size_t>(i)];
      else
        s[static_cast<std::size_t>(g)] += a[static_cast<std::size_t>(i)];
    }

    // h_j = phi0^{-1} o phi_j and derivatives at s_j (exact psi for
    // subordinators nested on this root).
    const int max_block = 3;
    std::vector<std::array<double, 4>> h(tree.inner.size());
    for (std::size_t j = 0; j < tree.inner.size(); ++j) {
      const Generator& gj = *tree.inner[j].gen;
      const auto* sub = dynamic_cast<const SubordinatorGenerator*>(&gj);
      double sj = s[j];
      if (sub != nullptr && &sub->outer() == &root) {
        h[j] = {sub->psi(sj), sub->psi_derivative(1, sj),
                sub->psi_derivative(2, sj), sub->psi_derivative(3, sj)};
      } else {
        double y = root.inverse(gj.phi(sj));
        double f1 = root.derivative(1, y), f2 = root.derivative(2, y),
               f3 = root.derivative(3, y);
        double g1 = gj.derivative(1, sj), g2 = gj.derivative(2, sj),
               g3 = gj.derivative(3, sj);
        double h1 = g1 / f1;
        double h2 = (g2 - f2 * h1 * h1) / f1;
        double h3 = (g3 - f3 * h1 * h1 * h1 - 3.0 * f2 * h1 * h2) / f1;
        h[j] = {y, h1, h2, h3};
      }
      T += h[j][0];
    }

    if (diff.empty()) return root.phi(T);

    // Leading per-coordinate factors d a_i / d u_i.
    double lead = 1.0;
    for (int k : diff) {
      double uk = u[static_cast<std::size_t>(k)];
      if (!(uk > 0.0 && uk < 1.0))
        throw DomainError("mixed_partial: differentiated coordinate must be interior");
      int g = group[static_cast<std::size_t>(k)];
      const Generator& gen = g < 0 ? root : *tree.inner[static_cast<std::size_t>(g)].gen;
      lead /= gen.derivative(1, a[static_cast<std::size_t>(k)]);
    }

    // Polynomial in the number of Faa di Bruno blocks: outer-leaf coordinates
    // contribute exactly one block; a group with c differentiated coordinates
    // contributes its set partitions weighted by products of h^{(|B|)}.
    std::vector<double> W{1.0};  // W[r] = weight of r blocks
    int outer_count = 0;
    std::vector<int> per_group(tree.inner.size(), 0);
    for (int k : diff) {
      int g = group[static_cast<std::size_t>(k)];
      if (g < 0)
        ++outer_count;
      else
        ++per_group[static_cast<std::size_t>(g)];
    }
    for (std::size_t j = 0; j < tree.inner.size(); ++j) {
      int c = per_group[j];
      if (c == 0) continue;
      if (c > max_block)
        throw DomainError("mixed_partial: more than 3 coordinates in one inner group");
      std::vector<double> poly(static_cast<std::size_t>(c) + 1, 0.0);
      for (const auto& part : detail::partitions_block_sizes(c)) {
        double w = 1.0;
        for (int bs : part) {
          if (bs > max_block)
            throw DomainError("mixed_partial: block size exceeds available derivatives");
          w *= h[j][static_cast<std::size_t>(bs)];
        }
        poly[part.size()] += w;
      }
      // convolve W with poly
      std::vector<double> next(W.size() + poly.size() - 1, 0.0);
      for (std::size_t r = 0; r < W.size(); ++r)
        for (std::size_t q = 0; q < poly.size(); ++q) next[r + q] += W[r] * poly[q];
      W.swap(next);
    }
    for (int i = 0; i < outer_count; ++i) {
      std::vector<double> next(W.size() + 1, 0.0);
      for (std::size_t r = 0; r < W.size(); ++r) next[r + 1] += W[r];
      W.swap(next);
    }

    double total = 0.0;
    for (std::size_t r = 1; r < W.size(); ++r) {
      if (W[r] == 0.0) continue;
      if (static_cast<int>(r) > root.max_order())
        throw DomainError("mixed_partial: root generator derivatives exhausted");
      total += W[r] * root.derivative(static_cast<int>(r), T);
    }
    return lead * total;
  }

  json to_json() const {
    switch (kind_) {
      case CopulaKind::Independent:
        return {{"kind", "independent"}, {"dim", dim_}};
      case CopulaKind::Symmetric:
        return {{"kind", "symmetric"},
                {"dim", dim_},
                {"generator", tree_->root->to_json()}};
      case CopulaKind::Hierarchical:
        return {{"kind", "hierarchical"}, {"dim", dim_}, {"tree", tree_->to_json()}};
    }
    throw StructureError("unreachable");
  }

  static CopulaModel from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "independent") return independent(j.at("dim").get<int>());
    if (kind == "symmetric")
      return symmetric(generator_from_json(j.at("generator")), j.at("dim").get<int>());
    if (kind == "hierarchical")
      return hierarchical(HacTree::from_json(j.at("tree")));
    throw DomainError("unknown copula kind: " + kind);
  }

 private:
  CopulaModel() = default;
  void check_dim(std::span<const double> u) const {
    if (static_cast<int>(u.size()) != dim_)
      throw DomainError("copula: dimension mismatch (expected " +
                        std::to_string(dim_) + ", got " + std::to_string(u.size()) + ")");
  }

  CopulaKind kind_ = CopulaKind::Independent;
  int dim_ = 0;
  std::optional<HacTree> tree_;
};

// Bivariate Archimedean density c(u,v) = phi''(a+b) / (phi'(a) phi'(b)).
inline double bivariate_density(const Generator& g, double u, double v) {
  if (!(u > 0.0 && u < 1.0 && v > 0.0 && v < 1.0))
    throw DomainError("bivariate_density: arguments must be interior to (0,1)");
  double a = g.inverse(u), b = g.inverse(v);
  return g.derivative(2, a + b) / (g.derivative(1, a) * g.derivative(1, b));
}

}  // namespace hacsurv
