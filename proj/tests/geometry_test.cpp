#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "nlpverify/error.hpp"
#include "nlpverify/geometry.hpp"

namespace nlv {
namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::InvalidArgument;
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-1.0, 1.0) * double(c + 1);
  }
  return m;
}

Matrix covariance(const Matrix& x) {
  const Matrix centered = x.rowwise() - x.colwise().mean();
  return centered.transpose() * centered / double(x.rows() - 1);
}

HyperRectangle make_box(std::vector<double> lo, std::vector<double> hi, std::size_t cls = 0) {
  HyperRectangle b;
  b.lower = Eigen::Map<Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
  b.upper = Eigen::Map<Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  b.target_class = cls;
  return b;
}

TEST(Rotation, LineYEqualsX) {
  Matrix x(4, 2);
  x << 0, 0, 1, 1, 2, 2, 3, 3;
  const RotationModel r = fit_rotation(x);
  EXPECT_NEAR(r.basis(0, 0), 1 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(r.basis(1, 0), 1 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(r.eigenvalues[1], 0.0, 1e-12);
  EXPECT_NEAR(fit_pca(x, 1).explained_variance_ratio, 1.0, 1e-9);
}

TEST(Rotation, AxisAlignedDataGivesIdentity) {
  Matrix x(4, 2);
  x << -2, 0, 2, 0, 0, -1, 0, 1;
  const RotationModel r = fit_rotation(x);
  EXPECT_LT((r.basis - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Rotation, DecorrelatesAndPreservesDistances) {
  const Matrix x = random_matrix(100, 5, 1);
  const RotationModel r = fit_rotation(x);
  EXPECT_LT((r.basis.transpose() * r.basis - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-8);
  for (Eigen::Index i = 1; i < 5; ++i) EXPECT_GE(r.eigenvalues[i - 1], r.eigenvalues[i]);

  const Matrix y = apply_rotation(r, x);
  Matrix c = covariance(y);
  const double lmax = c.diagonal().maxCoeff();
  c.diagonal().setZero();
  EXPECT_LT(c.cwiseAbs().maxCoeff(), 1e-8 * lmax);

  for (Eigen::Index i = 0; i + 1 < x.rows(); ++i) {
    EXPECT_NEAR((y.row(i) - y.row(i + 1)).norm(), (x.row(i) - x.row(i + 1)).norm(), 1e-9);
  }
  EXPECT_LT((invert_rotation(r, y) - x).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Rotation, SignConventionAndErrors) {
  const RotationModel r = fit_rotation(random_matrix(30, 4, 2));
  for (Eigen::Index j = 0; j < 4; ++j) {
    Eigen::Index arg;
    r.basis.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(r.basis(arg, j), 0.0);
  }
  EXPECT_THROW(fit_rotation(Matrix::Zero(1, 3)), Error);
  Matrix bad = Matrix::Zero(3, 2);
  bad(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(fit_rotation(bad), Error);
  EXPECT_EQ(kind_of([&] { apply_rotation(r, Matrix::Zero(2, 3)); }), ErrorKind::DimMismatch);
}

TEST(Pca, ReconstructionErrorMatchesDiscardedEigenvalues) {
  const Matrix x = random_matrix(200, 10, 3);
  const PcaModel p = fit_pca(x, 3);
  const Matrix back = reconstruct_pca(p, apply_pca(p, x));
  // Covariance uses N - 1, so compare the per-sample error on the same scale.
  const double err = (back - x).squaredNorm() / double(x.rows() - 1);
  const double discarded = p.rotation.eigenvalues.tail(7).sum();
  EXPECT_NEAR(err, discarded, 1e-6);
  EXPECT_NEAR(p.explained_variance_ratio,
              p.rotation.eigenvalues.head(3).sum() / p.rotation.eigenvalues.sum(), 1e-12);
}

TEST(Pca, FullDimensionIsLossless) {
  const Matrix x = random_matrix(20, 4, 4);
  const PcaModel p = fit_pca(x, 4);
  EXPECT_EQ(p.explained_variance_ratio, 1.0);
  EXPECT_LT((invert_rotation(p.rotation, apply_pca(p, x)) - x).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(kind_of([&] { fit_pca(x, 0); }), ErrorKind::DimMismatch);
  EXPECT_EQ(kind_of([&] { fit_pca(x, 5); }), ErrorKind::DimMismatch);
}

TEST(Preparation, JsonRoundTripAndModes) {
  const Matrix x = random_matrix(40, 6, 5);
  const Preparation id = Preparation::identity(6);
  EXPECT_EQ(id.apply(x), x);
  const Preparation rot = Preparation::fit(x, true, std::nullopt);
  EXPECT_EQ(rot.out_dim(), 6u);
  const Preparation pca = Preparation::fit(x, true, 2);
  EXPECT_EQ(pca.out_dim(), 2u);
  const Preparation back = Preparation::from_json(pca.to_json());
  EXPECT_EQ(back.apply(x), pca.apply(x));
  EXPECT_EQ(back.to_json(), pca.to_json());
  const Vector v = x.row(3).transpose();
  EXPECT_EQ(pca.apply(v), pca.apply(x).row(3).transpose());
}

TEST(BoxNaive, Examples) {
  Matrix x(3, 2);
  x << 0, 0, 1, 2, 5, 5;
  const std::vector<std::size_t> labels{1, 1, 0};
  const HyperRectangle b = box_naive(x, labels, 1);
  EXPECT_EQ(b.lower, Vector::Zero(2));
  EXPECT_EQ(b.upper, (Vector(2) << 1, 2).finished());
  EXPECT_EQ(b.target_class, 1u);
  const HyperRectangle single = box_naive(x, labels, 0);
  EXPECT_EQ(single.lower, single.upper);
  EXPECT_TRUE(box_contains(single, x.row(2).transpose()));
  EXPECT_FALSE(box_contains(single, x.row(1).transpose()));
  EXPECT_EQ(kind_of([&] { box_naive(x, labels, 2); }), ErrorKind::EmptyClass);
}

TEST(BoxNaive, MatchesLinearScan) {
  const Matrix x = random_matrix(50, 5, 6);
  std::vector<std::size_t> labels(50);
  for (std::size_t i = 0; i < 50; ++i) labels[i] = i % 3 == 0;
  const HyperRectangle b = box_naive(x, labels, 1);
  for (Eigen::Index d = 0; d < 5; ++d) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (Eigen::Index r = 0; r < 50; ++r) {
      if (labels[static_cast<std::size_t>(r)] != 1) continue;
      lo = std::min(lo, x(r, d));
      hi = std::max(hi, x(r, d));
    }
    EXPECT_EQ(b.lower[d], lo);
    EXPECT_EQ(b.upper[d], hi);
  }
  for (Eigen::Index r = 0; r < 50; ++r) {
    if (labels[static_cast<std::size_t>(r)] == 1) EXPECT_TRUE(box_contains(b, x.row(r).transpose()));
  }
}

TEST(BoxShrink, WorkedExample) {
  const HyperRectangle box = make_box({0, 0}, {2, 2}, 1);
  Matrix pos(2, 2), neg(1, 2);
  pos << 0, 0, 2, 2;
  neg << 1, 1;
  const HyperRectangle s = box_shrink(box, pos, neg);
  EXPECT_EQ(s.lower, Vector::Zero(2));
  EXPECT_EQ(s.upper, (Vector(2) << 1, 2).finished());
  EXPECT_TRUE(s.upper_open(0));
  EXPECT_FALSE(s.lower_open(0));
  EXPECT_FALSE(s.upper_open(1));
  EXPECT_FALSE(box_contains(s, neg.row(0).transpose()));
  EXPECT_TRUE(box_contains(s, pos.row(0).transpose()));
  EXPECT_FALSE(box_contains(s, pos.row(1).transpose()));
}

TEST(BoxShrink, NoNegativesInsideLeavesBoxUnchanged) {
  const HyperRectangle box = make_box({0, 0}, {1, 1});
  Matrix pos(1, 2), neg(1, 2);
  pos << 0.5, 0.5;
  neg << 3, 3;
  for (const Matrix& n : {neg, Matrix(0, 2)}) {
    HyperRectangle s = box_shrink(box, pos, n);
    EXPECT_EQ(s.provenance.kind, ProvenanceKind::Shrunk);
    s.provenance = box.provenance;
    EXPECT_EQ(s, box);
  }
}

TEST(BoxShrink, CoincidentPointsEvictEverything) {
  const HyperRectangle box = make_box({0, 0}, {1, 1});
  Matrix p(1, 2);
  p << 0.5, 0.5;
  EXPECT_EQ(kind_of([&] { box_shrink(box, p, p); }), ErrorKind::AllPositivesEvicted);
}

TEST(BoxShrink, RandomInstancesExcludeNegativesAndStayInside) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Matrix pos = random_matrix(12, 3, seed * 2 + 100);
    const Matrix neg = random_matrix(8, 3, seed * 2 + 101);
    const HyperRectangle box = box_around(pos, 0, {});
    HyperRectangle s;
    try {
      s = box_shrink(box, pos, neg);
    } catch (const Error& e) {
      ASSERT_EQ(e.kind(), ErrorKind::AllPositivesEvicted);
      continue;
    }
    EXPECT_NO_THROW(s.validate());
    for (Eigen::Index d = 0; d < 3; ++d) {
      EXPECT_GE(s.lower[d], box.lower[d]);
      EXPECT_LE(s.upper[d], box.upper[d]);
    }
    for (Eigen::Index r = 0; r < neg.rows(); ++r) EXPECT_FALSE(box_contains(s, neg.row(r).transpose()));
    bool any = false;
    for (Eigen::Index r = 0; r < pos.rows(); ++r) any |= box_contains(s, pos.row(r).transpose());
    EXPECT_TRUE(any);
  }
}

TEST(KMeans, ObjectiveNonIncreasingAndDeterministic) {
  const Matrix x = random_matrix(80, 3, 7);
  const KMeansResult a = kmeans(x, 4, 11);
  for (std::size_t i = 1; i < a.objective_history.size(); ++i) {
    EXPECT_LE(a.objective_history[i], a.objective_history[i - 1] + 1e-12);
  }
  const KMeansResult b = kmeans(x, 4, 11);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(kind_of([&] { kmeans(x, 81, 0); }), ErrorKind::KTooLarge);
}

TEST(BoxCluster, KOneEqualsNaive) {
  const Matrix x = random_matrix(30, 4, 8);
  std::vector<std::size_t> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = i % 2;
  const auto boxes = box_cluster(x, labels, 1, 1, 3);
  ASSERT_EQ(boxes.size(), 1u);
  const HyperRectangle naive = box_naive(x, labels, 1);
  EXPECT_EQ(boxes[0].lower, naive.lower);
  EXPECT_EQ(boxes[0].upper, naive.upper);
  EXPECT_EQ(boxes[0].provenance.kind, ProvenanceKind::Clustered);
}

TEST(BoxCluster, KEqualsCountGivesPointBoxes) {
  const Matrix x = random_matrix(6, 2, 9);
  const std::vector<std::size_t> labels(6, 0);
  const auto boxes = box_cluster(x, labels, 0, 6, 1);
  ASSERT_EQ(boxes.size(), 6u);
  for (const auto& b : boxes) EXPECT_EQ(b.lower, b.upper);
  EXPECT_EQ(kind_of([&] { box_cluster(x, labels, 0, 7, 1); }), ErrorKind::KTooLarge);
  EXPECT_EQ(kind_of([&] { box_cluster(x, labels, 1, 1, 1); }), ErrorKind::EmptyClass);
}

TEST(BoxCluster, SeparatedBlobsShrinkVolume) {
  Rng rng(4);
  Matrix x(40, 2);
  for (Eigen::Index r = 0; r < 40; ++r) {
    const double c = r < 20 ? 0.0 : 10.0;
    x(r, 0) = c + rng.uniform(-1, 1);
    x(r, 1) = c + rng.uniform(-1, 1);
  }
  const std::vector<std::size_t> labels(40, 0);
  const auto boxes = box_cluster(x, labels, 0, 2, 5);
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_LT(box_log_volume(boxes[0]) + box_log_volume(boxes[1]),
            box_log_volume(box_naive(x, labels, 0)));
}

TEST(BoxFromPerturbations, MatchesBruteForceScan) {
  const LabeledSentence s{"are you actually a human being", 1, std::nullopt, Split::Test};
  const PerturbationPolicy policy{{PerturbationKind::CharDelete}, 10, 21};
  const auto embedder = hashed_ngram_embedder(12);
  std::vector<std::string> texts{s.text};
  for (auto& v : perturb_variants(s.text, policy, 3).variants) texts.push_back(v);
  ASSERT_EQ(texts.size(), 11u);
  const Matrix x = embedder->embed(texts);
  const Preparation prep = Preparation::fit(x, true, 5);
  const Matrix y = prep.apply(x);

  const HyperRectangle b = box_from_perturbations(s, 3, policy, *embedder, prep);
  EXPECT_EQ(b.target_class, 1u);
  EXPECT_EQ(b.provenance.kind, ProvenanceKind::PerturbationBased);
  EXPECT_EQ(b.provenance.index, 3u);
  for (Eigen::Index d = 0; d < 5; ++d) {
    double lo = y(0, d), hi = y(0, d);
    for (Eigen::Index r = 1; r < y.rows(); ++r) {
      lo = std::min(lo, y(r, d));
      hi = std::max(hi, y(r, d));
    }
    EXPECT_EQ(b.lower[d], lo);
    EXPECT_EQ(b.upper[d], hi);
  }
  EXPECT_TRUE(box_contains(b, y.row(0).transpose()));
}

TEST(BoxFromPerturbations, FailingKindGivesDegenerateBox) {
  const LabeledSentence s{"ab cd", 0, std::nullopt, Split::Test};
  const auto embedder = hashed_ngram_embedder(8);
  const Preparation prep = Preparation::identity(8);
  const HyperRectangle b =
      box_from_perturbations(s, 0, {{PerturbationKind::CharDelete}, 1, 0}, *embedder, prep);
  EXPECT_EQ(b.lower, b.upper);
  EXPECT_EQ(b.lower, embedder->embed_one("ab cd"));
}

TEST(EpsCube, BoundsAndVolume) {
  const HyperRectangle b = eps_cube(Vector::Zero(2), 0.5, 1, 4);
  EXPECT_EQ(b.lower, Vector::Constant(2, -0.5));
  EXPECT_EQ(b.upper, Vector::Constant(2, 0.5));
  EXPECT_EQ(b.provenance.kind, ProvenanceKind::EpsCube);
  EXPECT_EQ(b.provenance.epsilon, 0.5);
  const HyperRectangle c = eps_cube(Vector::Ones(7), 0.01, 0, 0);
  EXPECT_NEAR(box_log_volume(c), 7 * std::log(0.02), 1e-12);
  EXPECT_THROW(eps_cube(Vector::Zero(2), 0.0, 0, 0), Error);
}

TEST(Box, ContainsVolumeAndSampling) {
  const HyperRectangle point = make_box({1, 2}, {1, 2});
  EXPECT_TRUE(box_contains(point, (Vector(2) << 1, 2).finished()));
  EXPECT_FALSE(box_contains(point, (Vector(2) << 1, 2.0000001).finished()));
  EXPECT_EQ(box_log_volume(point), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(box_log_volume(make_box({0, 0, 0}, {1, 1, 1})), 0.0);
  EXPECT_EQ(kind_of([&] { box_contains(point, Vector::Zero(3)); }), ErrorKind::DimMismatch);

  const HyperRectangle b = make_box({0, 0}, {2, 1});
  const Matrix s = box_sample(b, 10000, 8);
  EXPECT_EQ(s, box_sample(b, 10000, 8));
  const Vector mean = s.colwise().mean().transpose();
  // Uniform variance is w^2 / 12.
  EXPECT_LT(std::abs(mean[0] - 1.0), 3 * std::sqrt(4.0 / 12 / 10000));
  EXPECT_LT(std::abs(mean[1] - 0.5), 3 * std::sqrt(1.0 / 12 / 10000));
  for (Eigen::Index r = 0; r < s.rows(); ++r) EXPECT_TRUE(box_contains(b, s.row(r).transpose()));
}

TEST(Box, ValidateRejectsBadBounds) {
  EXPECT_THROW(make_box({1}, {0}).validate(), Error);
  EXPECT_THROW(make_box({0}, {std::numeric_limits<double>::infinity()}).validate(), Error);
  EXPECT_NO_THROW(make_box({0}, {0}).validate());
}

TEST(BoxFiles, JsonlRoundTrip) {
  std::vector<HyperRectangle> boxes{make_box({0.1, -2}, {0.3, 1e-17}, 1), eps_cube(Vector::Ones(2), 0.25, 0, 9)};
  boxes[0].provenance = {ProvenanceKind::Shrunk, 2, 0.0};
  boxes[0].open_lower = {false, true};
  boxes[0].open_upper = {false, false};
  const auto back = boxes_from_jsonl(boxes_to_jsonl(boxes));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], boxes[0]);
  EXPECT_EQ(back[1], boxes[1]);
  EXPECT_EQ(boxes_to_jsonl(back), boxes_to_jsonl(boxes));
  EXPECT_EQ(kind_of([] { boxes_from_jsonl("{\"lower\": [1]}\n"); }), ErrorKind::ParseError);
}

}  // namespace
}  // namespace nlv
