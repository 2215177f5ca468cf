#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dkbo/errors.hpp"
#include "dkbo/params.hpp"

namespace dkbo {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Op : int {
  Constant = 0,
  Parameter,
  Add,
  Sub,
  Neg,
  Mul,
  Div,
  MatMul,
  Transpose,
  Exp,
  Log,
  Sqrt,
  Relu,
  NormPdf,
  NormCdf,
  PairwiseSqDist,
  Cholesky,
  SolveTriLower,
  SolveTriUpper,
  Sum,
  TakeDiag,
  LogSoftmax,
  GatherRows,
  HStack,
  OpCount_,
};

// Registry of primitive operations. Node construction rejects anything that
// is not listed here.
inline const char* op_name(Op op) {
  static const char* names[] = {
      "constant",       "parameter",   "add",       "sub",       "neg",
      "mul",            "div",         "matmul",    "transpose", "exp",
      "log",            "sqrt",        "relu",      "norm_pdf",  "norm_cdf",
      "pairwise_sqdist", "cholesky",   "solve_tril", "solve_triu", "sum",
      "take_diag",      "log_softmax", "gather_rows", "hstack",
  };
  const int i = static_cast<int>(op);
  if (i < 0 || i >= static_cast<int>(Op::OpCount_))
    throw ContractError("unregistered primitive operation id " + std::to_string(i));
  return names[i];
}

inline constexpr double kInvSqrt2Pi = 0.3989422804014326779399461;

inline double normal_pdf_scalar(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
inline double normal_cdf_scalar(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

class Tape;

// Handle to a node on a tape.
struct Var {
  int id = -1;
  Tape* tape = nullptr;

  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape over dense matrices. Built define-by-run: each primitive
// call evaluates immediately and appends a node, so the recorded value is the
// direct forward value by construction. Single-writer; build one tape per
// episode/program and share only immutable parameter snapshots across tapes.
class Tape {
 public:
  Tape() = default;
  explicit Tape(ParameterVector snapshot) : params_(std::move(snapshot)) {}

  const ParameterVector& parameters() const { return params_; }
  std::size_t node_count() const { return nodes_.size(); }

  Var constant(Mat value) { return push(Op::Constant, -1, -1, std::move(value)); }
  Var constant(double v) { return push(Op::Constant, -1, -1, Mat::Constant(1, 1, v)); }

  Var param(const std::string& segment) {
    if (!params_.layout) throw ContractError("Tape::param: tape has no parameter snapshot");
    auto it = param_cache_.find(segment);
    if (it != param_cache_.end()) return it->second;
    const SegmentSpec& seg = params_.layout->at(segment);
    Var v = push(Op::Parameter, -1, -1, params_.matrix(segment));
    nodes_[v.id].segment = static_cast<int>(&seg - params_.layout->segments().data());
    param_cache_[segment] = v;
    return v;
  }

  const Mat& value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  double value_scalar(Var v) const {
    const Mat& m = value(v);
    if (m.size() != 1) throw ContractError("value_scalar: node is not 1x1");
    return m(0, 0);
  }

  // dLoss/dPsi for a single scalar loss node. Visits each node at most once,
  // in reverse construction order (inputs always precede their consumers).
  ParameterVector backward(Var loss) const {
    check_owned(loss);
    if (nodes_[loss.id].value.size() != 1)
      throw ContractError("backward: loss must be a 1x1 scalar node");
    if (!params_.layout) throw ContractError("backward: tape has no parameter snapshot");

    std::vector<Mat> grad(nodes_.size());
    grad[loss.id] = Mat::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      if (grad[i].size() == 0) continue;
      propagate(i, grad);
    }

    ParameterVector out = params_.zeros_like();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.op != Op::Parameter || grad[i].size() == 0) continue;
      const SegmentSpec& seg = params_.layout->segments()[n.segment];
      Eigen::Map<Mat>(out.values.data() + seg.offset, seg.rows, seg.cols) += grad[i];
    }
    return out;
  }

  // --- primitive builders -------------------------------------------------

  Var add(Var a, Var b) { return binary_broadcast(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary_broadcast(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary_broadcast(Op::Mul, a, b); }
  Var div(Var a, Var b) { return binary_broadcast(Op::Div, a, b); }

  Var neg(Var a) { return push(Op::Neg, a.id, -1, -value(a)); }

  Var matmul(Var a, Var b) {
    check_owned(a);
    check_owned(b);
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw ContractError("matmul: inner dimensions differ");
    return push(Op::MatMul, a.id, b.id, A * B);
  }

  Var transpose(Var a) { return push(Op::Transpose, a.id, -1, value(a).transpose()); }

  Var exp(Var a) { return push(Op::Exp, a.id, -1, value(a).array().exp().matrix()); }
  Var log(Var a) { return push(Op::Log, a.id, -1, value(a).array().log().matrix()); }
  Var sqrt(Var a) { return push(Op::Sqrt, a.id, -1, value(a).array().sqrt().matrix()); }
  Var relu(Var a) { return push(Op::Relu, a.id, -1, value(a).cwiseMax(0.0)); }

  Var normal_pdf(Var a) {
    return push(Op::NormPdf, a.id, -1,
                (kInvSqrt2Pi * (-0.5 * value(a).array().square()).exp()).matrix());
  }
  Var normal_cdf(Var a) {
    return push(Op::NormCdf, a.id, -1,
                (0.5 * (-value(a).array() * M_SQRT1_2).erfc()).matrix());
  }

  // D(i,j) = |A.row(i) - B.row(j)|^2, evaluated pairwise so that identical
  // rows give exactly zero and D is exactly symmetric when a == b.
  Var pairwise_sqdist(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.cols()) throw ContractError("pairwise_sqdist: feature dimensions differ");
    Mat D(A.rows(), B.rows());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      for (Eigen::Index j = 0; j < B.rows(); ++j)
        D(i, j) = (A.row(i) - B.row(j)).squaredNorm();
    return push(Op::PairwiseSqDist, a.id, b.id, std::move(D));
  }

  // Lower Cholesky factor of the symmetrized input. Kernel matrices of
  // near-duplicate points can be numerically indefinite, so on failure a
  // jitter of 1e-10*(mean diagonal) is added and escalated 10x, three tries,
  // before giving up.
  Var cholesky(Var k) {
    const Mat& K = value(k);
    if (K.rows() != K.cols()) throw ContractError("cholesky: matrix must be square");
    Mat M = 0.5 * (K + K.transpose());
    const double mean_diag = M.diagonal().mean();
    double jitter = 1e-10 * (mean_diag > 0 ? mean_diag : 1.0);
    Eigen::LLT<Mat> llt(M);
    for (int attempt = 0; llt.info() != Eigen::Success && attempt < 3; ++attempt) {
      llt.compute(M + jitter * Mat::Identity(M.rows(), M.cols()));
      jitter *= 10.0;
    }
    if (llt.info() != Eigen::Success)
      throw NumericalError("cholesky: factorization failed after jitter escalation (n=" +
                           std::to_string(M.rows()) + ")");
    return push(Op::Cholesky, k.id, -1, Mat(llt.matrixL()));
  }

  Var solve_tril(Var l, Var b) {
    const Mat& L = value(l);
    const Mat& B = value(b);
    if (L.rows() != L.cols() || L.rows() != B.rows())
      throw ContractError("solve_tril: dimension mismatch");
    return push(Op::SolveTriLower, l.id, b.id, L.triangularView<Eigen::Lower>().solve(B));
  }

  Var solve_triu(Var u, Var b) {
    const Mat& U = value(u);
    const Mat& B = value(b);
    if (U.rows() != U.cols() || U.rows() != B.rows())
      throw ContractError("solve_triu: dimension mismatch");
    return push(Op::SolveTriUpper, u.id, b.id, U.triangularView<Eigen::Upper>().solve(B));
  }

  Var sum(Var a) { return push(Op::Sum, a.id, -1, Mat::Constant(1, 1, value(a).sum())); }

  Var take_diag(Var a) {
    const Mat& A = value(a);
    if (A.rows() != A.cols()) throw ContractError("take_diag: matrix must be square");
    return push(Op::TakeDiag, a.id, -1, A.diagonal());
  }

  // Column vector in, column vector out; subtracts the max before
  // exponentiating so arbitrarily large logits stay finite.
  Var log_softmax(Var a) {
    const Mat& V = value(a);
    if (V.cols() != 1 || V.rows() < 1) throw ContractError("log_softmax: expects a column vector");
    const double m = V.maxCoeff();
    const double lse = m + std::log((V.array() - m).exp().sum());
    return push(Op::LogSoftmax, a.id, -1, (V.array() - lse).matrix());
  }

  Var gather_rows(Var a, std::vector<int> rows) {
    const Mat& A = value(a);
    Mat out(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= A.rows()) throw ContractError("gather_rows: index out of range");
      out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    }
    Var v = push(Op::GatherRows, a.id, -1, std::move(out));
    nodes_[v.id].gather = std::move(rows);
    return v;
  }

  Var hstack(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows()) throw ContractError("hstack: row counts differ");
    Mat out(A.rows(), A.cols() + B.cols());
    out << A, B;
    return push(Op::HStack, a.id, b.id, std::move(out));
  }

 private:
  struct Node {
    Op op;
    int a = -1, b = -1;
    Mat value;
    std::vector<int> gather;  // GatherRows only
    int segment = -1;         // Parameter only
  };

  void check_owned(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw ContractError("Var does not belong to this tape");
  }

  Var push(Op op, int a, int b, Mat value) {
    op_name(op);  // rejects unregistered primitives
    if (value.hasNaN())
      throw TaintedValueError("NaN produced in forward pass at node " +
                              std::to_string(nodes_.size()) + " (" + op_name(op) + ")");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1, this};
  }

  // Broadcast semantics for elementwise binaries: same shape, or one operand
  // is 1x1, or one operand is a 1xM row against an NxM matrix.
  static bool broadcastable(const Mat& a, const Mat& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return true;
    if (a.size() == 1 || b.size() == 1) return true;
    if (a.rows() == 1 && a.cols() == b.cols()) return true;
    if (b.rows() == 1 && b.cols() == a.cols()) return true;
    return false;
  }

  static Mat expand(const Mat& a, Eigen::Index r, Eigen::Index c) {
    if (a.rows() == r && a.cols() == c) return a;
    if (a.size() == 1) return Mat::Constant(r, c, a(0, 0));
    if (a.rows() == 1 && a.cols() == c) return a.replicate(r, 1);
    throw ContractError("broadcast: incompatible shapes");
  }

  static Mat reduce_to(const Mat& g, Eigen::Index r, Eigen::Index c) {
    if (g.rows() == r && g.cols() == c) return g;
    if (r == 1 && c == 1) return Mat::Constant(1, 1, g.sum());
    if (r == 1 && g.cols() == c) return g.colwise().sum();
    throw ContractError("broadcast reduce: incompatible shapes");
  }

  Var binary_broadcast(Op op, Var a, Var b) {
    check_owned(a);
    check_owned(b);
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (!broadcastable(A, B))
      throw ContractError(std::string(op_name(op)) + ": incompatible shapes " +
                          std::to_string(A.rows()) + "x" + std::to_string(A.cols()) + " vs " +
                          std::to_string(B.rows()) + "x" + std::to_string(B.cols()));
    const Eigen::Index r = std::max(A.rows(), B.rows());
    const Eigen::Index c = std::max(A.cols(), B.cols());
    Mat ea = expand(A, r, c);
    Mat eb = expand(B, r, c);
    Mat out;
    switch (op) {
      case Op::Add: out = ea + eb; break;
      case Op::Sub: out = ea - eb; break;
      case Op::Mul: out = ea.cwiseProduct(eb); break;
      case Op::Div: out = ea.cwiseQuotient(eb); break;
      default: throw ContractError("binary_broadcast: not an elementwise binary op");
    }
    return push(op, a.id, b.id, std::move(out));
  }

  void accum(std::vector<Mat>& grad, int id, const Mat& delta) const {
    if (id < 0) return;
    if (grad[id].size() == 0)
      grad[id] = delta;
    else
      grad[id] += delta;
  }

  void propagate(int i, std::vector<Mat>& grad) const {
    const Node& n = nodes_[i];
    const Mat& g = grad[i];
    switch (n.op) {
      case Op::Constant:
      case Op::Parameter:
        break;
      case Op::Add: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        accum(grad, n.a, reduce_to(g, A.rows(), A.cols()));
        accum(grad, n.b, reduce_to(g, B.rows(), B.cols()));
        break;
      }
      case Op::Sub: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        accum(grad, n.a, reduce_to(g, A.rows(), A.cols()));
        accum(grad, n.b, reduce_to(-g, B.rows(), B.cols()));
        break;
      }
      case Op::Neg:
        accum(grad, n.a, -g);
        break;
      case Op::Mul: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        accum(grad, n.a, reduce_to(g.cwiseProduct(expand(B, g.rows(), g.cols())), A.rows(), A.cols()));
        accum(grad, n.b, reduce_to(g.cwiseProduct(expand(A, g.rows(), g.cols())), B.rows(), B.cols()));
        break;
      }
      case Op::Div: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        Mat eb = expand(B, g.rows(), g.cols());
        accum(grad, n.a, reduce_to(g.cwiseQuotient(eb), A.rows(), A.cols()));
        Mat ea = expand(A, g.rows(), g.cols());
        accum(grad, n.b,
              reduce_to((-g.cwiseProduct(ea).cwiseQuotient(eb.cwiseProduct(eb))), B.rows(), B.cols()));
        break;
      }
      case Op::MatMul: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        accum(grad, n.a, g * B.transpose());
        accum(grad, n.b, A.transpose() * g);
        break;
      }
      case Op::Transpose:
        accum(grad, n.a, g.transpose());
        break;
      case Op::Exp:
        accum(grad, n.a, g.cwiseProduct(n.value));
        break;
      case Op::Log:
        accum(grad, n.a, g.cwiseQuotient(nodes_[n.a].value));
        break;
      case Op::Sqrt:
        accum(grad, n.a, (g.array() / (2.0 * n.value.array())).matrix());
        break;
      case Op::Relu: {
        const Mat& A = nodes_[n.a].value;
        // subgradient 0 at exactly 0
        accum(grad, n.a, (g.array() * (A.array() > 0.0).cast<double>()).matrix());
        break;
      }
      case Op::NormPdf: {
        const Mat& A = nodes_[n.a].value;
        accum(grad, n.a, (-g.array() * A.array() * n.value.array()).matrix());
        break;
      }
      case Op::NormCdf: {
        const Mat& A = nodes_[n.a].value;
        accum(grad, n.a,
              (g.array() * (kInvSqrt2Pi * (-0.5 * A.array().square()).exp())).matrix());
        break;
      }
      case Op::PairwiseSqDist: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        Mat da = 2.0 * (g.rowwise().sum().asDiagonal() * A - g * B);
        Mat db = 2.0 * (g.colwise().sum().transpose().asDiagonal() * B - g.transpose() * A);
        accum(grad, n.a, da);
        accum(grad, n.b, db);
        break;
      }
      case Op::Cholesky: {
        // Reverse of K -> L with K read symmetrized: with P the lower
        // triangle of L^T g (diagonal halved), dK = sym(L^-T P L^-1).
        const Mat& L = n.value;
        Mat P = (L.transpose() * g).triangularView<Eigen::Lower>();
        P.diagonal() *= 0.5;
        Mat X = L.transpose().triangularView<Eigen::Upper>().solve(P);
        Mat S = L.transpose().triangularView<Eigen::Upper>().solve(X.transpose()).transpose();
        accum(grad, n.a, 0.5 * (S + S.transpose()));
        break;
      }
      case Op::SolveTriLower: {
        const Mat& L = nodes_[n.a].value;
        const Mat& X = n.value;
        Mat gb = L.transpose().triangularView<Eigen::Upper>().solve(g);
        Mat gl = (-(gb * X.transpose())).triangularView<Eigen::Lower>();
        accum(grad, n.a, gl);
        accum(grad, n.b, gb);
        break;
      }
      case Op::SolveTriUpper: {
        const Mat& U = nodes_[n.a].value;
        const Mat& X = n.value;
        Mat gb = U.transpose().triangularView<Eigen::Lower>().solve(g);
        Mat gu = (-(gb * X.transpose())).triangularView<Eigen::Upper>();
        accum(grad, n.a, gu);
        accum(grad, n.b, gb);
        break;
      }
      case Op::Sum: {
        const Mat& A = nodes_[n.a].value;
        accum(grad, n.a, Mat::Constant(A.rows(), A.cols(), g(0, 0)));
        break;
      }
      case Op::TakeDiag: {
        const Mat& A = nodes_[n.a].value;
        Mat da = Mat::Zero(A.rows(), A.cols());
        da.diagonal() = g.col(0);
        accum(grad, n.a, da);
        break;
      }
      case Op::LogSoftmax: {
        const Mat& A = nodes_[n.a].value;
        const double m = A.maxCoeff();
        Vec p = (A.array() - m).exp();
        p /= p.sum();
        accum(grad, n.a, g - g.sum() * p);
        break;
      }
      case Op::GatherRows: {
        const Mat& A = nodes_[n.a].value;
        Mat da = Mat::Zero(A.rows(), A.cols());
        for (std::size_t r = 0; r < n.gather.size(); ++r)
          da.row(n.gather[r]) += g.row(static_cast<Eigen::Index>(r));
        accum(grad, n.a, da);
        break;
      }
      case Op::HStack: {
        const Mat& A = nodes_[n.a].value;
        accum(grad, n.a, g.leftCols(A.cols()));
        accum(grad, n.b, g.rightCols(g.cols() - A.cols()));
        break;
      }
      default:
        throw ContractError("backward: unhandled op " + std::string(op_name(n.op)));
    }
  }

  ParameterVector params_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, Var> param_cache_;
};

// --- free-function / operator sugar ---------------------------------------

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }
inline Var operator+(Var a, double b) { return a + a.tape->constant(b); }
inline Var operator+(double a, Var b) { return b.tape->constant(a) + b; }
inline Var operator-(Var a, double b) { return a - a.tape->constant(b); }
inline Var operator-(double a, Var b) { return b.tape->constant(a) - b; }
inline Var operator*(Var a, double b) { return a * a.tape->constant(b); }
inline Var operator*(double a, Var b) { return b.tape->constant(a) * b; }
inline Var operator/(Var a, double b) { return a / a.tape->constant(b); }
inline Var operator/(double a, Var b) { return b.tape->constant(a) / b; }

inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var transpose(Var a) { return a.tape->transpose(a); }
inline Var exp(Var a) { return a.tape->exp(a); }
inline Var log(Var a) { return a.tape->log(a); }
inline Var sqrt(Var a) { return a.tape->sqrt(a); }
inline Var relu(Var a) { return a.tape->relu(a); }
inline Var normal_pdf(Var a) { return a.tape->normal_pdf(a); }
inline Var normal_cdf(Var a) { return a.tape->normal_cdf(a); }
inline Var pairwise_sqdist(Var a, Var b) { return a.tape->pairwise_sqdist(a, b); }
inline Var cholesky(Var a) { return a.tape->cholesky(a); }
inline Var solve_tril(Var l, Var b) { return l.tape->solve_tril(l, b); }
inline Var solve_triu(Var u, Var b) { return u.tape->solve_triu(u, b); }
inline Var sum(Var a) { return a.tape->sum(a); }
inline Var take_diag(Var a) { return a.tape->take_diag(a); }
inline Var log_softmax(Var a) { return a.tape->log_softmax(a); }
inline Var gather_rows(Var a, std::vector<int> rows) {
  return a.tape->gather_rows(a, std::move(rows));
}
inline Var hstack(Var a, Var b) { return a.tape->hstack(a, b); }

// max(v, floor) elementwise via relu, keeping the relu subgradient convention
// on the clamped branch.
inline Var clamp_min(Var a, double floor) { return relu(a - floor) + floor; }

// --- gradient checking -----------------------------------------------------

using Program = std::function<Var(Tape&)>;

struct FiniteDiffReport {
  bool pass = false;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  Vec analytic;
  Vec numeric;
  Vec rel_error;
};

// Central-difference check of a scalar program against the tape gradient.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
inline FiniteDiffReport finite_difference_check(const Program& program,
                                                const ParameterVector& point, double step,
                                                double tolerance) {
  if (step <= 0.0) throw ContractError("finite_difference_check: step must be positive");
  FiniteDiffReport report;
  report.tolerance = tolerance;

  Tape tape(point);
  Var loss = program(tape);
  ParameterVector grad = tape.backward(loss);
  report.analytic = grad.values;

  const Eigen::Index n = point.size();
  report.numeric.resize(n);
  ParameterVector shifted = point;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double saved = shifted.values[i];
    shifted.values[i] = saved + step;
    Tape tp(shifted);
    const double fp = tp.value_scalar(program(tp));
    shifted.values[i] = saved - step;
    Tape tm(shifted);
    const double fm = tm.value_scalar(program(tm));
    shifted.values[i] = saved;
    report.numeric[i] = (fp - fm) / (2.0 * step);
  }

  report.rel_error.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = report.analytic[i];
    const double b = report.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    report.rel_error[i] = std::abs(a - b) / denom;
    if (report.rel_error[i] >= report.max_rel_error) {
      report.max_rel_error = report.rel_error[i];
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace dkbo
