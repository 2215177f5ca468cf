#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dkbo/errors.hpp"

namespace dkbo {

// Named matrix-shaped segment inside a flat parameter vector.
struct SegmentSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;

  Eigen::Index size() const { return rows * cols; }
};

// Immutable map from segment names to index ranges. Segments are laid out
// back to back, so ranges are disjoint and cover the whole vector by
// construction.
class ParamLayout {
 public:
  Eigen::Index add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw ContractError("ParamLayout: duplicate segment '" + name + "'");
    if (rows <= 0 || cols <= 0) throw ContractError("ParamLayout: segment '" + name + "' must be nonempty");
    SegmentSpec seg{name, rows, cols, total_};
    index_[name] = segments_.size();
    segments_.push_back(seg);
    total_ += seg.size();
    return seg.offset;
  }

  const SegmentSpec& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamLayout: unknown segment '" + name + "'");
    return segments_[it->second];
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<SegmentSpec>& segments() const { return segments_; }
  Eigen::Index total_size() const { return total_; }

 private:
  std::vector<SegmentSpec> segments_;
  std::unordered_map<std::string, std::size_t> index_;
  Eigen::Index total_ = 0;
};

// Flat 64-bit parameter store plus its layout. Matrices are packed
// column-major, so packing then unpacking a segment is the identity.
struct ParameterVector {
  std::shared_ptr<const ParamLayout> layout;
  Eigen::VectorXd values;

  ParameterVector() = default;
  explicit ParameterVector(std::shared_ptr<const ParamLayout> lay)
      : layout(std::move(lay)), values(Eigen::VectorXd::Zero(layout->total_size())) {}

  Eigen::Index size() const { return values.size(); }

  Eigen::MatrixXd matrix(const std::string& name) const {
    const SegmentSpec& seg = layout->at(name);
    return Eigen::Map<const Eigen::MatrixXd>(values.data() + seg.offset, seg.rows, seg.cols);
  }

  void set_matrix(const std::string& name, const Eigen::MatrixXd& m) {
    const SegmentSpec& seg = layout->at(name);
    if (m.rows() != seg.rows || m.cols() != seg.cols)
      throw ContractError("ParameterVector: shape mismatch for segment '" + name + "'");
    Eigen::Map<Eigen::MatrixXd>(values.data() + seg.offset, seg.rows, seg.cols) = m;
  }

  double scalar(const std::string& name) const {
    const SegmentSpec& seg = layout->at(name);
    if (seg.size() != 1) throw ContractError("ParameterVector: segment '" + name + "' is not scalar");
    return values[seg.offset];
  }

  void set_scalar(const std::string& name, double v) {
    const SegmentSpec& seg = layout->at(name);
    if (seg.size() != 1) throw ContractError("ParameterVector: segment '" + name + "' is not scalar");
    values[seg.offset] = v;
  }

  // Same layout, all-zero values. Gradient buffers share the layout.
  ParameterVector zeros_like() const {
    ParameterVector out;
    out.layout = layout;
    out.values = Eigen::VectorXd::Zero(values.size());
    return out;
  }
};

}  // namespace dkbo
