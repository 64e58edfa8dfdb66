#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace deepgrade {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Input is well formed but numerically degenerate (zero variance, empty mask).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class CoverageError : public Error {
 public:
  CoverageError(int axis, std::size_t voxel)
      : Error("patch grid leaves voxel " + std::to_string(voxel) + " uncovered on axis " +
              std::to_string(axis)),
        axis_(axis),
        voxel_(voxel) {}

  int axis() const noexcept { return axis_; }
  std::size_t voxel() const noexcept { return voxel_; }

 private:
  int axis_;
  std::size_t voxel_;
};

class EmptyStructureError : public Error {
 public:
  explicit EmptyStructureError(unsigned structure_id)
      : Error("structure " + std::to_string(structure_id) + " has no voxels"), id_(structure_id) {}

  unsigned structure_id() const noexcept { return id_; }

 private:
  unsigned id_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual) : Error(what), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace deepgrade
