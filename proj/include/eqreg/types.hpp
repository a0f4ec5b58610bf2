#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace eqreg {

using Scalar = double;
using Index = Eigen::Index;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Points3 = Eigen::Matrix3Xd;

enum class Errc {
  InvalidArgument,
  DegenerateConfiguration,
  DegenerateCloud,
  ShapeMismatch,
  EmptyBatch,
  EmptyQuerySet,
  TooFewPoints,
  NonFiniteLoss,
  MissingCheckpoint,
  ConfigInvalid,
  UnknownFormat,
  CorruptCheckpoint,
  Io,
};

const char* to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::DegenerateConfiguration: return "DegenerateConfiguration";
    case Errc::DegenerateCloud: return "DegenerateCloud";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::EmptyQuerySet: return "EmptyQuerySet";
    case Errc::TooFewPoints: return "TooFewPoints";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::MissingCheckpoint: return "MissingCheckpoint";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::UnknownFormat: return "UnknownFormat";
    case Errc::CorruptCheckpoint: return "CorruptCheckpoint";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace eqreg
