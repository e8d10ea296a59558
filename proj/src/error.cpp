#include "mega/error.hpp"

namespace mega {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidParams: return "invalid-params";
    case ErrorKind::InvalidRotation: return "invalid-rotation";
    case ErrorKind::Config: return "configuration";
    case ErrorKind::Fit: return "fit";
    case ErrorKind::InvalidToken: return "invalid-token";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::EmptyLoss: return "empty-loss";
    case ErrorKind::Divergence: return "training-divergence";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Schedule: return "schedule";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::NotPsd: return "not-psd";
    case ErrorKind::InsufficientSamples: return "insufficient-samples";
    case ErrorKind::CovarianceRank: return "covariance-rank";
    case ErrorKind::DegenerateRotation: return "degenerate-rotation";
    case ErrorKind::Io: return "io";
    case ErrorKind::CorruptCheckpoint: return "corrupt-checkpoint";
    case ErrorKind::Validation: return "validation";
  }
  return "error";
}

bool Error::is_validation() const noexcept {
  switch (kind_) {
    case ErrorKind::InvalidParams:
    case ErrorKind::InvalidRotation:
    case ErrorKind::Config:
    case ErrorKind::InvalidToken:
    case ErrorKind::Shape:
    case ErrorKind::CorruptCheckpoint:
    case ErrorKind::Validation:
      return true;
    default:
      return false;
  }
}

}  // namespace mega
