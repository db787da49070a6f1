#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// One code per distinct failure the file formats and the numeric core can
// report; the CLI maps codes onto process exit codes.
enum class ErrCode {
  ShapeMismatch,
  BadArgument,
  NonFinite,
  MissingGrad,
  Fsv1BadMagic,
  Fsv1Truncated,
  Fsv1BadDtype,
  Fsv1BadRank,
  Fsv1DimOverflow,
  FspmBadMagic,
  FspmVersionMismatch,
  FspmCorruptTable,
  DataError,
  ConfigError,
  DigestMismatch,
  IoError,
};

class Error : public std::runtime_error {
 public:
  Error(ErrCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}

  ErrCode code() const { return code_; }

  // Process exit codes: 2 usage/config, 3 data/format, 4 numeric.
  int exit_code() const {
    switch (code_) {
      case ErrCode::ConfigError:
        return 2;
      case ErrCode::NonFinite:
      case ErrCode::MissingGrad:
        return 4;
      default:
        return 3;
    }
  }

 private:
  ErrCode code_;
};

}  // namespace fewshot
