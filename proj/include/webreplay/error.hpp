#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace webreplay {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define WEBREPLAY_DEFINE_ERROR(Name)      \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

// signature
WEBREPLAY_DEFINE_ERROR(MalformedRequest);
WEBREPLAY_DEFINE_ERROR(RuleScopeError);

// rules
WEBREPLAY_DEFINE_ERROR(ParseError);
WEBREPLAY_DEFINE_ERROR(SchemaError);
WEBREPLAY_DEFINE_ERROR(RegexError);

// archive / network
WEBREPLAY_DEFINE_ERROR(BindError);
WEBREPLAY_DEFINE_ERROR(UpstreamError);
WEBREPLAY_DEFINE_ERROR(WriteError);
WEBREPLAY_DEFINE_ERROR(IsolationViolation);
WEBREPLAY_DEFINE_ERROR(TlsError);

// envserve
WEBREPLAY_DEFINE_ERROR(MountError);
WEBREPLAY_DEFINE_ERROR(UnknownEnv);
WEBREPLAY_DEFINE_ERROR(UnknownTask);
WEBREPLAY_DEFINE_ERROR(UnknownSession);

// agent_eval
WEBREPLAY_DEFINE_ERROR(EmptyTrajectory);
WEBREPLAY_DEFINE_ERROR(UnparseableVerdict);
WEBREPLAY_DEFINE_ERROR(JudgeTransportError);
WEBREPLAY_DEFINE_ERROR(KTooLarge);
WEBREPLAY_DEFINE_ERROR(InvalidTrajectory);

// cli
WEBREPLAY_DEFINE_ERROR(UsageError);
WEBREPLAY_DEFINE_ERROR(ConfigError);

#undef WEBREPLAY_DEFINE_ERROR

/// Raised when an archive fails verification. `seq()` names the first
/// exchange that could not be trusted (0 when the manifest itself is bad).
class CorruptArchive : public Error {
 public:
  CorruptArchive(const std::string& what, std::uint64_t seq)
      : Error(what), seq_(seq) {}
  std::uint64_t seq() const noexcept { return seq_; }

 private:
  std::uint64_t seq_;
};

}  // namespace webreplay
