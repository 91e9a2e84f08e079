#pragma once

#include <cstddef>
#include <string>
#include <vector>

/// Test-only network guard. Linking net_guard.cpp into a test binary
/// interposes connect() and getaddrinfo() for the whole process. While
/// armed, every connect to a destination that is not an allowed loopback
/// port and every name lookup of a non-literal host is recorded as a
/// violation. Calls still go through, so a violation never changes test
/// behaviour, it is only counted.
namespace netguard {

struct Attempt {
  std::string what;
  bool allowed = false;
};

void arm();
void disarm();
/// Clears the allowlist and the attempt log.
void reset();
void allow_port(int port);

std::size_t connects();
std::size_t violations();
std::vector<Attempt> attempts();

/// Arms on construction and disarms on destruction.
class Scope {
 public:
  Scope() { arm(); }
  ~Scope() { disarm(); }
};

}  // namespace netguard
