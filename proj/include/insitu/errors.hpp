#pragma once

#include <stdexcept>
#include <string>

namespace insitu {

// Base of every error thrown by the library. Each subclass names one failure
// family so callers (and the CLI) can map it to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// A particle moved further than the ghost width in one step (dt too large).
class InstabilityError : public Error {
 public:
  using Error::Error;
};

class ResourceError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class IncompatibleError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

// A peer process disconnected or did not answer within its timeout.
class PeerLostError : public Error {
 public:
  using Error::Error;
};

class CompositeError : public Error {
 public:
  using Error::Error;
};

}  // namespace insitu
