#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "webreplay/net/http.hpp"

using SSL = struct ssl_st;
using SSL_CTX = struct ssl_ctx_st;
using X509 = struct x509_st;
using EVP_PKEY = struct evp_pkey_st;

namespace webreplay::net {

struct SslCtxDeleter {
  void operator()(SSL_CTX* ctx) const;
};
using SslCtxPtr = std::unique_ptr<SSL_CTX, SslCtxDeleter>;

/// TLS session layered over another stream. Owns the inner stream when one
/// is handed over.
class TlsStream : public Stream {
 public:
  ~TlsStream() override;

  /// Server-side handshake on `inner` (not owned). Throws TlsError.
  static std::unique_ptr<TlsStream> accept(Stream& inner, SSL_CTX* ctx);
  /// Client-side handshake with SNI and hostname verification (when the
  /// context verifies peers). Takes ownership of `inner`. Throws TlsError.
  static std::unique_ptr<TlsStream> connect(std::unique_ptr<Stream> inner, SSL_CTX* ctx,
                                            const std::string& host);

  std::size_t read_some(char* buf, std::size_t n) override;
  void write_all(std::string_view data) override;
  void shutdown() override;
  int native_handle() const override { return inner_->native_handle(); }

 private:
  TlsStream() = default;

  SSL* ssl_ = nullptr;
  Stream* inner_ = nullptr;
  std::unique_ptr<Stream> owned_;
};

/// Client context. With `verify` false any certificate is accepted.
SslCtxPtr make_client_context(bool verify, const std::string& ca_file = {});

/// PEM bundle (certificate followed by private key).
struct PemBundle {
  std::string cert_pem;
  std::string key_pem;
  std::string combined() const { return cert_pem + key_pem; }
};

/// Operator-side local CA used to intercept HTTPS while recording. Leaf
/// certificates are minted per host on first use and cached.
class CertificateAuthority {
 public:
  /// Reads a PEM file holding the CA certificate and its private key.
  /// Throws TlsError.
  static CertificateAuthority load(const std::string& pem_path);
  static CertificateAuthority from_pem(const std::string& pem);

  /// Fresh self-signed CA (EC P-256, SHA-256, valid ten years).
  static PemBundle generate(const std::string& common_name);

  CertificateAuthority(CertificateAuthority&&) noexcept;
  CertificateAuthority& operator=(CertificateAuthority&&) = delete;
  ~CertificateAuthority();

  /// Server context presenting a leaf for `host` (DNS name or IP literal).
  SSL_CTX* server_context(const std::string& host);
  /// Leaf certificate + key for `host`, signed by this CA.
  PemBundle issue(const std::string& host) const;

 private:
  CertificateAuthority() = default;

  X509* ca_cert_ = nullptr;
  EVP_PKEY* ca_key_ = nullptr;
  EVP_PKEY* leaf_key_ = nullptr;
  std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
  std::map<std::string, SslCtxPtr> contexts_;
};

}  // namespace webreplay::net
