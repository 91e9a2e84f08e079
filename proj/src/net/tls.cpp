#include "webreplay/net/tls.hpp"

#include <arpa/inet.h>
#include <openssl/bn.h>
#include <openssl/ec.h>
#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/rand.h>
#include <openssl/ssl.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>

#include <fstream>
#include <sstream>

namespace webreplay::net {

namespace {

std::string ssl_error_text() {
  std::string out;
  while (const auto code = ERR_get_error()) {
    char buf[256];
    ERR_error_string_n(code, buf, sizeof buf);
    if (!out.empty()) out += "; ";
    out += buf;
  }
  return out.empty() ? "unknown TLS error" : out;
}

struct X509Deleter {
  void operator()(X509* x) const { X509_free(x); }
};
struct PkeyDeleter {
  void operator()(EVP_PKEY* k) const { EVP_PKEY_free(k); }
};
struct BioDeleter {
  void operator()(BIO* b) const { BIO_free(b); }
};
using X509Ptr = std::unique_ptr<X509, X509Deleter>;
using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyDeleter>;
using BioPtr = std::unique_ptr<BIO, BioDeleter>;

PkeyPtr generate_key() {
  EVP_PKEY_CTX* ctx = EVP_PKEY_CTX_new_id(EVP_PKEY_EC, nullptr);
  EVP_PKEY* key = nullptr;
  const bool ok = ctx && EVP_PKEY_keygen_init(ctx) > 0 &&
                  EVP_PKEY_CTX_set_ec_paramgen_curve_nid(ctx, NID_X9_62_prime256v1) > 0 &&
                  EVP_PKEY_keygen(ctx, &key) > 0;
  EVP_PKEY_CTX_free(ctx);
  if (!ok) throw TlsError("key generation failed: " + ssl_error_text());
  return PkeyPtr(key);
}

void add_extension(X509* cert, X509* issuer, int nid, const std::string& value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value.c_str());
  if (!ext) throw TlsError("bad certificate extension '" + value + "': " + ssl_error_text());
  X509_add_ext(cert, ext, -1);
  X509_EXTENSION_free(ext);
}

X509Ptr make_certificate(EVP_PKEY* subject_key, const std::string& common_name, X509* issuer,
                         EVP_PKEY* issuer_key, bool is_ca, long validity_days) {
  X509Ptr cert(X509_new());
  X509_set_version(cert.get(), 2);
  BIGNUM* serial = BN_new();
  BN_rand(serial, 120, BN_RAND_TOP_ANY, BN_RAND_BOTTOM_ANY);
  BN_to_ASN1_INTEGER(serial, X509_get_serialNumber(cert.get()));
  BN_free(serial);
  X509_gmtime_adj(X509_getm_notBefore(cert.get()), -24 * 3600);
  X509_gmtime_adj(X509_getm_notAfter(cert.get()), validity_days * 24 * 3600);
  X509_set_pubkey(cert.get(), subject_key);
  X509_NAME* name = X509_get_subject_name(cert.get());
  X509_NAME_add_entry_by_txt(name, "O", MBSTRING_ASC,
                             reinterpret_cast<const unsigned char*>("webreplay"), -1, -1, 0);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_UTF8,
                             reinterpret_cast<const unsigned char*>(common_name.c_str()), -1, -1, 0);
  X509* signer = issuer ? issuer : cert.get();
  X509_set_issuer_name(cert.get(), X509_get_subject_name(signer));

  add_extension(cert.get(), signer, NID_subject_key_identifier, "hash");
  if (is_ca) {
    add_extension(cert.get(), signer, NID_basic_constraints, "critical,CA:TRUE");
    add_extension(cert.get(), signer, NID_key_usage, "critical,keyCertSign,cRLSign");
  } else {
    add_extension(cert.get(), signer, NID_basic_constraints, "CA:FALSE");
    add_extension(cert.get(), signer, NID_authority_key_identifier, "keyid");
    add_extension(cert.get(), signer, NID_key_usage, "critical,digitalSignature");
    add_extension(cert.get(), signer, NID_ext_key_usage, "serverAuth");
    in6_addr probe{};
    const bool is_ip = inet_pton(AF_INET, common_name.c_str(), &probe) == 1 ||
                       inet_pton(AF_INET6, common_name.c_str(), &probe) == 1;
    add_extension(cert.get(), signer, NID_subject_alt_name,
                  (is_ip ? "IP:" : "DNS:") + common_name);
  }
  if (X509_sign(cert.get(), issuer_key, EVP_sha256()) <= 0)
    throw TlsError("certificate signing failed: " + ssl_error_text());
  return cert;
}

std::string to_pem(X509* cert) {
  BioPtr bio(BIO_new(BIO_s_mem()));
  PEM_write_bio_X509(bio.get(), cert);
  char* data = nullptr;
  const long n = BIO_get_mem_data(bio.get(), &data);
  return std::string(data, static_cast<std::size_t>(n));
}

std::string to_pem(EVP_PKEY* key) {
  BioPtr bio(BIO_new(BIO_s_mem()));
  PEM_write_bio_PrivateKey(bio.get(), key, nullptr, nullptr, 0, nullptr, nullptr);
  char* data = nullptr;
  const long n = BIO_get_mem_data(bio.get(), &data);
  return std::string(data, static_cast<std::size_t>(n));
}

}  // namespace

void SslCtxDeleter::operator()(SSL_CTX* ctx) const { SSL_CTX_free(ctx); }

TlsStream::~TlsStream() {
  if (ssl_) SSL_free(ssl_);
}

std::unique_ptr<TlsStream> TlsStream::accept(Stream& inner, SSL_CTX* ctx) {
  std::unique_ptr<TlsStream> out(new TlsStream());
  out->inner_ = &inner;
  out->ssl_ = SSL_new(ctx);
  SSL_set_fd(out->ssl_, inner.native_handle());
  if (SSL_accept(out->ssl_) != 1) throw TlsError("TLS accept failed: " + ssl_error_text());
  return out;
}

std::unique_ptr<TlsStream> TlsStream::connect(std::unique_ptr<Stream> inner, SSL_CTX* ctx,
                                              const std::string& host) {
  std::unique_ptr<TlsStream> out(new TlsStream());
  out->owned_ = std::move(inner);
  out->inner_ = out->owned_.get();
  out->ssl_ = SSL_new(ctx);
  SSL_set_fd(out->ssl_, out->inner_->native_handle());
  SSL_set_tlsext_host_name(out->ssl_, host.c_str());
  if (SSL_CTX_get_verify_mode(ctx) & SSL_VERIFY_PEER) {
    in6_addr probe{};
    if (inet_pton(AF_INET, host.c_str(), &probe) == 1 || inet_pton(AF_INET6, host.c_str(), &probe) == 1)
      X509_VERIFY_PARAM_set1_ip_asc(SSL_get0_param(out->ssl_), host.c_str());
    else
      SSL_set1_host(out->ssl_, host.c_str());
  }
  if (SSL_connect(out->ssl_) != 1) throw TlsError("TLS connect to " + host + " failed: " + ssl_error_text());
  return out;
}

std::size_t TlsStream::read_some(char* buf, std::size_t n) {
  const int got = SSL_read(ssl_, buf, static_cast<int>(n));
  if (got > 0) return static_cast<std::size_t>(got);
  const int err = SSL_get_error(ssl_, got);
  if (err == SSL_ERROR_ZERO_RETURN || err == SSL_ERROR_SYSCALL) return 0;
  throw ProtocolError("TLS read failed: " + ssl_error_text());
}

void TlsStream::write_all(std::string_view data) {
  while (!data.empty()) {
    const int sent = SSL_write(ssl_, data.data(), static_cast<int>(data.size()));
    if (sent <= 0) throw ProtocolError("TLS write failed: " + ssl_error_text());
    data.remove_prefix(static_cast<std::size_t>(sent));
  }
}

void TlsStream::shutdown() {
  SSL_shutdown(ssl_);
  inner_->shutdown();
}

SslCtxPtr make_client_context(bool verify, const std::string& ca_file) {
  SslCtxPtr ctx(SSL_CTX_new(TLS_client_method()));
  if (!ctx) throw TlsError("SSL_CTX_new failed: " + ssl_error_text());
  if (verify) {
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_PEER, nullptr);
    if (!ca_file.empty()) {
      if (SSL_CTX_load_verify_locations(ctx.get(), ca_file.c_str(), nullptr) != 1)
        throw TlsError("cannot load CA file " + ca_file + ": " + ssl_error_text());
    } else {
      SSL_CTX_set_default_verify_paths(ctx.get());
    }
  } else {
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_NONE, nullptr);
  }
  return ctx;
}

CertificateAuthority CertificateAuthority::load(const std::string& pem_path) {
  std::ifstream in(pem_path, std::ios::binary);
  if (!in) throw TlsError("cannot open CA file " + pem_path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_pem(ss.str());
}

CertificateAuthority CertificateAuthority::from_pem(const std::string& pem) {
  CertificateAuthority ca;
  BioPtr bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  ca.ca_cert_ = PEM_read_bio_X509(bio.get(), nullptr, nullptr, nullptr);
  if (!ca.ca_cert_) throw TlsError("CA PEM holds no certificate: " + ssl_error_text());
  BioPtr key_bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  ca.ca_key_ = PEM_read_bio_PrivateKey(key_bio.get(), nullptr, nullptr, nullptr);
  if (!ca.ca_key_) throw TlsError("CA PEM holds no private key: " + ssl_error_text());
  if (X509_check_private_key(ca.ca_cert_, ca.ca_key_) != 1)
    throw TlsError("CA private key does not match certificate");
  ca.leaf_key_ = generate_key().release();
  return ca;
}

PemBundle CertificateAuthority::generate(const std::string& common_name) {
  auto key = generate_key();
  auto cert = make_certificate(key.get(), common_name, nullptr, key.get(), true, 3650);
  return {to_pem(cert.get()), to_pem(key.get())};
}

CertificateAuthority::CertificateAuthority(CertificateAuthority&& o) noexcept
    : ca_cert_(std::exchange(o.ca_cert_, nullptr)),
      ca_key_(std::exchange(o.ca_key_, nullptr)),
      leaf_key_(std::exchange(o.leaf_key_, nullptr)),
      mutex_(std::move(o.mutex_)),
      contexts_(std::move(o.contexts_)) {}

CertificateAuthority::~CertificateAuthority() {
  contexts_.clear();
  X509_free(ca_cert_);
  EVP_PKEY_free(ca_key_);
  EVP_PKEY_free(leaf_key_);
}

SSL_CTX* CertificateAuthority::server_context(const std::string& host) {
  std::lock_guard lock(*mutex_);
  if (auto it = contexts_.find(host); it != contexts_.end()) return it->second.get();
  auto leaf = make_certificate(leaf_key_, host, ca_cert_, ca_key_, false, 365);
  SslCtxPtr ctx(SSL_CTX_new(TLS_server_method()));
  if (!ctx || SSL_CTX_use_certificate(ctx.get(), leaf.get()) != 1 ||
      SSL_CTX_use_PrivateKey(ctx.get(), leaf_key_) != 1 ||
      SSL_CTX_add1_chain_cert(ctx.get(), ca_cert_) != 1)
    throw TlsError("cannot build server context for " + host + ": " + ssl_error_text());
  auto* raw = ctx.get();
  contexts_.emplace(host, std::move(ctx));
  return raw;
}

PemBundle CertificateAuthority::issue(const std::string& host) const {
  auto key = generate_key();
  auto cert = make_certificate(key.get(), host, ca_cert_, ca_key_, false, 365);
  return {to_pem(cert.get()) + to_pem(ca_cert_), to_pem(key.get())};
}

}  // namespace webreplay::net
