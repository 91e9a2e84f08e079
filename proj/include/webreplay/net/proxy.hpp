#pragma once

#include <atomic>
#include <string>

#include "webreplay/net/server.hpp"
#include "webreplay/net/tls.hpp"

namespace webreplay::net {

/// Answers a CONNECT with 200, terminates TLS using a leaf minted by `ca` for
/// the tunnel host and serves the decrypted requests with `handler` (scheme
/// "https", tunnel_authority set). Returns when the client goes away.
void intercept_connect(const HttpRequest& connect, Stream& client, BufferedReader& reader,
                       CertificateAuthority& ca, const RequestHandler& handler);

/// Answers a CONNECT with 200 and copies bytes both ways between the client
/// and `upstream` until either side closes.
void relay_tunnel(Stream& client, BufferedReader& reader, Stream& upstream);

/// Splits "host:port" from a CONNECT target; port defaults to 443.
Endpoint parse_authority(std::string_view authority);

}  // namespace webreplay::net
