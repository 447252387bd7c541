"""X.509 helpers: throwaway CAs, leaf certificates, and CN extraction.

Everything here serves test benches and local topologies.  Keys are 2048-bit
RSA, certificates are short-lived, and nothing is cached outside the paths
the caller names.
"""

from __future__ import annotations

import datetime
import ipaddress
import os
from dataclasses import dataclass

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.x509.oid import NameOID


@dataclass
class CertMaterial:
    cert_pem: bytes
    key_pem: bytes

    def write(self, cert_path: str, key_path: str) -> None:
        with open(cert_path, "wb") as fh:
            fh.write(self.cert_pem)
        with open(key_path, "wb") as fh:
            fh.write(self.key_pem)
        os.chmod(key_path, 0o600)


def _new_key() -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


def _name(common_name: str, org: str = "cwmpkit") -> x509.Name:
    return x509.Name(
        [
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, org),
            x509.NameAttribute(NameOID.COMMON_NAME, common_name),
        ]
    )


def _san_for(hostnames: list[str]) -> x509.SubjectAlternativeName:
    entries: list[x509.GeneralName] = []
    for host in hostnames:
        try:
            entries.append(x509.IPAddress(ipaddress.ip_address(host)))
        except ValueError:
            entries.append(x509.DNSName(host))
    return x509.SubjectAlternativeName(entries)


def make_ca(common_name: str = "cwmpkit test CA") -> CertMaterial:
    key = _new_key()
    name = _name(common_name)
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=7))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .sign(key, hashes.SHA256())
    )
    return CertMaterial(
        cert_pem=cert.public_bytes(serialization.Encoding.PEM),
        key_pem=key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.TraditionalOpenSSL,
            serialization.NoEncryption(),
        ),
    )


def make_leaf(
    common_name: str,
    hostnames: list[str] | None = None,
    *,
    ca: CertMaterial | None = None,
    with_san: bool = True,
) -> CertMaterial:
    """A server certificate, self-signed or issued by ``ca``.

    with_san=False produces the CN-only shape some CPE stacks insist on
    matching by literal string comparison.
    """
    key = _new_key()
    subject = _name(common_name)
    now = datetime.datetime.now(datetime.timezone.utc)
    if ca is not None:
        issuer_cert = x509.load_pem_x509_certificate(ca.cert_pem)
        issuer_name = issuer_cert.subject
        sign_key = serialization.load_pem_private_key(ca.key_pem, password=None)
    else:
        issuer_name = subject
        sign_key = key
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer_name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=7))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
    )
    if with_san:
        builder = builder.add_extension(_san_for(hostnames or [common_name]), critical=False)
    cert = builder.sign(sign_key, hashes.SHA256())
    return CertMaterial(
        cert_pem=cert.public_bytes(serialization.Encoding.PEM),
        key_pem=key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.TraditionalOpenSSL,
            serialization.NoEncryption(),
        ),
    )


def common_name_of(cert_der_or_pem: bytes) -> str:
    """The subject CN of a certificate in DER or PEM form."""
    if cert_der_or_pem.lstrip().startswith(b"-----BEGIN"):
        cert = x509.load_pem_x509_certificate(cert_der_or_pem)
    else:
        cert = x509.load_der_x509_certificate(cert_der_or_pem)
    attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    return attrs[0].value if attrs else ""
