"""The four encryption-function classes over octets, plus signatures and DH.

Everything here delegates to the ``cryptography`` package; this module only
fixes algorithm choices, framing and error mapping.

Ciphertext layouts:

* sk: ``nonce(12) || ciphertext || tag(16)``
* pk: raw OAEP output (exactly the modulus length), or, for plaintexts past
  the OAEP limit, ``OAEP(k) || nonce(12) || AES-256-GCM(k, plaintext)``
* DH public values are big-endian integers padded to the modulus length
"""

from __future__ import annotations

import hmac as _hmac
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives import hmac as c_hmac
from cryptography.hazmat.primitives.asymmetric import dh, padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AuthFailure,
    BadKeyLength,
    CryptoError,
    DecryptFailure,
    InvalidPeerKey,
    PlaintextTooLong,
    UnknownAlgorithm,
)
from .terms import KeyMaterial

KeyLike = Union[bytes, KeyMaterial]

NONCE_LEN = 12
TAG_LEN = 16

# RFC 5114 section 2.3: 2048-bit MODP group with 256-bit prime order subgroup
_RFC5114_P = int(
    "87A8E61DB4B6663CFFBBD19C651959998CEEF608660DD0F25D2CEED4435E3B00"
    "E00DF8F1D61957D4FAF7DF4561B2AA3016C3D91134096FAA3BF4296D830E9A7C"
    "209E0C6497517ABD5A8A9D306BCF67ED91F9E6725B4758C022E0B1EF4275BF7B"
    "6C5BFC11D45F9088B941F54EB1E59BB8BC39A0BF12307F5C4FDB70C581B23F76"
    "B63ACAE1CAA6B7902D52526735488A0EF13C6D9A51BFA4AB3AD8347796524D8E"
    "F6A167B5A41825D967E144E5140564251CCACB83E6B486F6B3CA3F7971506026"
    "C0B857F689962856DED4010ABD0BE621C3A3960A54E710C375F26375D7014103"
    "A4B54330C198AF126116D2276E11715F693877FAD7EF09CADB094AE91E1A1597", 16)
_RFC5114_G = int(
    "3FB32C9B73134D0B2E77506660EDBD484CA7B18F21EF205407F4793A1A0BA125"
    "10DBC15077BE463FFF4FED4AAC0BB555BE3A6C1B0C6B47B1BC3773BF7E8C6F62"
    "901228F8C28CBB18A55AE31341000A650196F931C77A57F2DDF463E5E9EC144B"
    "777DE62AAAB8A8628AC376D282D6ED3864E67982428EBC831D14348F6F2F9193"
    "B5045AF2767164E1DFC967C1FB3F2E55A4BD1BFFE83B9C80D052B985D182EA0A"
    "DB2A3B7313D3FE14C8484B1E052588B9B7D2BBD2DF016199ECD06E1557CD0915"
    "B3353BBB64E0EC377FD028370DF92B52C7891428CDC67EB6184B523D1DB246C3"
    "2F63078490F00EF8D647D148D47954515E2327CFEF98C582664B4C0F6CC41659", 16)
_RFC5114_Q = int("8CF83642A709A097B447997640129DA299B1A47D1EB3750BA308B0FE64F5FBD3", 16)

# RFC 3526 group 14
_MODP2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)


@dataclass(frozen=True)
class DHGroup:
    ident: str
    p: int
    g: int
    q: int | None = None

    @property
    def octets(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @property
    def exponent_octets(self) -> int:
        # 256-bit exponents for the safe-prime group, per common practice
        return (self.q.bit_length() + 7) // 8 if self.q else 32


SK_ALGORITHMS = {
    "aes-128-gcm": (AESGCM, 16),
    "aes-256-gcm": (AESGCM, 32),
    "chacha20-poly1305": (ChaCha20Poly1305, 32),
}
PK_ALGORITHMS = {"rsa-oaep-2048-sha256": 2048, "rsa-oaep-3072-sha256": 3072}
SIGNATURE_ALGORITHMS = {"rsa-pss-2048-sha256": 2048, "rsa-pss-3072-sha256": 3072}
HASH_ALGORITHMS = {"sha-256": hashes.SHA256, "sha-512": hashes.SHA512}
HMAC_ALGORITHMS = {"hmac-sha-256": hashes.SHA256, "hmac-sha-512": hashes.SHA512}
DH_GROUPS = {
    "rfc5114-2048-256": DHGroup("rfc5114-2048-256", _RFC5114_P, _RFC5114_G, _RFC5114_Q),
    "modp2048": DHGroup("modp2048", _MODP2048_P, 2),
}


def _lookup(table, ident, what):
    try:
        return table[ident]
    except KeyError:
        raise UnknownAlgorithm(f"unknown {what} algorithm {ident!r}") from None


@dataclass(frozen=True)
class AlgorithmSuite:
    sk_algorithm: str = "aes-128-gcm"
    pk_algorithm: str = "rsa-oaep-2048-sha256"
    hash_algorithm: str = "sha-256"
    hmac_algorithm: str = "hmac-sha-256"
    signature_algorithm: str = "rsa-pss-2048-sha256"
    dh_group: str = "rfc5114-2048-256"

    def __post_init__(self):
        _lookup(SK_ALGORITHMS, self.sk_algorithm, "sk")
        bits = _lookup(PK_ALGORITHMS, self.pk_algorithm, "pk")
        if _lookup(SIGNATURE_ALGORITHMS, self.signature_algorithm, "signature") != bits:
            # one RSA pair serves both encryption and signing
            raise CryptoError("pk and signature algorithms must use the same modulus size")
        _lookup(HASH_ALGORITHMS, self.hash_algorithm, "hash")
        _lookup(HMAC_ALGORITHMS, self.hmac_algorithm, "hmac")
        _lookup(DH_GROUPS, self.dh_group, "dh")


SUITES = {
    "default": AlgorithmSuite(),
    "high": AlgorithmSuite("aes-256-gcm", "rsa-oaep-3072-sha256", "sha-512",
                           "hmac-sha-512", "rsa-pss-3072-sha256", "modp2048"),
    "chacha": AlgorithmSuite(sk_algorithm="chacha20-poly1305"),
}


def get_suite(suite: Union[str, AlgorithmSuite, None]) -> AlgorithmSuite:
    if suite is None:
        return SUITES["default"]
    if isinstance(suite, AlgorithmSuite):
        return suite
    return _lookup(SUITES, suite, "suite")


@dataclass(frozen=True)
class KeyPair:
    public_part: bytes
    private_part: bytes = field(repr=False)
    algorithm: str


def _raw(key: KeyLike) -> bytes:
    return key.value if isinstance(key, KeyMaterial) else bytes(key)


@lru_cache(maxsize=512)
def _load_private(der: bytes):
    try:
        key = serialization.load_der_private_key(der, None, unsafe_skip_rsa_key_validation=True)
    except (ValueError, TypeError):
        raise CryptoError("private key octets are not a DER private key") from None
    return key


@lru_cache(maxsize=512)
def _load_public(der: bytes):
    try:
        return serialization.load_der_public_key(der)
    except (ValueError, TypeError):
        raise CryptoError("public key octets are not a DER public key") from None


@lru_cache(maxsize=None)
def _dh_parameters(group: DHGroup):
    return dh.DHParameterNumbers(group.p, group.g, group.q).parameters()


class CryptoProvider:
    """Stateless after construction; safe to share between threads."""

    def __init__(self, suite: Union[str, AlgorithmSuite, None] = None, *, hybrid: bool = True,
                 randbytes: Callable[[int], bytes] = os.urandom):
        self.suite = get_suite(suite)
        self.hybrid = hybrid
        self.randbytes = randbytes
        self._sk_cls, self.sk_key_length = SK_ALGORITHMS[self.suite.sk_algorithm]
        self.pk_bits = PK_ALGORITHMS[self.suite.pk_algorithm]
        self._hash = HASH_ALGORITHMS[self.suite.hash_algorithm]
        self._hmac_hash = HMAC_ALGORITHMS[self.suite.hmac_algorithm]
        self.dh_group = DH_GROUPS[self.suite.dh_group]

    # -- sk --------------------------------------------------------------------

    def generate_sk_key(self, label: str = "") -> KeyMaterial:
        return KeyMaterial(self.randbytes(self.sk_key_length), "base64Binary", label)

    def _aead(self, key: bytes, algorithm: str | None):
        cls, length = _lookup(SK_ALGORITHMS, algorithm, "sk") if algorithm else (
            self._sk_cls, self.sk_key_length)
        if len(key) != length:
            raise BadKeyLength(f"{algorithm or self.suite.sk_algorithm} needs a {length}-octet "
                               f"key, got {len(key)}")
        return cls(key)

    def sk_encrypt(self, key: KeyLike, plaintext: bytes, aad: bytes = b"",
                   nonce: bytes | None = None, algorithm: str | None = None) -> bytes:
        aead = self._aead(_raw(key), algorithm)
        nonce = self.randbytes(NONCE_LEN) if nonce is None else nonce
        if len(nonce) != NONCE_LEN:
            raise CryptoError(f"nonce must be {NONCE_LEN} octets")
        return nonce + aead.encrypt(nonce, plaintext, aad or None)

    def sk_decrypt(self, key: KeyLike, ciphertext: bytes, aad: bytes = b"",
                   algorithm: str | None = None) -> bytes:
        aead = self._aead(_raw(key), algorithm)
        if len(ciphertext) < NONCE_LEN + TAG_LEN:
            raise AuthFailure("ciphertext shorter than nonce and tag")
        try:
            return aead.decrypt(ciphertext[:NONCE_LEN], ciphertext[NONCE_LEN:], aad or None)
        except InvalidTag:
            raise AuthFailure("authentication tag mismatch") from None

    # -- pk --------------------------------------------------------------------

    def generate_keypair(self) -> KeyPair:
        priv = rsa.generate_private_key(public_exponent=65537, key_size=self.pk_bits)
        return KeyPair(
            priv.public_key().public_bytes(serialization.Encoding.DER,
                                           serialization.PublicFormat.SubjectPublicKeyInfo),
            priv.private_bytes(serialization.Encoding.DER, serialization.PrivateFormat.PKCS8,
                               serialization.NoEncryption()),
            self.suite.pk_algorithm)

    @staticmethod
    def _oaep():
        return padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(),
                            label=None)

    def oaep_limit(self, public: KeyLike) -> int:
        k = _load_public(_raw(public)).key_size // 8
        return k - 2 * hashes.SHA256.digest_size - 2

    def pk_encrypt(self, public: KeyLike, plaintext: bytes) -> bytes:
        pub = _load_public(_raw(public))
        if not isinstance(pub, rsa.RSAPublicKey):
            raise CryptoError("pk encryption needs an RSA public key")
        limit = pub.key_size // 8 - 2 * hashes.SHA256.digest_size - 2
        if len(plaintext) <= limit:
            return pub.encrypt(plaintext, self._oaep())
        if not self.hybrid:
            raise PlaintextTooLong(f"{len(plaintext)} octets exceed the OAEP limit of {limit}")
        session = self.randbytes(32)
        nonce = self.randbytes(NONCE_LEN)
        return (pub.encrypt(session, self._oaep()) + nonce
                + AESGCM(session).encrypt(nonce, plaintext, b"soapsec-hybrid"))

    def pk_decrypt(self, private: KeyLike, ciphertext: bytes) -> bytes:
        priv = _load_private(_raw(private))
        if not isinstance(priv, rsa.RSAPrivateKey):
            raise CryptoError("pk decryption needs an RSA private key")
        k = priv.key_size // 8
        if len(ciphertext) < k or k < len(ciphertext) < k + NONCE_LEN + TAG_LEN:
            raise DecryptFailure("ciphertext length does not fit the key")
        try:
            head = priv.decrypt(ciphertext[:k], self._oaep())
        except ValueError:
            raise DecryptFailure("OAEP decryption failed") from None
        if len(ciphertext) == k:
            return head
        if len(head) != 32:
            raise DecryptFailure("hybrid key has the wrong length")
        nonce = ciphertext[k:k + NONCE_LEN]
        try:
            return AESGCM(head).decrypt(nonce, ciphertext[k + NONCE_LEN:], b"soapsec-hybrid")
        except InvalidTag:
            raise AuthFailure("hybrid payload failed authentication") from None

    # -- signatures --------------------------------------------------------------

    def sign(self, private: KeyLike, data: bytes) -> bytes:
        priv = _load_private(_raw(private))
        return priv.sign(data, padding.PSS(mgf=padding.MGF1(hashes.SHA256()),
                                           salt_length=padding.PSS.DIGEST_LENGTH),
                         hashes.SHA256())

    def verify(self, public: KeyLike, data: bytes, signature: bytes) -> bool:
        try:
            pub = _load_public(_raw(public))
            pub.verify(signature, data, padding.PSS(mgf=padding.MGF1(hashes.SHA256()),
                                                    salt_length=padding.PSS.AUTO),
                       hashes.SHA256())
            return True
        except (InvalidSignature, CryptoError, ValueError, TypeError):
            return False

    @staticmethod
    def public_from_private(private: KeyLike) -> bytes:
        return _load_private(_raw(private)).public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)

    @staticmethod
    def is_private_key(data: KeyLike) -> bool:
        try:
            _load_private(_raw(data))
            return True
        except CryptoError:
            return False

    # -- h / hmac ----------------------------------------------------------------

    def hash(self, data: bytes) -> bytes:
        h = hashes.Hash(self._hash())
        h.update(data)
        return h.finalize()

    @property
    def digest_size(self) -> int:
        return self._hash.digest_size

    def hmac(self, key: KeyLike, data: bytes) -> bytes:
        raw = _raw(key)
        if not raw:
            raise BadKeyLength("hmac keys must be non-empty")
        h = c_hmac.HMAC(raw, self._hmac_hash())
        h.update(data)
        return h.finalize()

    def hmac_verify(self, key: KeyLike, data: bytes, tag: bytes) -> bool:
        try:
            return _hmac.compare_digest(self.hmac(key, data), tag)
        except BadKeyLength:
            return False

    # -- Diffie-Hellman ------------------------------------------------------------

    def dh_generate(self, group: str | None = None) -> KeyPair:
        grp = _lookup(DH_GROUPS, group, "dh") if group else self.dh_group
        bound = (grp.q or grp.p) - 2
        while True:
            x = int.from_bytes(self.randbytes(grp.exponent_octets), "big")
            if 2 <= x <= bound:
                break
        y = pow(grp.g, x, grp.p)
        return KeyPair(y.to_bytes(grp.octets, "big"), x.to_bytes(grp.exponent_octets, "big"),
                       grp.ident)

    def check_peer(self, peer_public: KeyLike, group: str | None = None) -> int:
        grp = _lookup(DH_GROUPS, group, "dh") if group else self.dh_group
        y = int.from_bytes(_raw(peer_public), "big")
        if not 1 < y < grp.p - 1:
            raise InvalidPeerKey("peer value is outside (1, p-1)")
        if grp.q is not None and pow(y, grp.q, grp.p) != 1:
            raise InvalidPeerKey("peer value is not in the prime-order subgroup")
        return y

    def dh_agree(self, private: KeyLike, peer_public: KeyLike, group: str | None = None) -> bytes:
        """Raw shared secret Z, padded to the modulus length."""
        grp = _lookup(DH_GROUPS, group, "dh") if group else self.dh_group
        y = self.check_peer(peer_public, grp.ident)
        params = _dh_parameters(grp).parameter_numbers()
        x = int.from_bytes(_raw(private), "big")
        own = dh.DHPrivateNumbers(x, dh.DHPublicNumbers(pow(grp.g, x, grp.p), params))
        peer = dh.DHPublicNumbers(y, params).public_key()
        try:
            z = own.private_key().exchange(peer)
        except ValueError as exc:
            raise InvalidPeerKey(str(exc)) from None
        return z.rjust(grp.octets, b"\0")

    def dh_shared(self, private: KeyLike, peer_public: KeyLike, group: str | None = None,
                  label: str = "") -> KeyMaterial:
        grp = _lookup(DH_GROUPS, group, "dh") if group else self.dh_group
        z = self.dh_agree(private, peer_public, grp.ident)
        okm = HKDF(hashes.SHA256(), self.sk_key_length, salt=None,
                   info=b"soapsec dh " + grp.ident.encode()).derive(z)
        return KeyMaterial(okm, "base64Binary", label)


_DEFAULT: CryptoProvider | None = None


def default_provider() -> CryptoProvider:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = CryptoProvider()
    return _DEFAULT
