"""Exception hierarchy shared by every layer of the package."""


class SoapSecError(Exception):
    """Base class for all errors raised by soapsec."""


# -- terms -------------------------------------------------------------------

class TermError(SoapSecError, ValueError):
    pass


class MissingKeyArg(TermError):
    pass


class UnexpectedKeyArg(TermError):
    pass


class InvalidKeyArg(TermError):
    pass


class TermSyntaxError(TermError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnboundIdentifier(TermError):
    def __init__(self, ident, position=None):
        where = "" if position is None else f" at position {position}"
        super().__init__(f"identifier {ident!r} is not in the symbol table{where}")
        self.ident = ident
        self.position = position


# -- tokens ------------------------------------------------------------------

class TokenError(SoapSecError, ValueError):
    pass


class PatternViolation(TokenError):
    pass


class UnsupportedTerm(TokenError):
    pass


class SchemaMismatch(TokenError):
    pass


class MalformedBinary(TokenError):
    pass


class BadTimestamp(TokenError):
    pass


# -- crypto ------------------------------------------------------------------

class CryptoError(SoapSecError):
    pass


class UnknownAlgorithm(CryptoError, KeyError):
    pass


class BadKeyLength(CryptoError, ValueError):
    pass


class PlaintextTooLong(CryptoError, ValueError):
    pass


class InvalidPeerKey(CryptoError, ValueError):
    pass


class DecryptFailure(SoapSecError):
    """Ciphertext could not be opened or failed its integrity check."""


class AuthFailure(DecryptFailure, CryptoError):
    """Authenticated decryption rejected the ciphertext."""


# -- envelopes ---------------------------------------------------------------

class EnvelopeError(SoapSecError):
    pass


class UnresolvedKey(EnvelopeError):
    pass


class MixedPlacement(EnvelopeError):
    pass


class ManifestMismatch(EnvelopeError):
    pass


class MalformedEnvelope(EnvelopeError):
    pass


# -- protocol engine ---------------------------------------------------------

class ProtocolError(SoapSecError):
    pass


class ExecutabilityError(ProtocolError):
    pass


class NotYourTurn(ProtocolError):
    pass


class MissingKnowledge(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    pass


class CheckFailed(ProtocolError):
    def __init__(self, which, detail=""):
        super().__init__(f"check failed: {which}" + (f" ({detail})" if detail else ""))
        self.which = which


class AgreementFailure(ProtocolError):
    pass


# -- transport ---------------------------------------------------------------

class TransportError(SoapSecError):
    pass


class ChannelClosed(TransportError):
    pass


class Timeout(TransportError, TimeoutError):
    pass


class BindError(TransportError, OSError):
    pass


class RemoteFault(TransportError):
    """The peer answered with a SOAP fault document."""

    def __init__(self, code, subcode, reason):
        super().__init__(f"{code}/{subcode}: {reason}")
        self.code = code
        self.subcode = subcode
        self.reason = reason


class ConfigError(SoapSecError, ValueError):
    """A benchmark or command configuration is invalid."""
