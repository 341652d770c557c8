"""Security protocol messages as SOAP envelopes.

Terms from a small protocol algebra are encoded as WS-Security tokens and
encrypted blocks, run through five classical protocols over loopback, TCP
or HTTP, and timed per participant.
"""

from .crypto import AlgorithmSuite, CryptoProvider, default_provider, get_suite
from .engine import (
    EngineContext,
    Keystore,
    ProtocolSpec,
    TimingReport,
    TimingRow,
    get_protocol,
    list_protocols,
    parse_protocol,
    register_builtin_protocols,
    run_protocol,
)
from .envelope import Envelope, KeyContext, build_envelope, parse_envelope, serialize
from .errors import SoapSecError
from .terms import (
    Data,
    Enc,
    FuncName,
    KeyTerm,
    Name,
    NonceTerm,
    Pair,
    SymbolTable,
    parse_term,
    print_term,
)
from .tokens import decode_token, encode_token, validate_name

__version__ = "0.1.0"
