"""Exception hierarchy shared by all lcmsec modules.

Data-path errors (everything a hostile datagram can cause) are caught inside
``Session.receive`` and turned into drop counters; they never escape to the
caller. Control-path errors (misconfiguration, CA misuse, API misuse) do
propagate.
"""


class LcmsecError(Exception):
    """Base class for all lcmsec errors."""


# --- identity ---------------------------------------------------------------

class MalformedUrn(LcmsecError):
    """SAN URN does not match urn:lcmsec:<group>:<channel>:<id>."""


class NotAuthorized(LcmsecError):
    """Certificate carries no SAN matching the requested domain."""


class Expired(LcmsecError):
    """Certificate validity window does not cover the current time."""


class DuplicateId(LcmsecError):
    """CA issuance log already contains this id for the group."""


# --- crypto -----------------------------------------------------------------

class AuthFailure(LcmsecError):
    """AEAD tag mismatch: tamper, wrong key/epoch, or wrong associated data."""


class TooShort(LcmsecError):
    """Ciphertext shorter than the authentication tag."""


class IvReuse(LcmsecError):
    """Same IV sealed twice under one key (debug tracking only)."""


class InvalidElement(LcmsecError):
    """Serialized group element is malformed or not on the curve."""


# --- wire codec -------------------------------------------------------------

class BadMagic(LcmsecError):
    """Datagram does not start with a known lcmsec magic number."""


class Truncated(LcmsecError):
    """Datagram too short for its packet family."""


class NonCanonical(LcmsecError):
    """Management message bytes are not in canonical form."""


class BadName(LcmsecError):
    """Channel name is not ASCII or contains a NUL byte."""


class OversizeMessage(LcmsecError):
    """Message body exceeds the 32-bit fragmentation bound."""


class InconsistentFragment(LcmsecError):
    """Fragments of one message disagree on totals, lengths, or contents."""


# --- key agreement ----------------------------------------------------------

class StaleInstance(LcmsecError):
    """Instance id not greater than an already completed or attempted one."""


class BadSignature(LcmsecError):
    """Management message signature does not verify."""


class UnknownSender(LcmsecError):
    """Round message from a uid outside the agreed ring."""


class WrongInstance(LcmsecError):
    """Round message instance id does not match the running agreement."""


class ConsistencyFailure(LcmsecError):
    """Recovered ring keys do not close: inconsistent participant sets."""


# --- session ----------------------------------------------------------------

class NoKey(LcmsecError):
    """No key material established for the requested scope."""


class CounterExhausted(LcmsecError):
    """Send counter would wrap; a re-key is required before publishing."""


class Oversize(LcmsecError):
    """Datagram exceeds the 64 KB transport bound."""


class SocketError(LcmsecError):
    """UDP endpoint could not be created or used."""
