"""Brokerless authenticated encryption for UDP-multicast publish/subscribe.

Channel names and payloads travel encrypted under a two-level key hierarchy;
the keys come from a decentralized group key agreement bootstrapped by X.509
identities, with no broker or key server on the data path.
"""

from .errors import LcmsecError
from .node import LcmsecNode
from .session import SessionConfig, load_config, parse_config

__all__ = ["LcmsecError", "LcmsecNode", "SessionConfig", "load_config",
           "parse_config"]
__version__ = "0.1.0"
