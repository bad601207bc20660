"""Prime-order elliptic-curve group used by the key agreement.

The agreement needs genuine group arithmetic on arbitrary points (add two
received points, negate one, raise one to an ephemeral scalar), which the
usual ECDH APIs do not expose, so the short-Weierstrass arithmetic lives
here. The default curve is NIST P-256: prime order, cofactor 1, and the same
curve the certificate signatures use.

Elements are affine ``(x, y)`` tuples with ``None`` for the identity; scalar
multiplication runs in Jacobian coordinates to avoid per-step inversions.
Serialization is SEC1 compressed (33 bytes), with the single byte ``0x00``
for the identity.
"""

from __future__ import annotations

import secrets
from typing import Optional, Tuple

from .errors import InvalidElement

Point = Optional[Tuple[int, int]]

# NIST P-256 (secp256r1) domain parameters.
P256_P = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
P256_A = P256_P - 3
P256_B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
P256_GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
P256_GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5

IDENTITY_BYTES = b"\x00"
ELEMENT_LEN = 33


class PrimeOrderGroup:
    """Group operations over a prime-order short-Weierstrass curve.

    Multiplicative naming follows the key-agreement literature: ``exp`` is
    scalar multiplication, ``op`` point addition, ``inv`` negation.
    """

    def __init__(self, p: int, a: int, b: int, order: int, gx: int, gy: int):
        self.p = p
        self.a = a
        self.b = b
        self.order = order
        self.generator: Point = (gx, gy)
        if not self.is_on_curve(self.generator):
            raise ValueError("generator not on curve")

    # -- predicates ----------------------------------------------------

    def is_on_curve(self, pt: Point) -> bool:
        if pt is None:
            return True
        x, y = pt
        if not (0 <= x < self.p and 0 <= y < self.p):
            return False
        return (y * y - (x * x * x + self.a * x + self.b)) % self.p == 0

    # -- affine arithmetic ---------------------------------------------

    def op(self, pt1: Point, pt2: Point) -> Point:
        """Group operation (point addition)."""
        if pt1 is None:
            return pt2
        if pt2 is None:
            return pt1
        p = self.p
        x1, y1 = pt1
        x2, y2 = pt2
        if x1 == x2:
            if (y1 + y2) % p == 0:
                return None
            # doubling
            lam = (3 * x1 * x1 + self.a) * pow(2 * y1, -1, p) % p
        else:
            lam = (y2 - y1) * pow(x2 - x1, -1, p) % p
        x3 = (lam * lam - x1 - x2) % p
        y3 = (lam * (x1 - x3) - y1) % p
        return (x3, y3)

    def inv(self, pt: Point) -> Point:
        """Group inverse (point negation)."""
        if pt is None:
            return None
        x, y = pt
        return (x, (-y) % self.p)

    # -- scalar multiplication -----------------------------------------

    def exp(self, base: Point, scalar: int) -> Point:
        """``base`` raised to ``scalar`` (scalar multiplication)."""
        scalar %= self.order
        if base is None or scalar == 0:
            return None
        return self._jacobian_mult(base, scalar)

    def _jacobian_mult(self, base: Tuple[int, int], k: int) -> Point:
        p = self.p
        # (X, Y, Z) with x = X/Z^2, y = Y/Z^3
        rx, ry, rz = 0, 1, 0  # identity
        qx, qy, qz = base[0], base[1], 1
        for bit in bin(k)[2:]:
            rx, ry, rz = self._jac_double(rx, ry, rz, p)
            if bit == "1":
                rx, ry, rz = self._jac_add(rx, ry, rz, qx, qy, qz, p)
        if rz == 0:
            return None
        zinv = pow(rz, -1, p)
        zinv2 = zinv * zinv % p
        return (rx * zinv2 % p, ry * zinv2 * zinv % p)

    def _jac_double(self, x, y, z, p):
        if z == 0 or y == 0:
            return (0, 1, 0)
        # a = -3 shortcut: alpha = 3(x - z^2)(x + z^2)
        delta = z * z % p
        gamma = y * y % p
        beta = x * gamma % p
        alpha = 3 * (x - delta) * (x + delta) % p
        x3 = (alpha * alpha - 8 * beta) % p
        z3 = ((y + z) * (y + z) - gamma - delta) % p
        y3 = (alpha * (4 * beta - x3) - 8 * gamma * gamma) % p
        return (x3, y3, z3)

    def _jac_add(self, x1, y1, z1, x2, y2, z2, p):
        if z1 == 0:
            return (x2, y2, z2)
        if z2 == 0:
            return (x1, y1, z1)
        z1z1 = z1 * z1 % p
        z2z2 = z2 * z2 % p
        u1 = x1 * z2z2 % p
        u2 = x2 * z1z1 % p
        s1 = y1 * z2 * z2z2 % p
        s2 = y2 * z1 * z1z1 % p
        if u1 == u2:
            if s1 != s2:
                return (0, 1, 0)
            return self._jac_double(x1, y1, z1, p)
        h = (u2 - u1) % p
        i = 4 * h * h % p
        j = h * i % p
        r = 2 * (s2 - s1) % p
        v = u1 * i % p
        x3 = (r * r - j - 2 * v) % p
        y3 = (r * (v - x3) - 2 * s1 * j) % p
        z3 = ((z1 + z2) * (z1 + z2) - z1z1 - z2z2) % p * h % p
        return (x3, y3, z3)

    # -- scalars ---------------------------------------------------------

    def random_scalar(self, rng=None) -> int:
        """Uniform scalar in [1, order-1].

        ``rng`` may be a seeded ``random.Random`` for reproducible protocol
        simulations; production callers leave it unset and get the OS CSPRNG.
        """
        if rng is None:
            return 1 + secrets.randbelow(self.order - 1)
        return rng.randrange(1, self.order)

    def scalar_from_bytes(self, data: bytes) -> int:
        """Map a uniform byte string to a scalar in [1, order-1].

        Needs at least 16 bytes of slack beyond the order size so the
        modular reduction bias stays negligible.
        """
        if len(data) < 48:
            raise ValueError("need at least 48 bytes for unbiased reduction")
        return 1 + int.from_bytes(data, "big") % (self.order - 1)

    # -- serialization ---------------------------------------------------

    def serialize(self, pt: Point) -> bytes:
        """SEC1 compressed encoding; the identity is the single byte 0x00."""
        if pt is None:
            return IDENTITY_BYTES
        x, y = pt
        prefix = b"\x03" if y & 1 else b"\x02"
        return prefix + x.to_bytes(32, "big")

    def deserialize(self, data: bytes) -> Point:
        if data == IDENTITY_BYTES:
            return None
        if len(data) != ELEMENT_LEN or data[0] not in (2, 3):
            raise InvalidElement("bad element encoding")
        p = self.p
        x = int.from_bytes(data[1:], "big")
        if x >= p:
            raise InvalidElement("x out of range")
        rhs = (x * x * x + self.a * x + self.b) % p
        # p = 3 mod 4, so the square root (if any) is rhs^((p+1)/4)
        y = pow(rhs, (p + 1) // 4, p)
        if y * y % p != rhs:
            raise InvalidElement("point not on curve")
        if (y & 1) != (data[0] & 1):
            y = p - y
        return (x, y)


P256 = PrimeOrderGroup(P256_P, P256_A, P256_B, P256_ORDER, P256_GX, P256_GY)
