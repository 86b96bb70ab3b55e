"""Truncated photon-number computation of the click distribution.

Used only to cross-check the covariance path at small gain.  The pair
state expanded in Fock space is

    |Psi> = cosh(r)^-2 sum_n tanh(r)^n sum_k (-1)^k |n-k, k>_A |k, n-k>_B

with ``(H, V)`` occupation labels.  Each party's ``n``-photon block is
rotated into the analyser basis by expanding the creation-operator
polynomials; loss and threshold detection then act independently on
each output mode given its photon number.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial import polynomial as P

from .model import ChannelParams, MuConvention, pair_gain
from .oracle import PHI_PLUS_OFFSET, OutcomeDistribution


def rotation_block(n: int, phi: float) -> np.ndarray:
    """Matrix ``U[i, q]`` from ``|n-q, q>_(H,V)`` to ``|i, n-i>_(+,-)``.

    With ``a_H^dag = c a_+^dag - s a_-^dag`` and
    ``a_V^dag = s a_+^dag + c a_-^dag``, the monomial
    ``(a_H^dag)^p (a_V^dag)^q`` is a polynomial in ``t = a_+^dag / a_-^dag``.
    """
    c, s = math.cos(phi), math.sin(phi)
    u = np.zeros((n + 1, n + 1))
    for q in range(n + 1):
        p = n - q
        poly = P.polymul(P.polypow([-s, c], p), P.polypow([c, s], q))
        poly = np.pad(poly, (0, n + 1 - len(poly)))[: n + 1]
        for i in range(n + 1):
            u[i, q] = poly[i] * math.sqrt(
                math.factorial(i) * math.factorial(n - i) / (math.factorial(p) * math.factorial(q))
            )
    return u


def pair_number_distribution(r: float, n_max: int) -> np.ndarray:
    """``P(n pairs) = (n + 1) tanh^{2n} r / cosh^4 r`` for ``n <= n_max``."""
    n = np.arange(n_max + 1)
    return (n + 1) * np.tanh(r) ** (2 * n) / np.cosh(r) ** 4


def fock_click_distribution(
    gamma: float,
    channel: ChannelParams,
    phi_a: float,
    phi_b: float,
    n_max: int = 12,
    mu_convention: MuConvention | str = MuConvention.PER_MODE_PAIR,
    phi_plus: bool = True,
) -> OutcomeDistribution:
    """Click-pattern probabilities from the state truncated at ``n_max`` pairs.

    Angles in radians; pattern indexing matches :mod:`chshsim.oracle`.
    """
    r = pair_gain(gamma, mu_convention)
    phi_b = phi_b + (PHI_PLUS_OFFSET if phi_plus else 0.0)
    keep = (1.0 - channel.tau_a, 1.0 - channel.tau_a, 1.0 - channel.tau_b, 1.0 - channel.tau_b)
    p = np.zeros(16)
    for n in range(n_max + 1):
        weight = math.tanh(r) ** n / math.cosh(r) ** 2
        ua, ub = rotation_block(n, phi_a), rotation_block(n, phi_b)
        # Alice holds |n-k, k>, Bob |k, n-k>: Alice's V count k is Bob's H count.
        signs = np.array([(-1) ** k for k in range(n + 1)], dtype=float)
        ub_flip = ub[:, ::-1]  # column k <- Bob state with V count n-k
        amp = weight * (ua * signs) @ ub_flip.T
        prob = amp**2
        for i in range(n + 1):
            for j in range(n + 1):
                if prob[i, j] == 0.0:
                    continue
                counts = (i, n - i, j, n - j)
                silent = [keep[m] ** counts[m] for m in range(4)]
                for pattern in range(16):
                    w = prob[i, j]
                    for m in range(4):
                        bit = (pattern >> (3 - m)) & 1
                        w *= (1.0 - silent[m]) if bit else silent[m]
                    p[pattern] += w
    return OutcomeDistribution(p)
