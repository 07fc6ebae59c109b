"""Trace-one control matrices and the exact Bellman / Monge-Ampere operators.

A control is stored through its eigen-decomposition
``B = R(theta) diag(a, 1 - a) R(theta)^T`` with ``theta in [0, pi)`` and
``a in [0, 1/2]``.  The columns of ``R(theta)`` are the stencil directions,
``(a, 1 - a)`` their weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Control:
    theta: float
    a: float

    def __post_init__(self):
        if not (0.0 <= self.a <= 0.5):
            raise ValueError(f"eigenvalue split a={self.a} outside [0, 1/2]")
        if not (0.0 <= self.theta < np.pi):
            raise ValueError(f"angle theta={self.theta} outside [0, pi)")

    @property
    def directions(self) -> np.ndarray:
        """The two unit stencil directions, as rows."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, s], [-s, c]])

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.a, 1.0 - self.a])

    @property
    def sqrt_det(self) -> float:
        return float(np.sqrt(self.a * (1.0 - self.a)))

    def matrix(self) -> np.ndarray:
        return control_to_matrix(self)


ISOTROPIC = Control(0.0, 0.5)


def control_to_matrix(c: Control) -> np.ndarray:
    """``R(theta) diag(a, 1 - a) R(theta)^T``."""
    r = np.array([[np.cos(c.theta), -np.sin(c.theta)], [np.sin(c.theta), np.cos(c.theta)]])
    return r @ np.diag([c.a, 1.0 - c.a]) @ r.T


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Finite set of controls, ordered angle-major then by ``a``.

    The array attributes give a vectorised view: ``theta``, ``a``, and the
    indices ``dir1``, ``dir2`` of the two stencil directions of each control
    into ``directions``.
    """

    controls: tuple[Control, ...]
    n_angles: int
    n_a: int

    def __len__(self) -> int:
        return len(self.controls)

    def __getitem__(self, i) -> Control:
        return self.controls[i]

    @cached_property
    def theta(self) -> np.ndarray:
        return np.array([c.theta for c in self.controls])

    @cached_property
    def a(self) -> np.ndarray:
        return np.array([c.a for c in self.controls])

    @cached_property
    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(self.a * (1.0 - self.a))

    @cached_property
    def _direction_table(self):
        # direction angles modulo pi, deduplicated; sigma and -sigma coincide
        raw = np.concatenate([self.theta, np.mod(self.theta + 0.5 * np.pi, np.pi)])
        key = np.round(raw / np.pi * 2**40).astype(np.int64) % 2**40
        uniq, inverse = np.unique(key, return_inverse=True)
        angles = uniq / 2**40 * np.pi
        n = len(self.controls)
        return angles, inverse[:n], inverse[n:]

    @property
    def direction_angles(self) -> np.ndarray:
        return self._direction_table[0]

    @cached_property
    def directions(self) -> np.ndarray:
        ang = self.direction_angles
        return np.column_stack([np.cos(ang), np.sin(ang)])

    @property
    def dir1(self) -> np.ndarray:
        return self._direction_table[1]

    @property
    def dir2(self) -> np.ndarray:
        return self._direction_table[2]

    @cached_property
    def layout(self):
        """Regular ``(angle, a)`` table of the grid.

        Returns ``(angles, a_values, flat_to_index)`` where ``flat_to_index``
        maps the angle-major flat position of each table cell to its grid
        index, or -1 for cells deduplicated away.
        """
        angles, ai = np.unique(np.round(self.theta, 14), return_inverse=True)
        a_values, aj = np.unique(np.round(self.a, 14), return_inverse=True)
        table = np.full(len(angles) * len(a_values), -1, dtype=np.int64)
        table[ai.ravel() * len(a_values) + aj.ravel()] = np.arange(len(self.controls))
        return angles, a_values, table

    def index_of(self, c: Control, tol: float = 1e-12) -> int:
        m = control_to_matrix(c)
        for i, ci in enumerate(self.controls):
            if np.abs(control_to_matrix(ci) - m).max() <= tol:
                return i
        raise KeyError(f"{c} is not in the control grid")

    @cached_property
    def isotropic_index(self) -> int:
        return self.index_of(ISOTROPIC)

    @cached_property
    def _matrices(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        a, b = self.a, 1.0 - self.a
        off = (a - b) * c * s
        out = np.stack([a * c * c + b * s * s, off, off, a * s * s + b * c * c], axis=1)
        out = out.reshape(-1, 2, 2)
        out.flags.writeable = False
        return out

    def matrices(self) -> np.ndarray:
        """All control matrices, shape ``(n, 2, 2)``."""
        return self._matrices


def build_control_grid(n_angles: int = 64, n_a: int = 33) -> ControlGrid:
    """Controls ``(i*pi/n_angles, j/(2*(n_a - 1)))`` deduplicated as matrices."""
    if n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    if n_a < 2:
        raise ValueError("n_a must be >= 2")
    controls = []
    seen: set[tuple[float, ...]] = set()
    for i in range(n_angles):
        theta = i * np.pi / n_angles
        for j in range(n_a):
            c = Control(theta, j / (2.0 * (n_a - 1)))
            # a = 1/2 gives Id/2 for every angle
            key = tuple(np.round(control_to_matrix(c), 12).ravel() + 0.0)
            if key in seen:
                continue
            seen.add(key)
            controls.append(c)
    return ControlGrid(tuple(controls), n_angles, n_a)


def grid_hamiltonian(A, f: float, grid: ControlGrid) -> tuple[float, int]:
    """``max`` over the grid of ``-B:A + f sqrt(det B)`` and its first argmax."""
    A = np.asarray(A, dtype=float)
    vals = -np.einsum("nij,ij->n", grid.matrices(), A) + f * grid.sqrt_det
    i = int(np.argmax(vals))
    return float(vals[i]), i


def exact_hamiltonian(A, f: float) -> float:
    """``sup`` over trace-one PSD ``B`` of ``-B:A + f sqrt(det B)``.

    A maximiser commutes with ``A``, so with ``A = Q diag(mu1, mu2) Q^T``,
    ``mu1 <= mu2``, the supremum reduces to maximising the concave function
    ``g(a) = -(a*mu1 + (1 - a)*mu2) + f*sqrt(a*(1 - a))`` on ``[0, 1]``.
    For ``f > 0`` the stationary point is ``a = (1 + t)/2`` with
    ``t = (mu2 - mu1)/sqrt((mu2 - mu1)^2 + f^2)``; the endpoints are compared
    as well.
    """
    if f < 0:
        raise ValueError(f"f must be non-negative, got {f}")
    A = np.asarray(A, dtype=float)
    mu1, mu2 = np.linalg.eigvalsh(0.5 * (A + A.T))
    return _diagonal_hamiltonian(mu1, mu2, f)


def _diagonal_hamiltonian(mu1: float, mu2: float, f: float) -> float:
    def g(a):
        return -(a * mu1 + (1.0 - a) * mu2) + f * np.sqrt(max(a * (1.0 - a), 0.0))

    best = max(g(0.0), g(1.0))
    if f > 0:
        delta = mu2 - mu1
        rho = np.hypot(delta, f)
        a_star = 0.5 * (1.0 + delta / rho)
        # closed form of g(a_star); avoids cancellation in sqrt(a(1-a))
        best = max(best, 0.5 * (rho - (mu1 + mu2)), g(a_star))
    return float(best)


def monge_ampere_residual(A, f: float) -> float:
    """``(f/2)^2 - det(A)``."""
    if f < 0:
        raise ValueError(f"f must be non-negative, got {f}")
    return float((0.5 * f) ** 2 - np.linalg.det(np.asarray(A, dtype=float)))
