"""Geometry of the test domain: the union of the unit disk and the unit square.

The union ``{x^2 + y^2 < 1} U (0, 1)^2`` is convex (it is the convex hull of
the disk and the corner ``(1, 1)``) but not strictly convex.  Its boundary is
parametrised counter-clockwise starting at ``(1, 0)``: the segment up to
``(1, 1)``, the segment left to ``(0, 1)``, and the three-quarter circular arc
from angle ``pi/2`` to ``2*pi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ARC_START = 0.5 * np.pi
ARC_END = 2.0 * np.pi


def _as_points(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


def _segment_projection(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    t = np.clip(((x - a) @ d) / (d @ d), 0.0, 1.0)
    return a + t[:, None] * d


def _ray_interval_disk(x: np.ndarray, sigma: np.ndarray):
    # |x + t sigma|^2 = 1 with |sigma| = 1
    bq = np.einsum("ij,ij->i", x, sigma)
    cq = np.einsum("ij,ij->i", x, x) - 1.0
    disc = bq * bq - cq
    ok = disc >= 0.0
    root = np.sqrt(np.where(ok, disc, 0.0))
    return ok, -bq - root, -bq + root


def _ray_interval_square(x: np.ndarray, sigma: np.ndarray):
    lo = np.full(len(x), -np.inf)
    hi = np.full(len(x), np.inf)
    ok = np.ones(len(x), dtype=bool)
    for c in range(2):
        s = sigma[:, c]
        p = x[:, c]
        flat = np.abs(s) < 1e-300
        ok &= ~flat | ((p >= 0.0) & (p <= 1.0))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t0 = np.where(flat, -np.inf, (0.0 - p) / s)
            t1 = np.where(flat, np.inf, (1.0 - p) / s)
        lo = np.maximum(lo, np.minimum(t0, t1))
        hi = np.minimum(hi, np.maximum(t0, t1))
    return ok & (lo <= hi), lo, hi


@dataclass(frozen=True)
class DomainGeometry:
    """The disk-union-square domain with its boundary parametrisation."""

    side_length: float = 1.0
    arc_length: float = 1.5 * np.pi

    @property
    def perimeter(self) -> float:
        return 2.0 * self.side_length + self.arc_length

    @property
    def diameter(self) -> float:
        # farthest pair: (1, 1) and the antipodal disk point -(1, 1)/sqrt(2)
        return float(np.sqrt(2.0) + 1.0)

    @property
    def area(self) -> float:
        return 0.75 * np.pi + 1.0

    @property
    def corners(self) -> np.ndarray:
        return np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

    def signed_distance(self, x) -> np.ndarray:
        """Signed distance, negative inside.  Exact outside and on the boundary."""
        x = _as_points(x)
        sd_disk = np.hypot(x[:, 0], x[:, 1]) - 1.0
        q = np.abs(x - 0.5) - 0.5
        outside = np.hypot(np.maximum(q[:, 0], 0.0), np.maximum(q[:, 1], 0.0))
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        sd_square = outside + inside
        return np.minimum(sd_disk, sd_square)

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        return self.signed_distance(x) <= tol

    def project_to_boundary(self, x) -> np.ndarray:
        """Nearest point of the boundary for each row of ``x``."""
        x = _as_points(x)
        c = self.corners
        cand = [
            _segment_projection(x, c[0], c[1]),
            _segment_projection(x, c[1], c[2]),
        ]
        phi = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2.0 * np.pi)
        r = np.hypot(x[:, 0], x[:, 1])
        on_arc = (phi >= ARC_START) | (phi == 0.0)
        arc = np.where(
            (on_arc & (r > 0))[:, None],
            np.column_stack([np.cos(phi), np.sin(phi)]),
            np.nan,
        )
        # points in the open first quadrant (or the origin) map to an arc endpoint
        ends = np.where(
            (x[:, 0] >= x[:, 1])[:, None], c[0][None, :], c[2][None, :]
        )
        arc = np.where(np.isnan(arc), ends, arc)
        cand.append(arc)
        cand = np.stack(cand, axis=1)
        dist = np.linalg.norm(cand - x[:, None, :], axis=2)
        best = np.argmin(dist, axis=1)
        return cand[np.arange(len(x)), best]

    def boundary_point(self, s) -> np.ndarray:
        """Boundary point at arclength ``s`` measured from ``(1, 0)``."""
        s = np.mod(np.atleast_1d(np.asarray(s, dtype=float)), self.perimeter)
        out = np.empty((len(s), 2))
        seg1 = s < 1.0
        seg2 = (s >= 1.0) & (s < 2.0)
        arc = s >= 2.0
        out[seg1] = np.column_stack([np.ones(seg1.sum()), s[seg1]])
        out[seg2] = np.column_stack([2.0 - s[seg2], np.ones(seg2.sum())])
        phi = ARC_START + (s[arc] - 2.0)
        out[arc] = np.column_stack([np.cos(phi), np.sin(phi)])
        return out

    def ray_exit(self, x, sigma) -> np.ndarray:
        """Largest ``t >= 0`` with ``x + t*sigma`` in the closed domain.

        ``x`` must lie in the closed domain and ``sigma`` must be unit length.
        Both arguments broadcast row-wise.
        """
        x = _as_points(x)
        sigma = _as_points(sigma)
        x, sigma = np.broadcast_arrays(x, sigma)
        ok_d, _, hi_d = _ray_interval_disk(x, sigma)
        ok_s, _, hi_s = _ray_interval_square(x, sigma)
        # the two chords overlap since the union is convex and contains x
        t = np.maximum(np.where(ok_d, hi_d, -np.inf), np.where(ok_s, hi_s, -np.inf))
        return np.maximum(t, 0.0)
