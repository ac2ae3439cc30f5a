"""Quasi-uniform direction grid shared by every module.

Coordinates: x points to the front, y to the left, z up. Azimuth is positive
toward the left ear.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

N_DIRECTIONS = 326


def to_angles(d):
    """Unit vector(s) -> (azimuth, elevation) in degrees."""
    d = np.asarray(d, dtype=np.float64)
    az = np.degrees(np.arctan2(d[..., 1], d[..., 0]))
    az = np.where(az <= -180.0, az + 360.0, az)
    el = np.degrees(np.arcsin(np.clip(d[..., 2], -1.0, 1.0)))
    return az, el


def from_angles(azimuth, elevation):
    az, el = np.radians(azimuth), np.radians(elevation)
    return np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1
    )


def angle_between(d1, d2):
    """Great-circle angle in degrees, broadcasting over leading axes."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    # atan2 form: exact 0 for identical vectors, well conditioned near 0 and 180
    cross = np.linalg.norm(np.cross(d1, d2), axis=-1)
    return np.degrees(np.arctan2(cross, np.sum(d1 * d2, axis=-1)))


def front_back_mirror(d):
    d = np.array(d, dtype=np.float64)
    d[..., 0] *= -1.0
    return d


def _rotation_onto(a, b):
    """Rotation matrix taking unit vector a onto unit vector b (Rodrigues)."""
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-15:
        return np.eye(3) if c > 0 else -np.eye(3)
    k = v / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * K + (1 - c) * K @ K


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(golden * i), r * np.sin(golden * i), z], axis=1)


@dataclass(frozen=True, eq=False)
class DirectionGrid:
    directions: np.ndarray

    def __len__(self):
        return self.directions.shape[0]

    @property
    def azimuth(self):
        return to_angles(self.directions)[0]

    @property
    def elevation(self):
        return to_angles(self.directions)[1]

    @property
    def hash(self) -> int:
        """64-bit content hash; containers use it to refuse foreign grids."""
        data = np.round(self.directions, 12).astype("<f8").tobytes()
        return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")

    def index_of(self, d, tol_deg=1e-6):
        ang = angle_between(self.directions, np.asarray(d)[None, :])
        k = int(np.argmin(ang))
        if ang[k] > tol_deg:
            raise ValueError(f"direction is {ang[k]:.3f} deg from the nearest grid point")
        return k

    def nearest(self, d):
        return int(np.argmax(self.directions @ np.asarray(d, dtype=np.float64)))

    def pairwise_angles(self):
        return angle_between(self.directions[:, None, :], self.directions[None, :, :])

    def nearest_neighbor_angles(self):
        ang = self.pairwise_angles()
        np.fill_diagonal(ang, np.inf)
        return ang.min(axis=1)


@lru_cache(maxsize=None)
def build_direction_grid(n: int = N_DIRECTIONS) -> DirectionGrid:
    """Spherical Fibonacci lattice rotated so one point sits exactly at the front.

    A rigid rotation is used instead of moving a single point so the
    nearest-neighbour spacing of the lattice is preserved.
    """
    pts = fibonacci_sphere(n)
    front = np.array([1.0, 0.0, 0.0])
    k = int(np.argmax(pts @ front))
    pts = pts @ _rotation_onto(pts[k], front).T
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts[k] = front
    pts.setflags(write=False)
    return DirectionGrid(pts)
