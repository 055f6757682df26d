"""Geodetic conversions: LLA -> ECEF -> local ENU anchored at a start fix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EarthEllipsoid:
    a: float = 6378137.0
    b: float = 6356752.314245

    def __post_init__(self):
        if not (self.a >= self.b > 0.0):
            raise ValueError("ellipsoid needs a >= b > 0")

    @property
    def e2(self) -> float:
        return 1.0 - (self.b * self.b) / (self.a * self.a)


WGS84 = EarthEllipsoid()


@dataclass(frozen=True)
class GeoLla:
    """Latitude and longitude in radians, altitude in metres."""

    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.latitude, self.longitude, self.altitude)):
            raise ValueError("GeoLla components must be finite")
        if abs(self.latitude) > math.pi / 2 + 1e-12:
            raise ValueError(f"latitude {self.latitude} rad outside [-pi/2, pi/2]")
        if not -math.pi - 1e-12 <= self.longitude <= math.pi + 1e-12:
            raise ValueError(f"longitude {self.longitude} rad outside (-pi, pi]")

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float, alt: float = 0.0) -> "GeoLla":
        return cls(math.radians(lat_deg), math.radians(lon_deg), alt)


@dataclass(frozen=True)
class EcefPoint:
    x: float
    y: float
    z: float

    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class EnuPoint:
    e: float
    n: float
    u: float

    def vector(self) -> np.ndarray:
        return np.array([self.e, self.n, self.u])


def prime_vertical_radius(phi: float, ellipsoid: EarthEllipsoid = WGS84) -> float:
    a, b = ellipsoid.a, ellipsoid.b
    return a * a / math.sqrt((a * math.cos(phi)) ** 2 + (b * math.sin(phi)) ** 2)


def lla_to_ecef(lla: GeoLla, ellipsoid: EarthEllipsoid = WGS84) -> EcefPoint:
    phi, lam, h = lla.latitude, lla.longitude, lla.altitude
    r = prime_vertical_radius(phi, ellipsoid)
    ratio = (ellipsoid.b * ellipsoid.b) / (ellipsoid.a * ellipsoid.a)
    return EcefPoint(
        (r + h) * math.cos(phi) * math.cos(lam),
        (r + h) * math.cos(phi) * math.sin(lam),
        (ratio * r + h) * math.sin(phi),
    )


def ecef_to_lla(p: EcefPoint, ellipsoid: EarthEllipsoid = WGS84, tol: float = 1e-15) -> GeoLla:
    """Iterative inverse of :func:`lla_to_ecef` (fixed point on latitude)."""
    x, y, z = p.x, p.y, p.z
    e2 = ellipsoid.e2
    lam = math.atan2(y, x)
    rho = math.hypot(x, y)
    phi = math.atan2(z, rho * (1.0 - e2))
    for _ in range(100):
        r = prime_vertical_radius(phi, ellipsoid)
        phi_new = math.atan2(z + e2 * r * math.sin(phi), rho)
        done = abs(phi_new - phi) < tol
        phi = phi_new
        if done:
            break
    r = prime_vertical_radius(phi, ellipsoid)
    # Valid at every latitude, unlike rho / cos(phi) - r.
    h = rho * math.cos(phi) + z * math.sin(phi) - ellipsoid.a * ellipsoid.a / r
    return GeoLla(phi, lam, h)


def enu_rotation(phi: float, lam: float) -> np.ndarray:
    """Rows are the east, north and up unit vectors in ECEF."""
    sp, cp = math.sin(phi), math.cos(phi)
    sl, cl = math.sin(lam), math.cos(lam)
    return np.array(
        [
            [-sl, cl, 0.0],
            [-cl * sp, -sl * sp, cp],
            [cl * cp, sl * cp, sp],
        ]
    )


@dataclass(frozen=True, eq=False)
class EnuAnchor:
    origin_lla: GeoLla
    origin_ecef: EcefPoint
    ellipsoid: EarthEllipsoid = WGS84

    @classmethod
    def from_lla(cls, lla: GeoLla, ellipsoid: EarthEllipsoid = WGS84) -> "EnuAnchor":
        return cls(lla, lla_to_ecef(lla, ellipsoid), ellipsoid)

    @property
    def rotation(self) -> np.ndarray:
        return enu_rotation(self.origin_lla.latitude, self.origin_lla.longitude)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnuAnchor):
            return NotImplemented
        return self.origin_lla == other.origin_lla and self.ellipsoid == other.ellipsoid

    def __hash__(self):
        return hash((self.origin_lla, self.ellipsoid))


def ecef_to_enu(p: EcefPoint, anchor: EnuAnchor) -> EnuPoint:
    d = p.vector() - anchor.origin_ecef.vector()
    e, n, u = anchor.rotation @ d
    return EnuPoint(float(e), float(n), float(u))


def enu_to_ecef(p: EnuPoint, anchor: EnuAnchor) -> EcefPoint:
    x, y, z = anchor.rotation.T @ p.vector() + anchor.origin_ecef.vector()
    return EcefPoint(float(x), float(y), float(z))


def lla_to_enu(lla: GeoLla, anchor: EnuAnchor, ellipsoid: EarthEllipsoid | None = None) -> EnuPoint:
    return ecef_to_enu(lla_to_ecef(lla, ellipsoid or anchor.ellipsoid), anchor)


def enu_to_lla(p: EnuPoint, anchor: EnuAnchor) -> GeoLla:
    return ecef_to_lla(enu_to_ecef(p, anchor), anchor.ellipsoid)


def reanchor(points: np.ndarray, source: EnuAnchor, target: EnuAnchor) -> np.ndarray:
    """Re-express ``(N, 3)`` ENU points of ``source`` in the ENU frame of ``target``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    ecef = points @ source.rotation + source.origin_ecef.vector()
    return (ecef - target.origin_ecef.vector()) @ target.rotation.T
