import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpslio.geo import (
    WGS84,
    EarthEllipsoid,
    EcefPoint,
    EnuAnchor,
    EnuPoint,
    GeoLla,
    ecef_to_enu,
    ecef_to_lla,
    enu_rotation,
    enu_to_lla,
    lla_to_ecef,
    lla_to_enu,
    prime_vertical_radius,
    reanchor,
)

SHANGHAI = GeoLla.from_degrees(31.2304, 121.4737, 4.0)


@pytest.mark.parametrize(
    "lat, lon, alt, expected",
    [
        (0.0, 0.0, 0.0, (6378137.0, 0.0, 0.0)),
        (0.0, 90.0, 0.0, (0.0, 6378137.0, 0.0)),
        (90.0, 0.0, 0.0, (0.0, 0.0, 6356752.314245)),
        (-90.0, 0.0, 100.0, (0.0, 0.0, -6356852.314245)),
        # N(45 deg) / 2 in x and y; N (1 - e^2) sin 45 deg in z.
        (45.0, 45.0, 0.0, (3194419.1450606193, 3194419.145060619, 4487348.408865728)),
    ],
)
def test_lla_to_ecef_reference_points(lat, lon, alt, expected):
    p = lla_to_ecef(GeoLla.from_degrees(lat, lon, alt))
    assert p.vector() == pytest.approx(expected, abs=1e-6)


def test_prime_vertical_radius_limits():
    assert prime_vertical_radius(0.0) == WGS84.a
    assert prime_vertical_radius(math.pi / 2) == pytest.approx(WGS84.a**2 / WGS84.b, rel=1e-15)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        GeoLla(2.0, 0.0)
    with pytest.raises(ValueError):
        GeoLla(0.0, float("nan"))
    with pytest.raises(ValueError):
        EarthEllipsoid(1.0, 2.0)


lat = st.floats(-89.9, 89.9)
lon = st.floats(-179.9, 179.9)
alt = st.floats(-500.0, 9000.0)


@settings(max_examples=200, deadline=None)
@given(lat, lon, alt)
def test_ecef_round_trip(la, lo, h):
    lla = GeoLla.from_degrees(la, lo, h)
    back = ecef_to_lla(lla_to_ecef(lla))
    assert back.latitude == pytest.approx(lla.latitude, abs=1e-12)
    assert back.longitude == pytest.approx(lla.longitude, abs=1e-12)
    assert back.altitude == pytest.approx(h, abs=1e-6)


def test_ecef_to_lla_at_pole():
    back = ecef_to_lla(EcefPoint(0.0, 0.0, WGS84.b + 10.0))
    assert back.latitude == pytest.approx(math.pi / 2, abs=1e-12)
    assert back.altitude == pytest.approx(10.0, abs=1e-6)


@pytest.mark.parametrize("la, lo", [(0.0, 0.0), (31.2, 121.5), (-60.0, -170.0), (89.0, 10.0)])
def test_enu_rotation_orthonormal(la, lo):
    r = enu_rotation(math.radians(la), math.radians(lo))
    assert np.abs(r @ r.T - np.eye(3)).max() < 1e-12
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_enu_axes_point_east_north_up():
    anchor = EnuAnchor.from_lla(GeoLla.from_degrees(0.0, 0.0, 0.0))
    assert ecef_to_enu(EcefPoint(6378137.0, 1.0, 0.0), anchor).vector() == pytest.approx([1, 0, 0], abs=1e-9)
    assert ecef_to_enu(EcefPoint(6378137.0, 0.0, 1.0), anchor).vector() == pytest.approx([0, 1, 0], abs=1e-9)
    assert ecef_to_enu(EcefPoint(6378138.0, 0.0, 0.0), anchor).vector() == pytest.approx([0, 0, 1], abs=1e-9)


def test_lla_to_enu_frozen_value():
    anchor = EnuAnchor.from_lla(SHANGHAI)
    p = lla_to_enu(GeoLla.from_degrees(31.2314, 121.4747, 10.0), anchor)
    assert p.vector() == pytest.approx([95.27301566014324, 110.87404689090373, 5.99832151224106], abs=1e-6)
    assert lla_to_enu(SHANGHAI, anchor).vector() == pytest.approx([0, 0, 0], abs=1e-9)


def test_enu_preserves_distances(rng):
    anchor = EnuAnchor.from_lla(SHANGHAI)
    base = lla_to_ecef(SHANGHAI).vector()
    a = base + rng.normal(size=(200, 3)) * 500.0
    b = base + rng.normal(size=(200, 3)) * 500.0
    ea = np.array([ecef_to_enu(EcefPoint(*p), anchor).vector() for p in a])
    eb = np.array([ecef_to_enu(EcefPoint(*p), anchor).vector() for p in b])
    err = np.linalg.norm(ea - eb, axis=1) - np.linalg.norm(a - b, axis=1)
    assert np.abs(err).max() < 1e-9


def test_enu_to_lla_round_trip():
    anchor = EnuAnchor.from_lla(SHANGHAI)
    p = EnuPoint(120.0, -35.5, 3.25)
    back = lla_to_enu(enu_to_lla(p, anchor), anchor)
    assert back.vector() == pytest.approx(p.vector(), abs=1e-8)


def test_reanchor_between_nearby_anchors(rng):
    src = EnuAnchor.from_lla(SHANGHAI)
    dst = EnuAnchor.from_lla(GeoLla.from_degrees(31.2310, 121.4740, 6.0))
    pts = rng.normal(size=(20, 3)) * 100.0
    moved = reanchor(pts, src, dst)
    for p, q in zip(pts, moved):
        lla = enu_to_lla(EnuPoint(*p), src)
        assert lla_to_enu(lla, dst).vector() == pytest.approx(q, abs=1e-7)
    assert np.allclose(reanchor(pts, src, src), pts, atol=1e-9)


def test_anchor_equality():
    assert EnuAnchor.from_lla(SHANGHAI) == EnuAnchor.from_lla(GeoLla.from_degrees(31.2304, 121.4737, 4.0))
    assert EnuAnchor.from_lla(SHANGHAI) != EnuAnchor.from_lla(GeoLla.from_degrees(31.0, 121.0))
