"""Independent reference implementations used by the tests.

Each oracle is written without touching the package code paths it checks.
"""

import math

import mpmath

R = 6371.0


def great_circle_mp(lat1, lon1, lat2, lon2, dps=40):
    """Central angle via atan2(|u x v|, u . v) on unit vectors, in extended precision."""
    with mpmath.workdps(dps):
        p1, l1, p2, l2 = (mpmath.radians(mpmath.mpf(v)) for v in (lat1, lon1, lat2, lon2))
        u = (mpmath.cos(p1) * mpmath.cos(l1), mpmath.cos(p1) * mpmath.sin(l1), mpmath.sin(p1))
        v = (mpmath.cos(p2) * mpmath.cos(l2), mpmath.cos(p2) * mpmath.sin(l2), mpmath.sin(p2))
        cx = u[1] * v[2] - u[2] * v[1]
        cy = u[2] * v[0] - u[0] * v[2]
        cz = u[0] * v[1] - u[1] * v[0]
        dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
        return float(R * mpmath.atan2(mpmath.sqrt(cx * cx + cy * cy + cz * cz), dot))


def law_of_cosines_mp(lat1, lon1, lat2, lon2, dps=50):
    with mpmath.workdps(dps):
        p1, l1, p2, l2 = (mpmath.radians(mpmath.mpf(v)) for v in (lat1, lon1, lat2, lon2))
        c = mpmath.sin(p1) * mpmath.sin(p2) + mpmath.cos(p1) * mpmath.cos(p2) * mpmath.cos(l2 - l1)
        c = max(mpmath.mpf(-1), min(mpmath.mpf(1), c))
        return float(R * mpmath.acos(c))


def count_at_or_below(errors, t):
    return sum(1 for e in errors if e <= t) / len(errors)


def lower_median(xs):
    s = sorted(xs)
    return s[(len(s) - 1) // 2]


def mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)
