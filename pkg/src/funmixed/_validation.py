"""Input validation helpers shared by the estimators and the pipeline."""

import numbers

import numpy as np

GENDER_LEVELS = ("M", "F")
AGE_LEVELS = ("young", "old")

_GENDER_ALIASES = {"m": "M", "male": "M", "f": "F", "female": "F"}
_AGE_ALIASES = {"young": "young", "y": "young", "old": "old", "o": "old"}


def normalize_gender(label):
    """Map a gender label to ``"M"`` or ``"F"``."""
    key = str(label).strip().lower()
    if key not in _GENDER_ALIASES:
        raise ValueError(f"unknown gender label {label!r}; expected one of M, F")
    return _GENDER_ALIASES[key]


def normalize_age(label):
    """Map an age-group label to ``"young"`` or ``"old"``."""
    key = str(label).strip().lower()
    if key not in _AGE_ALIASES:
        raise ValueError(f"unknown age_group label {label!r}; expected one of young, old")
    return _AGE_ALIASES[key]


def age_group_from_age(age, cutoff=55.0):
    """Young if ``age <= cutoff`` else old."""
    return "young" if float(age) <= cutoff else "old"


def gender_sign(label):
    """-1 for male, +1 for female."""
    return -1.0 if normalize_gender(label) == "M" else 1.0


def age_sign(label):
    """-1 for young, +1 for old."""
    return -1.0 if normalize_age(label) == "young" else 1.0


def check_nonnegative_finite(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative real, got {value!r}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name, open_interval=True):
    value = float(value)
    ok = 0.0 < value < 1.0 if open_interval else 0.0 <= value <= 1.0
    if not ok:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    return value


def check_square_psd(D, M, name="D", tol=1e-10):
    D = np.asarray(D, dtype=float)
    if D.shape != (M, M):
        raise ValueError(f"{name} must be {M}x{M}, got shape {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.max(np.abs(D - D.T), initial=0.0) > tol * max(1.0, np.max(np.abs(D))):
        raise ValueError(f"{name} must be symmetric")
    D = 0.5 * (D + D.T)
    w = np.linalg.eigvalsh(D)
    if w[0] < -tol * max(1.0, abs(w[-1])):
        raise ValueError(f"{name} must be positive semi-definite (min eigenvalue {w[0]:.3g})")
    return D
