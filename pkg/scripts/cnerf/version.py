"""
Version information for corres-nerf.

Format: MAJOR.MINOR.PATCH with an optional release phase suffix
(e.g. 0.2.0-alpha). Checkpoint and bundle formats carry their own
version numbers; this one tracks the tool.
"""

# Semantic version components
MAJOR = 0
MINOR = 1
PATCH = 0

# Optional release phase (alpha, beta, rc1, ...). Empty for stable releases.
PHASE = "alpha"


def get_base_version() -> str:
    """Return MAJOR.MINOR.PATCH with the optional phase appended."""
    base = f"{MAJOR}.{MINOR}.{PATCH}"
    if PHASE:
        base = f"{base}-{PHASE}"
    return base


def get_version_dict() -> dict:
    return {"major": MAJOR, "minor": MINOR, "patch": PATCH, "phase": PHASE, "base": get_base_version()}


__version__ = get_base_version()
