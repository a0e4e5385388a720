#!/usr/bin/env python3
"""corres-nerf: correspondence-supervised radiance fields from sparse views.

  corres-nerf.py synth        --output-dir out
  corres-nerf.py preprocess   --output-dir out
  corres-nerf.py triangulate  --output-dir out
  corres-nerf.py train        --output-dir out --set train.iterations=2000
  corres-nerf.py eval         --output-dir out
  corres-nerf.py ablate-noise --output-dir out
  corres-nerf.py ablate-losses --output-dir out

The implementation lives in the sibling `cnerf/` package; this file only
makes it importable and dispatches. Exit codes: 0 success, 1 invariant
failure, 2 usage or input error.
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from cnerf.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
