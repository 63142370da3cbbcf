#!/usr/bin/env python3
"""Visualize the six-frustum decomposition of an equirectangular image.

Writes the undistorted patches, a coverage-count map, and the
extract -> splat round trip of the input.  With no --odi argument a
synthetic panorama is generated.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from odisal import data, formats, geometry


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--odi", help="equirectangular image (PNG/JPEG)")
    ap.add_argument("--out-dir", default="frustum_demo")
    ap.add_argument("--fov", type=float, default=90.0, help="degrees")
    ap.add_argument("--patch", type=int, default=256)
    args = ap.parse_args(argv)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.odi:
        odi = formats.read_image(args.odi)
    else:
        odi = data.synth_corpus(1, 512, 256, seed=0)[0].image
        formats.write_image(out / "input.png", odi)

    h, w = odi.shape[:2]
    gray = odi.mean(axis=2) / 255.0 if odi.ndim == 3 else odi
    frustums = geometry.six_fixed_frustums(
        np.deg2rad(args.fov), args.patch, args.patch
    )

    canvas = np.zeros((h, w))
    counts = np.zeros((h, w))
    for i, f in enumerate(frustums):
        patch = geometry.extract_patch(gray, f)
        formats.write_image(out / f"patch_{i}.png", patch.image)
        geometry.splat_patch(canvas, counts, patch)
        print(f"patch {i}: yaw {np.rad2deg(f.yaw):6.1f} deg, "
              f"pitch {np.rad2deg(f.pitch):6.1f} deg")

    formats.write_image(out / "coverage.png", counts / counts.max())
    roundtrip = geometry.finalize_splat(canvas, counts)
    formats.write_image(out / "roundtrip.png", np.clip(roundtrip, 0.0, 1.0))
    print(f"coverage: min {int(counts.min())} max {int(counts.max())} "
          f"overlaps, round-trip error "
          f"{np.abs(roundtrip - gray).mean():.4f} mean abs")


if __name__ == "__main__":
    main()
