#!/usr/bin/env python3
"""End-to-end demo on a synthetic corpus: train, predict, evaluate.

Runs in a few minutes on one core with the default sizes.  Artifacts
(weights, logs, predictions, report) land in --out-dir.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from odisal import data, formats, metrics, model, nn


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="toy_run")
    ap.add_argument("--n-odis", type=int, default=2)
    ap.add_argument("--odi-w", type=int, default=128)
    ap.add_argument("--odi-h", type=int, default=64)
    ap.add_argument("--patch", type=int, default=32)
    ap.add_argument("--stage1-iters", type=int, default=500)
    ap.add_argument("--stage2-iters", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=1.3e-7 * 5e4,
                    help="base learning rate (default: published rate "
                         "scaled for the tiny corpus)")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    corpus = data.synth_corpus(args.n_odis, args.odi_w, args.odi_h,
                               seed=args.seed)
    for pair in corpus:
        formats.write_image(out / f"{pair.id}.png", pair.image)
        formats.write_sal(out / f"{pair.id}_gt.sal", pair.saliency_gt)
    print(f"corpus: {len(corpus)} ODIs at {args.odi_w}x{args.odi_h}")

    net = model.build_network(seed=1, dtype=np.float32)

    def cfg(iters):
        return nn.SgdConfig(base_lr=args.lr, lr_gamma=0.7, lr_step=500,
                            weight_decay=5e-4, batch_size=1, iterations=iters)

    t0 = time.monotonic()
    s1 = model.train_stage1(net, data.stage1_dataset(corpus),
                            cfg(args.stage1_iters), seed=1,
                            log_path=out / "stage1_log.txt")
    print(f"stage 1: loss {s1.initial_loss:.5f} -> {s1.final_loss:.5f} "
          f"({time.monotonic() - t0:.0f}s)")

    patches = data.build_patch_dataset(corpus, 2, np.pi / 2,
                                       args.patch, args.patch, seed=3)
    t1 = time.monotonic()
    s2 = model.train_stage2(net, patches, cfg(args.stage2_iters), seed=1,
                            log_path=out / "stage2_log.txt")
    print(f"stage 2: loss {s2.initial_loss:.5f} -> {s2.final_loss:.5f} "
          f"({time.monotonic() - t1:.0f}s)")

    model.save_weights(net, out / "weights")

    results = []
    for pair in corpus:
        sal = model.predict_equirect(net, pair.image, patch_w=args.patch,
                                     patch_h=args.patch,
                                     blur_kernel=args.patch // 2)
        formats.write_sal(out / f"{pair.id}_pred.sal", sal)
        formats.write_image(out / f"{pair.id}_pred.png", sal)
        results.append(metrics.evaluate(sal, pair.saliency_gt))

    report = metrics.report_text([p.id for p in corpus], results)
    (out / "report.txt").write_text(report + "\n")
    print(report)


if __name__ == "__main__":
    main()
