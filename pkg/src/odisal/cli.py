"""Command-line pipeline: extract | predict | train | eval | ablate.

Configuration is layered: built-in defaults, then a flat key=value config
file, then command-line flags.  Exit codes: 0 success, 1 usage, 2 I/O,
3 numeric failure or training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys

import numpy as np

from . import data as data_mod
from . import geometry, metrics, model
from .errors import (
    AllHoles,
    AllZero,
    ArchitectureMismatch,
    BadImage,
    ConstantInput,
    CorruptFile,
    Diverged,
    OdisalError,
)
from .formats import read_image, read_saliency, write_image, write_sal
from .nn import SgdConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


@dataclasses.dataclass
class Config:
    """Run configuration; defaults are the full-scale training setup."""

    fov_deg: float = 90.0
    patch_w: int = 256
    patch_h: int = 256
    blur_kernel: int = 64
    lr: float = 1.3e-7
    lr_gamma: float = 0.7
    lr_step: int = 500
    weight_decay: float = 5e-4
    batch_size: int = 5
    iterations: int = 22000
    seed: int = 0
    latitude_weighted: bool = True
    test_fraction: float = 0.1
    test_every: int = 100
    n_per_odi: int = 100
    ablate_w: int = 800
    ablate_h: int = 400
    threads: int = 1
    mean: float = 127.5
    dtype: str = "float64"

    @property
    def fov(self) -> float:
        return math.radians(self.fov_deg)

    @property
    def np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        return np.dtype(self.dtype)

    def sgd(self, iterations=None) -> SgdConfig:
        return SgdConfig(
            base_lr=self.lr,
            lr_gamma=self.lr_gamma,
            lr_step=self.lr_step,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            iterations=self.iterations if iterations is None else iterations,
        )


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(Config)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, val)
    return values


def build_config(args: argparse.Namespace) -> Config:
    """defaults <- config file <- explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return Config(**values)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    for f in dataclasses.fields(Config):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(
                flag,
                dest=f.name,
                type=lambda s: _parse_value("latitude_weighted", s),
                metavar="BOOL",
                help=f"default {f.default}",
            )
        else:
            p.add_argument(
                flag,
                dest=f.name,
                type={"int": int, "float": float, "str": str}[f.type],
                help=f"default {f.default}",
            )


def _load_odi(path: str) -> np.ndarray:
    img = read_image(path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def cmd_extract(args) -> int:
    cfg = build_config(args)
    odi = _load_odi(args.odi)
    os.makedirs(args.out, exist_ok=True)
    frustums = geometry.six_fixed_frustums(cfg.fov, cfg.patch_w, cfg.patch_h)
    manifest = []
    for i, f in enumerate(frustums):
        patch = geometry.extract_patch(odi, f)
        write_image(os.path.join(args.out, f"patch_{i}.png"), patch.image)
        # coords_{i}.sal stacks theta rows over phi rows (2h x w, radians)
        coords = np.concatenate([patch.coords[:, :, 0], patch.coords[:, :, 1]])
        write_sal(os.path.join(args.out, f"coords_{i}.sal"), coords)
        manifest.append(
            "%d %.17g %.17g %.17g %d %d"
            % (i, f.yaw, f.pitch, f.fov, f.out_w, f.out_h)
        )
    with open(os.path.join(args.out, "frustums.txt"), "w", encoding="ascii") as fh:
        fh.write("index yaw pitch fov out_w out_h\n")
        fh.write("\n".join(manifest) + "\n")
    print(f"wrote 6 patches to {args.out}")
    return EXIT_OK


def _preview_path(out_path: str) -> str:
    stem, _ = os.path.splitext(out_path)
    return stem + "_preview.png"


def cmd_predict(args) -> int:
    cfg = build_config(args)
    odi = _load_odi(args.odi)
    net = model.load_weights(args.weights, dtype=cfg.np_dtype)
    sal = model.predict_equirect(
        net,
        odi,
        fov=cfg.fov,
        patch_w=cfg.patch_w,
        patch_h=cfg.patch_h,
        blur_kernel=cfg.blur_kernel,
        threads=cfg.threads,
    )
    write_sal(args.out, sal)
    gray = odi.mean(axis=2)
    blended = 0.5 * gray + 0.5 * 255.0 * sal
    preview = np.concatenate(
        [odi, np.repeat(blended[:, :, None], 3, axis=2)], axis=1
    )
    write_image(args.preview or _preview_path(args.out), preview)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    if args.stage == 2 and not args.weights_in:
        raise UsageError("stage 2 requires --weights-in (stage-1 weights)")
    pairs = data_mod.load_manifest(args.manifest)
    if args.weights_in:
        # the normalization mean persists with the weights
        net = model.load_weights(args.weights_in, dtype=cfg.np_dtype)
    else:
        net = model.build_network(cfg.seed, dtype=cfg.np_dtype, mean=cfg.mean)
    os.makedirs(args.weights_out, exist_ok=True)
    log_path = args.log or os.path.join(args.weights_out, "training_log.txt")
    sgd = cfg.sgd()
    if args.stage == 1:
        examples = data_mod.stage1_dataset(pairs, cfg.mean)
        result = model.train_stage1(
            net,
            examples,
            sgd,
            test_fraction=cfg.test_fraction,
            test_every=cfg.test_every,
            seed=cfg.seed,
            log_path=log_path,
        )
    else:
        samples = data_mod.build_patch_dataset(
            pairs, cfg.n_per_odi, cfg.fov, cfg.patch_w, cfg.patch_h,
            seed=cfg.seed, mean=cfg.mean,
        )
        result = model.train_stage2(
            net,
            samples,
            sgd,
            test_fraction=cfg.test_fraction,
            test_every=cfg.test_every,
            seed=cfg.seed,
            log_path=log_path,
        )
    model.save_weights(net, args.weights_out)
    print(
        "stage %d: %d iterations, loss %.6g -> %.6g, log at %s"
        % (args.stage, sgd.iterations, result.initial_loss, result.final_loss, log_path)
    )
    return EXIT_OK


def _match_files(directory: str, stem: str):
    for ext in (".sal", ".png", ".jpg", ".jpeg"):
        candidate = os.path.join(directory, stem + ext)
        if os.path.isfile(candidate):
            return candidate
    raise FileNotFoundError(f"no prediction found for {stem!r} in {directory}")


def _read_fixations(path: str):
    fixations = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip().replace(",", " ")
            if not line or line.startswith("#"):
                continue
            x, y = line.split()
            fixations.append((int(x), int(y)))
    return fixations


def cmd_eval(args) -> int:
    cfg = build_config(args)
    gt_files = sorted(
        f for f in os.listdir(args.gt_dir)
        if f.lower().endswith((".sal", ".png", ".jpg", ".jpeg"))
    )
    if not gt_files:
        raise UsageError(f"no ground-truth maps in {args.gt_dir}")
    ids, reports = [], []
    for fname in gt_files:
        stem = os.path.splitext(fname)[0]
        gt = read_saliency(os.path.join(args.gt_dir, fname))
        pred = read_saliency(_match_files(args.pred_dir, stem))
        fixations = None
        if args.fx_dir:
            fx_path = os.path.join(args.fx_dir, stem + ".txt")
            if os.path.isfile(fx_path):
                fixations = _read_fixations(fx_path)
        reports.append(
            metrics.evaluate(pred, gt, fixations, cfg.latitude_weighted)
        )
        ids.append(stem)
    metrics.report_csv(ids, reports, args.out)
    print(metrics.report_text(ids, reports))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    net = model.load_weights(args.weights, dtype=cfg.np_dtype)
    pairs = data_mod.load_manifest(args.manifest)
    per_scenario = {name: [] for name in metrics.SCENARIO_NAMES}
    for pair in pairs:
        rows = metrics.ablation_report(
            pair.image,
            pair.saliency_gt,
            None,
            net,
            fov=cfg.fov,
            patch_w=cfg.patch_w,
            patch_h=cfg.patch_h,
            blur_kernel=cfg.blur_kernel,
            down_w=cfg.ablate_w,
            down_h=cfg.ablate_h,
            latitude_weighted=cfg.latitude_weighted,
        )
        for name, report, _ in rows:
            per_scenario[name].append(report)
    lines = ["scenario kl cc nss auc"]
    means = {}
    for name in metrics.SCENARIO_NAMES:
        mean, _ = metrics.aggregate(per_scenario[name])
        means[name] = mean
        lines.append(
            "%s %.17g %.17g %.17g %.17g" % (name, *mean.values())
        )
    improved = means["six_patches_refined"].cc >= means["whole_odi_base"].cc
    lines.append(
        "# note: refined CC >= whole-ODI CC: %s" % ("yes" if improved else "no")
    )
    text = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


class UsageError(ValueError):
    pass


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="odisal",
        description="Saliency prediction for omnidirectional images.",
        epilog=(
            "exit codes: 0 success, 1 usage, 2 I/O, 3 numeric/divergence. "
            "Defaults are the full-scale setup (fov 90deg, blur 64 px, "
            "lr 1.3e-7 x 0.7 every 500 iterations, batch 5, 22000 iterations)."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "extract", parents=[], help="cut an ODI into six frustum patches"
    )
    p.add_argument("--odi", required=True, help="equirectangular image")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("predict", help="predict an equirectangular saliency map")
    p.add_argument("--odi", required=True)
    p.add_argument("--weights", required=True, help="weights directory")
    p.add_argument("--out", required=True, help="output .sal path")
    p.add_argument("--preview", help="preview PNG path (default: <out>_preview.png)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("train", help="train stage 1 (base) or stage 2 (full)")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--weights-in", help="initial weights (required for stage 2)")
    p.add_argument("--weights-out", required=True)
    p.add_argument("--log", help="training log path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--fx-dir", help="optional per-image fixation lists (x y lines)")
    p.add_argument("--out", required=True, help="output CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="three-scenario comparison table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="output table path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (Diverged, AllZero, AllHoles, ConstantInput) as exc:
        print(f"odisal: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptFile, BadImage, ArchitectureMismatch, OSError) as exc:
        print(f"odisal: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, OdisalError) as exc:
        print(f"odisal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
