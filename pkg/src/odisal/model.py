"""The two-stage patch saliency network.

Stage one (the base stack) maps a normalized 3-channel patch to a coarse
single-channel saliency map.  Stage two (the refine stack) consumes that
map concatenated with two per-pixel spherical-coordinate channels and
produces the final patch saliency.  Both stacks end in a learned
transposed convolution whose output is bilinearly resized to the input
resolution; training losses are taken on the resized linear outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .errors import (
    ArchitectureMismatch,
    CorruptFile,
    Diverged,
    EmptyDataset,
    ShapeMismatch,
)
from .formats import read_tensor, write_tensor
from .nn import (
    BilinearResize,
    Conv2d,
    Deconv2d,
    LayerSpec,
    MaxPool2d,
    ReLU,
    SgdConfig,
    conv_out_size,
    deconv_out_size,
    euclidean_loss,
    relu,
    relu_backward,
    sgd_step,
)

# The two layer stacks. Pooling keeps its input depth; conv9 uses the
# shape-preserving padding so pool3 and deconv2 sizes pair up.
BASE_LAYERS = (
    LayerSpec("conv1", "conv", 3, 96, 7, 1, 3, "relu"),
    LayerSpec("pool1", "maxpool", 96, 96, 3, 2, 0),
    LayerSpec("conv2", "conv", 96, 256, 5, 1, 2, "relu"),
    LayerSpec("pool2", "maxpool", 256, 256, 3, 2, 0),
    LayerSpec("conv3", "conv", 256, 512, 3, 1, 1, "relu"),
    LayerSpec("conv4", "conv", 512, 256, 5, 1, 2, "relu"),
    LayerSpec("conv5", "conv", 256, 128, 7, 1, 3, "relu"),
    LayerSpec("conv6", "conv", 128, 32, 11, 1, 5, "relu"),
    LayerSpec("conv7", "conv", 32, 1, 13, 1, 6, "relu"),
    LayerSpec("deconv1", "deconv", 1, 1, 8, 4, 2),
)
REFINE_LAYERS = (
    LayerSpec("merge", "merge", 3, 3),
    LayerSpec("conv8", "conv", 3, 32, 5, 1, 2, "relu"),
    LayerSpec("pool3", "maxpool", 32, 32, 3, 2, 0),
    LayerSpec("conv9", "conv", 32, 64, 3, 1, 1, "relu"),
    LayerSpec("conv10", "conv", 64, 32, 5, 1, 2, "relu"),
    LayerSpec("conv11", "conv", 32, 1, 7, 1, 3, "relu"),
    LayerSpec("deconv2", "deconv", 1, 1, 4, 2, 1),
)

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "odisal-weights 1"


def shape_chain(h: int, w: int) -> dict:
    """Activation spatial shapes per layer for an h-by-w input.

    Pure arithmetic over the layer tables; keys are layer names plus
    'merge' (refine input) and the two raw deconv outputs.
    """
    shapes = {}
    cur = (h, w)
    for spec in BASE_LAYERS:
        if spec.kind in ("conv", "maxpool"):
            cur = (
                conv_out_size(cur[0], spec.kernel, spec.stride, spec.padding),
                conv_out_size(cur[1], spec.kernel, spec.stride, spec.padding),
            )
        elif spec.kind == "deconv":
            cur = (
                deconv_out_size(cur[0], spec.kernel, spec.stride, spec.padding),
                deconv_out_size(cur[1], spec.kernel, spec.stride, spec.padding),
            )
        shapes[spec.name] = cur
    cur = (h, w)  # refine consumes the resized base output
    for spec in REFINE_LAYERS:
        if spec.kind in ("conv", "maxpool"):
            cur = (
                conv_out_size(cur[0], spec.kernel, spec.stride, spec.padding),
                conv_out_size(cur[1], spec.kernel, spec.stride, spec.padding),
            )
        elif spec.kind == "deconv":
            cur = (
                deconv_out_size(cur[0], spec.kernel, spec.stride, spec.padding),
                deconv_out_size(cur[1], spec.kernel, spec.stride, spec.padding),
            )
        shapes[spec.name] = cur
    return shapes


def _instantiate(specs, rng, dtype):
    layers = []
    for spec in specs:
        if spec.kind == "conv":
            layers.append(Conv2d(spec, rng, dtype))
            if spec.activation == "relu":
                layers.append(ReLU(f"{spec.name}.relu"))
        elif spec.kind == "deconv":
            layers.append(Deconv2d(spec, rng, dtype))
        elif spec.kind == "maxpool":
            layers.append(MaxPool2d(spec))
        elif spec.kind == "merge":
            continue  # structural: handled by the forward pass
        else:
            raise ValueError(f"unknown layer kind {spec.kind}")
    return layers


class SaliencyNet:
    """Base + refine stacks with explicit two-stage forward/backward."""

    def __init__(self, seed: int = 0, dtype=np.float64, mean: float = 127.5):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.mean = float(mean)
        self.base = _instantiate(BASE_LAYERS, rng, self.dtype)
        self.refine = _instantiate(REFINE_LAYERS, rng, self.dtype)
        self._resize_base = BilinearResize("resize_base")
        self._resize_refine = BilinearResize("resize_refine")
        self._merge_in = None  # cached merge input for the stage-2 backward

    # -- parameter access ------------------------------------------------

    def params_base(self):
        out = []
        for layer in self.base:
            out.extend(layer.params())
        return out

    def params_refine(self):
        out = []
        for layer in self.refine:
            out.extend(layer.params())
        return out

    def params(self):
        return self.params_base() + self.params_refine()

    # -- forward ----------------------------------------------------------

    def forward_base_raw(self, x: np.ndarray) -> np.ndarray:
        """Base stack output, resized to the input dims, no clamp."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        h, w = x.shape[2], x.shape[3]
        for layer in self.base:
            x = layer.forward(x)
        return self._resize_base.forward(x, out_hw=(h, w))

    def forward_base(self, x: np.ndarray) -> np.ndarray:
        """Coarse saliency, clamped to be non-negative."""
        return np.maximum(self.forward_base_raw(x), 0.0)

    def forward_full_raw(self, x: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Refine stack output on [relu(base), theta, phi], resized, no clamp."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        coords = np.ascontiguousarray(coords, dtype=self.dtype)
        if coords.ndim == 3:
            coords = coords[None]
        if coords.shape[0] != x.shape[0] or coords.shape[2:] != x.shape[2:]:
            raise ShapeMismatch(
                f"coords {coords.shape} do not match input {x.shape}"
            )
        h, w = x.shape[2], x.shape[3]
        base_raw = self.forward_base_raw(x)
        self._merge_in = base_raw
        y = np.concatenate([relu(base_raw), coords], axis=1)
        for layer in self.refine:
            y = layer.forward(y)
        return self._resize_refine.forward(y, out_hw=(h, w))

    def forward_full(self, x: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Final patch saliency: clamped at 0 and max-normalized to [0,1]."""
        y = np.maximum(self.forward_full_raw(x, coords), 0.0)
        peak = y.max()
        if peak > 0:
            y = y / peak
        return y

    # -- backward ----------------------------------------------------------

    def backward_base(self, grad: np.ndarray) -> np.ndarray:
        """Backprop a gradient at the resized base output; fills base grads."""
        grad = self._resize_base.backward(grad)
        for layer in reversed(self.base):
            grad = layer.backward(grad)
        return grad

    def backward_full(self, grad: np.ndarray) -> np.ndarray:
        """Backprop a gradient at the resized refine output through both stacks."""
        grad = self._resize_refine.backward(grad)
        for layer in reversed(self.refine):
            grad = layer.backward(grad)
        grad_base = relu_backward(self._merge_in, grad[:, :1])
        return self.backward_base(grad_base)


def build_network(seed: int = 0, dtype=np.float64, mean: float = 127.5) -> SaliencyNet:
    """Fresh network with fan-in-scaled uniform init, deterministic per seed."""
    return SaliencyNet(seed=seed, dtype=dtype, mean=mean)


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    """Loss curves from one training stage."""

    train_losses: list = field(default_factory=list)
    test_iters: list = field(default_factory=list)
    test_losses: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.train_losses[0]

    @property
    def final_loss(self) -> float:
        return self.train_losses[-1]


def _write_log(path, cfg: SgdConfig, result: TrainResult, iterations: int):
    """Columns: iteration, lr, train_loss, test_loss ('-' off cadence).

    One row per iteration plus a terminal state row at t=iterations so the
    post-schedule learning rate is observable from the artifact.
    """
    test_at = dict(zip(result.test_iters, result.test_losses))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iteration lr train_loss test_loss\n")
        for t, loss in enumerate(result.train_losses):
            test = test_at.get(t)
            fh.write(
                "%d %.17g %.17g %s\n"
                % (t, cfg.learning_rate(t), loss, "-" if test is None else "%.17g" % test)
            )
        t = iterations
        test = test_at.get(t)
        fh.write(
            "%d %.17g %.17g %s\n"
            % (
                t,
                cfg.learning_rate(t),
                result.train_losses[-1] if result.train_losses else float("nan"),
                "-" if test is None else "%.17g" % test,
            )
        )


def _split_for_training(samples, cfg_fraction, seed):
    if cfg_fraction <= 0:
        return list(samples), []
    return data_mod.split(samples, cfg_fraction, seed)


def _stage_loop(
    net,
    forward,
    backward,
    params_of,
    train_xy,
    test_xy,
    cfg: SgdConfig,
    iterations: int,
    test_every: int,
    seed: int,
    log_path,
    divergence_guard: bool,
) -> TrainResult:
    """Shared SGD loop; forward/backward close over the stage specifics."""
    if not train_xy:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(seed)
    result = TrainResult()
    best_test = np.inf

    def batch_loss(pairs):
        total = 0.0
        for bx, by in pairs:
            pred = forward(bx[None])
            loss, _ = euclidean_loss(pred, by[None])
            total += loss
        return total / len(pairs)

    for t in range(iterations):
        idx = rng.integers(0, len(train_xy), size=cfg.batch_size)
        bx = np.stack([train_xy[i][0] for i in idx])
        by = np.stack([train_xy[i][1] for i in idx])
        pred = forward(bx)
        loss, grad = euclidean_loss(pred, by)
        result.train_losses.append(loss)
        backward(grad)
        triples = params_of()
        sgd_step([p for _, p, _ in triples], [g for _, _, g in triples], cfg, t)

        if test_xy and t % test_every == 0:
            test_loss = batch_loss(test_xy)
            result.test_iters.append(t)
            result.test_losses.append(test_loss)
            best_test = min(best_test, test_loss)
            if divergence_guard and test_loss > 10.0 * best_test:
                if log_path:
                    _write_log(log_path, cfg, result, t + 1)
                raise Diverged(
                    f"test loss {test_loss:.6g} exceeded 10x best "
                    f"{best_test:.6g} at iteration {t}"
                )
    if test_xy:
        result.test_iters.append(iterations)
        result.test_losses.append(batch_loss(test_xy))
    if log_path:
        _write_log(log_path, cfg, result, iterations)
    return result


def train_stage1(
    net: SaliencyNet,
    examples,
    cfg: SgdConfig,
    *,
    test_fraction: float = 0.1,
    test_every: int = 100,
    seed: int = 0,
    log_path=None,
) -> TrainResult:
    """Train the base stack alone on (image, saliency) pairs.

    ``examples`` are data.Stage1Example items; the loss sits on the resized
    deconv output.  Weights of the refine stack are untouched.
    """
    if not examples:
        raise EmptyDataset("stage-1 dataset is empty")
    train, test = _split_for_training(examples, test_fraction, seed)
    train_xy = [(e.image, e.target) for e in train]
    test_xy = [(e.image, e.target) for e in test]
    return _stage_loop(
        net,
        net.forward_base_raw,
        net.backward_base,
        net.params_base,
        train_xy,
        test_xy,
        cfg,
        cfg.iterations,
        test_every,
        seed,
        log_path,
        divergence_guard=False,
    )


def train_stage2(
    net: SaliencyNet,
    samples,
    cfg: SgdConfig,
    *,
    test_fraction: float = 0.1,
    test_every: int = 100,
    seed: int = 0,
    log_path=None,
) -> TrainResult:
    """Train base + refine end to end on patch samples with coordinates.

    Aborts with Diverged when a fresh test loss exceeds ten times the best
    test loss seen so far.
    """
    if not samples:
        raise EmptyDataset("stage-2 dataset is empty")
    train, test = _split_for_training(samples, test_fraction, seed)

    def pack(items):
        return [
            (np.concatenate([s.image, s.coords], axis=0), s.saliency_gt)
            for s in items
        ]

    train_xy = pack(train)
    test_xy = pack(test)

    def forward(xc):
        return net.forward_full_raw(xc[:, :3], xc[:, 3:])

    return _stage_loop(
        net,
        forward,
        net.backward_full,
        net.params,
        train_xy,
        test_xy,
        cfg,
        cfg.iterations,
        test_every,
        seed,
        log_path,
        divergence_guard=True,
    )


# -- whole-image prediction ----------------------------------------------------


def _resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (h, w) or (h, w, c) raster."""
    resizer = BilinearResize("tmp")
    if img.ndim == 2:
        return resizer.forward(img[None, None], out_hw=(out_h, out_w))[0, 0]
    nchw = img.transpose(2, 0, 1)[None]
    return resizer.forward(nchw, out_hw=(out_h, out_w))[0].transpose(1, 2, 0)


def _max_normalize(m: np.ndarray) -> np.ndarray:
    m = np.maximum(m, 0.0)
    peak = m.max()
    return m / peak if peak > 0 else m


def predict_equirect(
    net: SaliencyNet,
    odi: np.ndarray,
    *,
    fov: float = np.pi / 2,
    patch_w: int = 256,
    patch_h: int = 256,
    blur_kernel: int = 64,
    use_refine: bool = True,
    threads: int = 1,
) -> np.ndarray:
    """Full pipeline: six patches, per-patch saliency, splat, fill, smooth.

    The result is an equirectangular map max-normalized to [0, 1].
    """
    from . import geometry

    odi = np.asarray(odi, dtype=np.float64)
    geometry.validate_equirect(odi)
    h, w = odi.shape[:2]
    frustums = geometry.six_fixed_frustums(fov, patch_w, patch_h)
    patches = [geometry.extract_patch(odi, f) for f in frustums]

    def infer(patch):
        x = data_mod.normalize(patch.image, net.mean).transpose(2, 0, 1)[None]
        x = x.astype(net.dtype)
        if use_refine:
            coords = geometry.coord_channels(patch.coords)[None].astype(net.dtype)
            sal = net.forward_full(x, coords)
        else:
            sal = net.forward_base(x)
        return np.asarray(sal[0, 0], dtype=np.float64)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            sal_maps = list(pool.map(infer, patches))
    else:
        sal_maps = [infer(p) for p in patches]

    canvas = np.zeros((h, w))
    counts = np.zeros((h, w))
    for patch, sal in zip(patches, sal_maps):
        geometry.splat_patch(
            canvas, counts, geometry.Patch(sal, patch.coords, patch.frustum)
        )
    combined = geometry.finalize_splat(canvas, counts)
    filled = geometry.gaussian_fill_and_smooth(combined, blur_kernel)
    return _max_normalize(filled)


def predict_downscaled(
    net: SaliencyNet, odi: np.ndarray, down_w: int = 800, down_h: int = 400
) -> np.ndarray:
    """Ablation row 1: whole ODI through the base stack at reduced size."""
    odi = np.asarray(odi, dtype=np.float64)
    h, w = odi.shape[:2]
    small = _resize_image(odi, down_h, down_w)
    x = data_mod.normalize(small, net.mean).transpose(2, 0, 1)[None].astype(net.dtype)
    sal = np.asarray(net.forward_base(x)[0, 0], dtype=np.float64)
    return _max_normalize(_resize_image(sal, h, w))


# -- persistence --------------------------------------------------------------


def _expected_tensors():
    """Ordered (name, kind, shape-or-None) for every weight tensor."""
    rows = []
    for spec in BASE_LAYERS + REFINE_LAYERS:
        if spec.kind in ("conv", "deconv"):
            rows.append(
                (
                    f"{spec.name}.weight",
                    spec.kind,
                    (spec.out_depth, spec.in_depth, spec.kernel, spec.kernel),
                )
            )
            rows.append((f"{spec.name}.bias", spec.kind, (spec.out_depth,)))
    return rows


def save_weights(net: SaliencyNet, path: str) -> None:
    """Weights directory: plain-text manifest + one TEN1 blob per tensor."""
    os.makedirs(path, exist_ok=True)
    triples = net.params()
    expected = _expected_tensors()
    lines = [MANIFEST_MAGIC, "mean %.17g" % net.mean]
    for (name, kind, shape), (pname, p, _) in zip(expected, triples):
        if pname != name or tuple(p.shape) != shape:
            raise ArchitectureMismatch(f"network tensor {pname} does not match {name}")
        lines.append("tensor %s %s %s" % (name, kind, " ".join(map(str, shape))))
        write_tensor(os.path.join(path, f"{name}.ten"), p)
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_weights(path: str, dtype=np.float64) -> SaliencyNet:
    """Rebuild a network from a weights directory.

    The manifest must list exactly the architecture's tensors in order;
    anything else raises ArchitectureMismatch, unreadable blobs raise
    CorruptFile.
    """
    manifest = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise CorruptFile(f"missing manifest: {manifest}")
    with open(manifest, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise CorruptFile("bad weights manifest header")
    mean = 127.5
    rows = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "mean" and len(parts) == 2:
            mean = float(parts[1])
        elif parts[0] == "tensor" and len(parts) >= 4:
            rows.append((parts[1], parts[2], tuple(int(v) for v in parts[3:])))
        else:
            raise CorruptFile(f"unparseable manifest line: {ln}")
    expected = _expected_tensors()
    if len(rows) != len(expected):
        raise ArchitectureMismatch(
            f"manifest lists {len(rows)} tensors, architecture has {len(expected)}"
        )
    for (name, kind, shape), (ename, ekind, eshape) in zip(rows, expected):
        if name != ename or kind != ekind or shape != eshape:
            raise ArchitectureMismatch(
                f"manifest row {name} {kind} {shape} != expected {ename} {ekind} {eshape}"
            )
    net = SaliencyNet(seed=0, dtype=dtype, mean=mean)
    for (name, _, _), (pname, p, _) in zip(rows, net.params()):
        blob = os.path.join(path, f"{name}.ten")
        if not os.path.isfile(blob):
            raise CorruptFile(f"missing tensor blob: {blob}")
        value = read_tensor(blob)
        if value.shape != p.shape:
            raise ArchitectureMismatch(
                f"tensor {name} has shape {value.shape}, expected {p.shape}"
            )
        p[...] = value.astype(dtype)
    return net
