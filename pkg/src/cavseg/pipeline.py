"""Training and inference machinery around the U-Net.

Covers foreground-biased patch sampling, Adam, the best-checkpoint training
loop driven by validation Jaccard, overlap-averaged sliding-window inference,
and the largest-connected-component post-filter. Checkpoints serialize to a
JSON metadata document plus a raw little-endian float32 blob and round-trip
bit-exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    IoFailure,
    MissingGradient,
    NoBackgroundPatchWarning,
    NoForeground,
    ShapeMismatch,
)
from .evalstat import jaccard
from .model import LossConfig, UNetConfig, build_unet, tversky_loss
from .volgrid import Case, LabelMask, SequenceId, Volume3


def resolve_selection(selection) -> tuple[SequenceId, ...]:
    """Normalize a channel selection to canonical order.

    Accepts "all", a single SequenceId or name, or an iterable of them.
    """
    if selection == "all" or selection is None:
        return SequenceId.canonical_order()
    if isinstance(selection, (SequenceId, str)):
        selection = [selection]
    chosen = {s if isinstance(s, SequenceId) else SequenceId(str(s).lower()) for s in selection}
    return tuple(s for s in SequenceId.canonical_order() if s in chosen)


def stack_channels(case: Case, selection) -> np.ndarray:
    seqs = resolve_selection(selection)
    return np.stack([case.channels[s].data for s in seqs], axis=0)


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class SamplerConfig:
    patch_size: tuple[int, int, int] = (44, 44, 44)
    fg_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ConfigError(f"patch_size must be three positive ints, got {self.patch_size}")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise ConfigError("fg_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"patch_size": list(self.patch_size), "fg_fraction": self.fg_fraction, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        cfg = cls(
            patch_size=tuple(int(p) for p in d.get("patch_size", (44, 44, 44))),
            fg_fraction=float(d.get("fg_fraction", 0.8)),
            seed=int(d.get("seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    max_iterations: int = 500
    val_check_interval: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.val_check_interval < 1:
            raise ConfigError("val_check_interval must be >= 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        self.loss.validate()

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "max_iterations": self.max_iterations,
            "val_check_interval": self.val_check_interval,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_epsilon": self.adam_epsilon,
            "loss": self.loss.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig.from_dict(d.pop("loss", {})) if "loss" in d else LossConfig()
        cfg = cls(
            batch_size=int(d.get("batch_size", 5)),
            max_iterations=int(d.get("max_iterations", 500)),
            val_check_interval=int(d.get("val_check_interval", 100)),
            learning_rate=float(d.get("learning_rate", 1e-3)),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            adam_epsilon=float(d.get("adam_epsilon", 1e-8)),
            loss=loss,
            seed=int(d.get("seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class InferenceConfig:
    window: tuple[int, int, int] = (44, 44, 44)
    overlap_fraction: float = 0.5
    threshold: float = 0.5
    connectivity: int = 26

    def validate(self) -> None:
        if len(self.window) != 3 or any(w < 1 for w in self.window):
            raise ConfigError(f"window must be three positive ints, got {self.window}")
        if not 0.0 <= self.overlap_fraction <= 0.9:
            raise ConfigError("overlap_fraction must lie in [0, 0.9]")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.connectivity not in (6, 26):
            raise ConfigError("connectivity must be 6 or 26")

    def to_dict(self) -> dict:
        return {
            "window": list(self.window),
            "overlap_fraction": self.overlap_fraction,
            "threshold": self.threshold,
            "connectivity": self.connectivity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        cfg = cls(
            window=tuple(int(w) for w in d.get("window", (44, 44, 44))),
            overlap_fraction=float(d.get("overlap_fraction", 0.5)),
            threshold=float(d.get("threshold", 0.5)),
            connectivity=int(d.get("connectivity", 26)),
        )
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# patch sampling

def sample_patches(
    case: Case,
    selection,
    k: int,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Draw k patches: round(fg_fraction*k) contain foreground, the rest none.

    A foreground patch is drawn by picking a mask voxel uniformly, then a patch
    origin uniformly among those covering it. Background patches use rejection
    sampling over uniform origins; if the budget runs out (foreground saturates
    the volume) a foreground patch is substituted with NoBackgroundPatchWarning.
    """
    cfg.validate()
    if k < 1:
        raise ConfigError("k must be >= 1")
    if case.mask is None or case.mask.count() == 0:
        raise NoForeground(f"case {case.case_id!r} has no foreground to sample")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    dims = case.dims
    patch = cfg.patch_size
    if any(p > d for p, d in zip(patch, dims)):
        raise ConfigError(f"patch {patch} does not fit inside volume {dims}")

    data = stack_channels(case, selection)
    mask = case.mask.data
    fg_voxels = np.argwhere(mask > 0)
    n_fg = int(np.floor(cfg.fg_fraction * k + 0.5))

    def fg_origin():
        vx = fg_voxels[rng.integers(len(fg_voxels))]
        origin = []
        for axis in range(3):
            lo = max(0, vx[axis] - patch[axis] + 1)
            hi = min(dims[axis] - patch[axis], vx[axis])
            origin.append(int(rng.integers(lo, hi + 1)))
        return tuple(origin)

    def label_at(origin):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        return mask[sl]

    patches = []
    for _ in range(n_fg):
        origin = fg_origin()
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        patches.append((data[(slice(None),) + sl], mask[sl]))
    budget = 200
    for _ in range(k - n_fg):
        found = None
        for _ in range(budget):
            origin = tuple(
                int(rng.integers(0, dims[axis] - patch[axis] + 1)) for axis in range(3)
            )
            if label_at(origin).sum() == 0:
                found = origin
                break
        if found is None:
            warnings.warn(
                f"case {case.case_id!r}: no background-only patch found in {budget} tries; "
                "substituting a foreground patch",
                NoBackgroundPatchWarning,
            )
            found = fg_origin()
        sl = tuple(slice(o, o + p) for o, p in zip(found, patch))
        patches.append((data[(slice(None),) + sl], mask[sl]))
    return [
        (ad.Tensor(x.copy()), ad.Tensor(y[None].astype(np.float64)))
        for x, y in patches
    ]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: ad.ParamSet) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: ad.ParamSet,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise MissingGradient(f"parameter {name!r} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_FORMAT = "cavseg-checkpoint-v1"


@dataclass(frozen=True)
class Checkpoint:
    """Best network parameters plus full training provenance.

    Parameters are stored as float32 (the on-disk format), so in-memory and
    serialized checkpoints are interchangeable bit for bit.
    """

    model: UNetConfig
    params: dict[str, np.ndarray]
    best_val_jaccard: float
    iteration_of_best: int
    train_seed: int
    loss: LossConfig
    sequences: tuple[SequenceId, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "params", {k: np.asarray(v, dtype="<f4") for k, v in sorted(self.params.items())}
        )
        if not 0.0 <= self.best_val_jaccard <= 1.0:
            raise ConfigError(f"best_val_jaccard {self.best_val_jaccard} outside [0, 1]")


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """Write ckpt.json + ckpt.bin under ``directory``; returns the json path."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        offset = 0
        table = {}
        blobs = []
        for name, arr in ckpt.params.items():
            raw = arr.astype("<f4").tobytes()
            table[name] = {"shape": list(arr.shape), "offset": offset}
            blobs.append(raw)
            offset += len(raw)
        meta = {
            "format": _CKPT_FORMAT,
            "model": ckpt.model.to_dict(),
            "loss": ckpt.loss.to_dict(),
            "sequences": [s.value for s in ckpt.sequences],
            "train_seed": ckpt.train_seed,
            "best_val_jaccard": ckpt.best_val_jaccard,
            "iteration_of_best": ckpt.iteration_of_best,
            "tensors": table,
        }
        json_path = directory / "ckpt.json"
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (directory / "ckpt.bin").write_bytes(b"".join(blobs))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint to {directory}: {exc}") from exc
    return json_path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint from its directory or its ckpt.json path."""
    path = Path(path)
    json_path = path / "ckpt.json" if path.is_dir() else path
    try:
        meta = json.loads(json_path.read_text())
        blob = (json_path.parent / "ckpt.bin").read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {json_path}: {exc}") from exc
    if meta.get("format") != _CKPT_FORMAT:
        raise ConfigError(f"{json_path}: unknown checkpoint format {meta.get('format')!r}")
    params = {}
    for name, entry in meta["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        params[name] = arr.copy()
    return Checkpoint(
        model=UNetConfig.from_dict(meta["model"]),
        params=params,
        best_val_jaccard=float(meta["best_val_jaccard"]),
        iteration_of_best=int(meta["iteration_of_best"]),
        train_seed=int(meta["train_seed"]),
        loss=LossConfig.from_dict(meta["loss"]),
        sequences=tuple(SequenceId(s) for s in meta["sequences"]),
    )


# ---------------------------------------------------------------------------
# sliding-window inference

def _window_positions(dim: int, window: int, stride: int) -> list[int]:
    if dim <= window:
        return [0]
    last = int(np.ceil((dim - window) / stride)) * stride
    return list(range(0, last + 1, stride))


def _sliding_infer(forward, volume: np.ndarray, window, overlap: float) -> np.ndarray:
    """Average window probabilities over a zero-padded tiling of (c, X, Y, Z)."""
    c, X, Y, Z = volume.shape
    wx, wy, wz = window
    strides = [max(1, int(round(w * (1.0 - overlap)))) for w in (wx, wy, wz)]
    pos = [
        _window_positions(X, wx, strides[0]),
        _window_positions(Y, wy, strides[1]),
        _window_positions(Z, wz, strides[2]),
    ]
    padded_dims = (
        max(X, pos[0][-1] + wx),
        max(Y, pos[1][-1] + wy),
        max(Z, pos[2][-1] + wz),
    )
    padded = np.zeros((c,) + padded_dims)
    padded[:, :X, :Y, :Z] = volume
    acc = np.zeros(padded_dims)
    cnt = np.zeros(padded_dims)
    with ad.no_grad():
        for ox in pos[0]:
            for oy in pos[1]:
                for oz in pos[2]:
                    tile = padded[:, ox : ox + wx, oy : oy + wy, oz : oz + wz]
                    prob = forward(ad.Tensor(tile)).data[0]
                    acc[ox : ox + wx, oy : oy + wy, oz : oz + wz] += prob
                    cnt[ox : ox + wx, oy : oy + wy, oz : oz + wz] += 1.0
    return (acc / cnt)[:X, :Y, :Z]


def predict(
    ckpt: Checkpoint,
    case: Case,
    selection=None,
    cfg: InferenceConfig = InferenceConfig(),
) -> tuple[Volume3, LabelMask]:
    """Tile the case with overlapping windows and average the probabilities.

    Every voxel is covered by at least one window (the volume is zero-padded
    as needed, then cropped). Thresholding at cfg.threshold yields the mask;
    the connected-component filter is a separate step (largest_component).
    """
    cfg.validate()
    seqs = resolve_selection(selection if selection is not None else ckpt.sequences)
    if len(seqs) != ckpt.model.in_channels:
        raise ShapeMismatch(
            f"checkpoint expects {ckpt.model.in_channels} channels, selection has {len(seqs)}"
        )
    params, forward = build_unet(ckpt.model)
    params.load_state_arrays(ckpt.params)
    volume = stack_channels(case, seqs)
    stride = ckpt.model.pool_stride_product
    if any(w % stride for w in cfg.window):
        raise ConfigError(f"window {cfg.window} not divisible by pool stride product {stride}")
    prob = _sliding_infer(forward, volume, cfg.window, cfg.overlap_fraction)
    spacing = next(iter(case.channels.values())).spacing
    mask = (prob >= cfg.threshold).astype(np.uint8)
    return Volume3(data=prob, spacing=spacing), LabelMask(data=mask, spacing=spacing)


# ---------------------------------------------------------------------------
# connected components

_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def largest_component(mask: LabelMask, connectivity: int = 26) -> LabelMask:
    """Keep only the largest foreground component; ties go to the component
    containing the smallest x-fastest linear voxel index. Empty in, empty out.

    BFS over a zero-padded flat grid; seeds are scanned in x-fastest order so
    the first component found among equal-sized ones wins ties.
    """
    if connectivity not in (6, 26):
        raise ConfigError("connectivity must be 6 or 26")
    nx, ny, nz = mask.dims
    fg = mask.data > 0
    if not fg.any():
        return LabelMask(data=np.zeros_like(mask.data), spacing=mask.spacing)
    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = fg
    flat = padded.ravel()
    sy, sx = nz + 2, (nz + 2) * (ny + 2)  # C-order strides of the padded grid
    offsets = np.array(
        [dx * sx + dy * sy + dz for (dx, dy, dz) in (_OFFSETS_6 if connectivity == 6 else _OFFSETS_26)]
    )
    # seeds in x-fastest order of the original grid
    xs, ys, zs = np.unravel_index(np.flatnonzero(fg.ravel(order="F")), (nx, ny, nz), order="F")
    seeds = (xs + 1) * sx + (ys + 1) * sy + (zs + 1)
    visited = np.zeros(flat.size, dtype=bool)
    best_comp: np.ndarray | None = None
    best_size = 0
    for seed in seeds:
        if visited[seed]:
            continue
        visited[seed] = True
        frontier = np.array([seed])
        members = [frontier]
        size = 1
        while frontier.size:
            cand = (frontier[:, None] + offsets[None, :]).ravel()
            cand = np.unique(cand)
            cand = cand[flat[cand] & ~visited[cand]]
            visited[cand] = True
            if cand.size:
                members.append(cand)
                size += cand.size
            frontier = cand
        if size > best_size:  # strict: earlier seed keeps ties
            best_size = size
            best_comp = np.concatenate(members)
    out = np.zeros(flat.size, dtype=np.uint8)
    out[best_comp] = 1
    out = out.reshape(padded.shape)[1:-1, 1:-1, 1:-1]
    return LabelMask(data=out, spacing=mask.spacing)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    iterations_run: int
    val_history: list[tuple[int, float]]


def _fit_window(patch_size, stride) -> tuple[int, int, int]:
    return tuple(max(stride, (p // stride) * stride) for p in patch_size)


def train(
    train_cases: list[Case],
    val_cases: list[Case],
    selection,
    model_cfg: UNetConfig,
    sampler_cfg: SamplerConfig,
    train_cfg: TrainConfig,
    log=None,
) -> TrainResult:
    """Optimize the network and return the checkpoint with the best validation
    Jaccard (thresholded at 0.5, sliding window = patch size, overlap 0).

    Iteration i draws a batch of patches from train case i mod n (cases cycle
    round-robin); the loss is the mean of per-patch asymmetric overlap losses.
    Validation runs at iteration 0, every val_check_interval iterations, and
    after the final iteration; the checkpoint is replaced only on strict
    improvement, so the earliest best wins ties and the result is never worse
    than the initial evaluation.
    """
    model_cfg.validate()
    sampler_cfg.validate()
    train_cfg.validate()
    seqs = resolve_selection(selection)
    if model_cfg.in_channels != len(seqs):
        raise ConfigError(
            f"model expects {model_cfg.in_channels} channels but selection {seqs} has {len(seqs)}"
        )
    if not train_cases or not val_cases:
        raise ConfigError("train and val case sets must be non-empty")
    for case in train_cases:
        if case.mask is None:
            raise NoForeground(f"training case {case.case_id!r} has no mask")

    params, forward = build_unet(model_cfg)
    state = AdamState.init(params)
    val_sorted = sorted(val_cases, key=lambda c: c.case_id)
    window = _fit_window(sampler_cfg.patch_size, model_cfg.pool_stride_product)

    def evaluate() -> float:
        scores = []
        for case in val_sorted:
            prob = _sliding_infer(forward, stack_channels(case, seqs), window, 0.0)
            pred_mask = LabelMask(data=(prob >= 0.5).astype(np.uint8))
            scores.append(jaccard(pred_mask, case.mask))
        return float(np.mean(scores))

    def snapshot(score: float, iteration: int) -> Checkpoint:
        return Checkpoint(
            model=model_cfg,
            params=params.state_arrays(np.float32),
            best_val_jaccard=score,
            iteration_of_best=iteration,
            train_seed=train_cfg.seed,
            loss=train_cfg.loss,
            sequences=seqs,
        )

    best_score = evaluate()
    best = snapshot(best_score, 0)
    history = [(0, best_score)]
    if log:
        log(f"iter 0: val_jaccard={best_score:.4f}")

    n_train = len(train_cases)
    for it in range(1, train_cfg.max_iterations + 1):
        case = train_cases[(it - 1) % n_train]
        rng = np.random.default_rng([train_cfg.seed & 0x7FFFFFFF, sampler_cfg.seed & 0x7FFFFFFF, it])
        batch = sample_patches(case, seqs, train_cfg.batch_size, sampler_cfg, rng=rng)
        loss = None
        for x, y in batch:
            term = tversky_loss(forward(x), y, train_cfg.loss)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(batch))
        params.zero_grad()
        loss.backward()
        adam_step(
            params,
            state,
            lr=train_cfg.learning_rate,
            beta1=train_cfg.beta1,
            beta2=train_cfg.beta2,
            eps=train_cfg.adam_epsilon,
        )
        if it % train_cfg.val_check_interval == 0 or it == train_cfg.max_iterations:
            score = evaluate()
            history.append((it, score))
            if log:
                log(f"iter {it}: loss={loss.item():.4f} val_jaccard={score:.4f}")
            if score > best.best_val_jaccard:
                best = snapshot(score, it)
    return TrainResult(checkpoint=best, iterations_run=train_cfg.max_iterations, val_history=history)
