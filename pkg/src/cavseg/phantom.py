"""Seeded synthetic multi-channel cases with known cavity masks.

Each patient gets a fixed cavity shape: a superellipsoid (exponent in
[1.5, 3]) whose radius is modulated by three low-frequency angular harmonics,
embedded in an ellipsoidal brain support. Longitudinal change is a bounded
uniform rescale of that shape (at most drift/4 per timepoint around the base),
so masks of any two timepoints are nested level sets of one scalar field and
their Jaccard overlap is at least ((1-drift/4)/(1+drift/4))^3 >= 1 - 2*drift.

The default channel models mirror the clinically informative hierarchy: a
stable dark-core/bright-rim contrast-enhanced T1, moderately contrasted T1/T2,
and a FLAIR whose core intensity is rescaled per timepoint across a range that
crosses the tissue background, making it an unreliable training signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, IoFailure
from .volgrid import (
    Case,
    LabelMask,
    ManifestEntry,
    SequenceId,
    Volume3,
    save_manifest,
    save_nifti,
)


@dataclass(frozen=True)
class ChannelModel:
    core_intensity: float
    rim_intensity: float
    background_intensity: float
    noise_sigma: float

    def to_dict(self) -> dict:
        return {
            "core_intensity": self.core_intensity,
            "rim_intensity": self.rim_intensity,
            "background_intensity": self.background_intensity,
            "noise_sigma": self.noise_sigma,
        }


DEFAULT_CHANNEL_MODELS: dict[SequenceId, ChannelModel] = {
    SequenceId.T1: ChannelModel(0.45, 1.0, 1.0, 0.06),
    SequenceId.T1C: ChannelModel(0.15, 2.0, 1.0, 0.05),
    SequenceId.T2: ChannelModel(1.8, 1.0, 1.0, 0.06),
    SequenceId.FLAIR: ChannelModel(1.8, 1.0, 1.0, 0.08),
}


@dataclass(frozen=True)
class PhantomConfig:
    grid: tuple[int, int, int] = (48, 48, 48)
    cavity_radius_range: tuple[float, float] = (5.0, 9.0)
    rim_thickness: float = 1.5
    surface_perturbation: float = 0.08
    drift: float = 0.05
    flair_timepoint_variation: tuple[float, float] = (0.2, 1.2)
    seed: int = 0
    channel_models: dict[SequenceId, ChannelModel] = field(
        default_factory=lambda: dict(DEFAULT_CHANNEL_MODELS)
    )

    def validate(self) -> None:
        if len(self.grid) != 3 or any(int(g) < 8 for g in self.grid):
            raise InvalidConfig(f"grid must be three extents >= 8, got {self.grid}")
        r_min, r_max = self.cavity_radius_range
        if not (0 < r_min <= r_max < min(self.grid) / 2):
            raise InvalidConfig(
                f"need 0 < r_min <= r_max < min(grid)/2, got {self.cavity_radius_range}"
            )
        if r_min < 1.0:
            raise InvalidConfig("r_min below one voxel cannot guarantee a nonempty mask")
        if self.rim_thickness < 0:
            raise InvalidConfig("rim_thickness must be >= 0")
        if not 0.0 <= self.surface_perturbation <= 0.3:
            raise InvalidConfig("surface_perturbation must lie in [0, 0.3]")
        if not 0.0 <= self.drift < 1.0:
            raise InvalidConfig("drift must lie in [0, 1)")
        lo, hi = self.flair_timepoint_variation
        if not (0 < lo <= hi):
            raise InvalidConfig("flair_timepoint_variation must satisfy 0 < lo <= hi")
        missing = [s.value for s in SequenceId if s not in self.channel_models]
        if missing:
            raise InvalidConfig(f"channel models missing for: {missing}")
        for seq, cm in self.channel_models.items():
            if cm.noise_sigma < 0:
                raise InvalidConfig(f"{seq.value}: noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "cavity_radius_range": list(self.cavity_radius_range),
            "rim_thickness": self.rim_thickness,
            "surface_perturbation": self.surface_perturbation,
            "drift": self.drift,
            "flair_timepoint_variation": list(self.flair_timepoint_variation),
            "seed": self.seed,
            "channel_models": {s.value: cm.to_dict() for s, cm in self.channel_models.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        models = dict(DEFAULT_CHANNEL_MODELS)
        for key, cm in d.get("channel_models", {}).items():
            models[SequenceId(key)] = ChannelModel(
                core_intensity=float(cm["core_intensity"]),
                rim_intensity=float(cm["rim_intensity"]),
                background_intensity=float(cm["background_intensity"]),
                noise_sigma=float(cm["noise_sigma"]),
            )
        cfg = cls(
            grid=tuple(int(g) for g in d.get("grid", (48, 48, 48))),
            cavity_radius_range=tuple(float(r) for r in d.get("cavity_radius_range", (5.0, 9.0))),
            rim_thickness=float(d.get("rim_thickness", 1.5)),
            surface_perturbation=float(d.get("surface_perturbation", 0.08)),
            drift=float(d.get("drift", 0.05)),
            flair_timepoint_variation=tuple(
                float(v) for v in d.get("flair_timepoint_variation", (0.2, 1.2))
            ),
            seed=int(d.get("seed", 0)),
            channel_models=models,
        )
        cfg.validate()
        return cfg


class _PatientShape:
    """Per-patient geometry, deterministic in (config.seed, patient_seed)."""

    def __init__(self, config: PhantomConfig, patient_seed: int):
        rng = np.random.default_rng([config.seed & 0x7FFFFFFF, patient_seed & 0x7FFFFFFF, 101])
        grid = np.asarray(config.grid, dtype=np.float64)
        self.brain_center = grid / 2.0
        self.brain_radii = grid * rng.uniform(0.40, 0.47, size=3)
        r_min, r_max = config.cavity_radius_range
        self.radii = rng.uniform(r_min, r_max, size=3)
        self.exponent = rng.uniform(1.5, 3.0)
        amps = rng.uniform(0.2, 1.0, size=3)
        self.harmonic_amps = config.surface_perturbation * amps / amps.sum()
        self.harmonic_freqs = rng.integers(1, 4, size=(3, 2))
        self.harmonic_phases = rng.uniform(0.0, 2 * np.pi, size=(3, 2))
        # keep cavity + rim + max drift inside the brain support
        s_max = 1.0 + config.drift / 4.0
        reach = self.radii.max() * s_max * (1.0 + config.surface_perturbation)
        margin = reach + config.rim_thickness + 2.0
        room = np.maximum(self.brain_radii - margin, 0.0)
        unit = rng.uniform(-1.0, 1.0, size=3)
        norm = np.linalg.norm(unit)
        unit = unit / norm if norm > 0 else np.zeros(3)
        offset = unit * rng.uniform(0.0, 0.9) * room
        self.cavity_center = np.round(self.brain_center + offset)

    def level_field(self, grid: tuple[int, int, int]) -> np.ndarray:
        """Scalar f with the cavity at timepoint scale s being {f <= s}."""
        nx, ny, nz = grid
        x, y, z = np.meshgrid(
            np.arange(nx, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            np.arange(nz, dtype=np.float64),
            indexing="ij",
        )
        u = (x - self.cavity_center[0]) / self.radii[0]
        v = (y - self.cavity_center[1]) / self.radii[1]
        w = (z - self.cavity_center[2]) / self.radii[2]
        e = self.exponent
        rho = (np.abs(u) ** e + np.abs(v) ** e + np.abs(w) ** e) ** (1.0 / e)
        theta = np.arctan2(np.hypot(u, v), w)
        phi = np.arctan2(v, u)
        mod = np.ones_like(rho)
        for i in range(3):
            (lt, lp) = self.harmonic_freqs[i]
            (pt, pp) = self.harmonic_phases[i]
            mod += self.harmonic_amps[i] * np.cos(lt * theta + pt) * np.cos(lp * phi + pp)
        return rho / mod

    def brain_support(self, grid: tuple[int, int, int]) -> np.ndarray:
        nx, ny, nz = grid
        x, y, z = np.meshgrid(
            np.arange(nx, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            np.arange(nz, dtype=np.float64),
            indexing="ij",
        )
        q = (
            ((x - self.brain_center[0]) / self.brain_radii[0]) ** 2
            + ((y - self.brain_center[1]) / self.brain_radii[1]) ** 2
            + ((z - self.brain_center[2]) / self.brain_radii[2]) ** 2
        )
        return q <= 1.0


def _patient_id(patient_seed: int) -> str:
    return f"p{patient_seed:03d}"


def generate_case(config: PhantomConfig, patient_seed: int, timepoint: int) -> Case:
    """One deterministic synthetic acquisition.

    The mask is the patient's cavity shape at this timepoint's scale; channels
    render tissue background, a rim shell of ``rim_thickness`` voxels, and the
    cavity core per channel model, plus per-channel Gaussian noise inside the
    brain support. Voxels outside the support are exactly zero.
    """
    config.validate()
    if timepoint < 0:
        raise InvalidConfig("timepoint must be >= 0")
    shape = _PatientShape(config, patient_seed)
    rng_t = np.random.default_rng(
        [config.seed & 0x7FFFFFFF, patient_seed & 0x7FFFFFFF, timepoint, 211]
    )
    scale = 1.0 + (config.drift / 4.0) * rng_t.uniform(-1.0, 1.0)
    flair_mult = rng_t.uniform(*config.flair_timepoint_variation)

    f = shape.level_field(config.grid)
    brain = shape.brain_support(config.grid)
    mask = (f <= scale) & brain
    r_geo = float(np.prod(shape.radii) ** (1.0 / 3.0))
    rim_scale = scale * (1.0 + config.rim_thickness / r_geo)
    rim = (f <= rim_scale) & ~mask & brain

    channels: dict[SequenceId, Volume3] = {}
    for idx, seq in enumerate(SequenceId.canonical_order()):
        cm = config.channel_models[seq]
        core = cm.core_intensity * (flair_mult if seq is SequenceId.FLAIR else 1.0)
        img = np.zeros(config.grid, dtype=np.float64)
        img[brain] = cm.background_intensity
        img[rim] = cm.rim_intensity
        img[mask] = core
        if cm.noise_sigma > 0:
            rng_c = np.random.default_rng(
                [config.seed & 0x7FFFFFFF, patient_seed & 0x7FFFFFFF, timepoint, 311 + idx]
            )
            img[brain] += cm.noise_sigma * rng_c.standard_normal(int(brain.sum()))
        channels[seq] = Volume3(data=img)

    pid = _patient_id(patient_seed)
    return Case(
        case_id=f"{pid}_t{timepoint}",
        patient_id=pid,
        timepoint=timepoint,
        channels=channels,
        mask=LabelMask(data=mask.astype(np.uint8)),
    )


def generate_longitudinal(config: PhantomConfig, patient_seed: int, n_timepoints: int) -> list[Case]:
    """All timepoints of one patient; masks overlap per the drift bound."""
    if n_timepoints < 1:
        raise InvalidConfig("n_timepoints must be >= 1")
    return [generate_case(config, patient_seed, t) for t in range(n_timepoints)]


def generate_dataset(
    config: PhantomConfig,
    n_patients: int,
    timepoints_per_patient: list[int],
    out_dir: str | Path,
) -> tuple[Path, list[ManifestEntry]]:
    """Write NIfTI channels + masks + a JSON manifest; returns (manifest path, entries).

    File and manifest contents are pure functions of config and the requested
    shape, with paths stored relative to the manifest.
    """
    config.validate()
    if n_patients < 1:
        raise InvalidConfig("n_patients must be >= 1")
    if len(timepoints_per_patient) != n_patients:
        raise InvalidConfig(
            f"timepoints_per_patient has {len(timepoints_per_patient)} entries "
            f"for {n_patients} patients"
        )
    if any(t < 1 for t in timepoints_per_patient):
        raise InvalidConfig("every patient needs at least one timepoint")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc
    entries: list[ManifestEntry] = []
    for patient in range(n_patients):
        for timepoint in range(timepoints_per_patient[patient]):
            case = generate_case(config, patient, timepoint)
            channel_paths = {}
            for seq in SequenceId.canonical_order():
                name = f"{case.case_id}_{seq.value}.nii"
                save_nifti(case.channels[seq], out_dir / name)
                channel_paths[seq] = name
            mask_name = f"{case.case_id}_mask.nii"
            save_nifti(case.mask, out_dir / mask_name)
            entries.append(
                ManifestEntry(
                    case_id=case.case_id,
                    patient_id=case.patient_id,
                    timepoint=case.timepoint,
                    channel_paths=channel_paths,
                    mask_path=mask_name,
                    normalize=True,
                    base_dir=out_dir,
                )
            )
    manifest_path = out_dir / "manifest.json"
    save_manifest(entries, manifest_path)
    return manifest_path, entries
