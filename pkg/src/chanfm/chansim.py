"""Geometry-based stochastic multipath simulator for 3D CSI datasets.

Each sample is a sum of ``P`` plane-wave paths observed on a
time x antenna x subcarrier grid::

    H[t, s, f] = sum_p g_p exp(j 2pi (nu_p t dt - tau_p f df + d s sin(theta_p)))

The path parameters are returned alongside the grid as the sample's scene
record, so the sensing modality is aligned with the CSI by construction.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
FORMAT_VERSION = 1
CSI_MAGIC = b"SOMC"
SCENE_MAGIC = b"SOMS"
SCENE_FIELDS = ("gain_re", "gain_im", "tau_s", "aoa_rad", "doppler_hz")


class ConfigError(ValueError):
    """A configuration field holds an invalid value."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class CorruptDatasetError(IOError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    T: int
    S: int
    F: int
    delta_t: float
    delta_f: float
    carrier_hz: float
    P: int
    tau_max: float
    speed_mps: float
    n_samples: int
    seed: int
    spacing_wl: float = 0.5
    rician_k: float = 0.0
    held_out: bool = False

    def __post_init__(self):
        validate_config(self)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def max_doppler_hz(self) -> float:
        return self.speed_mps / self.wavelength

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.T, self.S, self.F)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        return cls(**d)


def validate_config(cfg: ScenarioConfig) -> None:
    if not isinstance(cfg.id, str) or not cfg.id:
        raise ConfigError("id", "must be a non-empty string")
    for name in ("T", "S", "F", "P", "n_samples"):
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
    for name in ("delta_t", "delta_f", "carrier_hz", "spacing_wl"):
        v = getattr(cfg, name)
        if not _finite(v) or v <= 0:
            raise ConfigError(name, f"must be > 0, got {v!r}")
    for name in ("tau_max", "speed_mps", "rician_k"):
        v = getattr(cfg, name)
        if not _finite(v) or v < 0:
            raise ConfigError(name, f"must be >= 0, got {v!r}")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, (int, np.integer)) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {cfg.seed!r}")


def _finite(v) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) and math.isfinite(v)


@dataclass(frozen=True)
class PathComponent:
    gain_re: float
    gain_im: float
    tau_s: float
    aoa_rad: float
    doppler_hz: float

    @property
    def gain(self) -> complex:
        return complex(self.gain_re, self.gain_im)


@dataclass(frozen=True)
class SceneRecord:
    paths: tuple[PathComponent, ...]

    def as_array(self) -> np.ndarray:
        """(P, 5) array in ``SCENE_FIELDS`` order."""
        return np.array([[getattr(p, f) for f in SCENE_FIELDS] for p in self.paths], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "SceneRecord":
        return cls(tuple(PathComponent(*map(float, row)) for row in np.asarray(arr)))

    @property
    def total_power(self) -> float:
        return float(sum(p.gain_re**2 + p.gain_im**2 for p in self.paths))


@dataclass(frozen=True)
class CsiSample:
    values: np.ndarray  # complex [T, S, F]


def sample_rng(config: ScenarioConfig, sample_index: int) -> np.random.Generator:
    """Independent stream keyed by (seed, id, sample_index)."""
    id_key = int.from_bytes(hashlib.sha256(config.id.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([config.seed, id_key, sample_index]))


def draw_paths(config: ScenarioConfig, rng: np.random.Generator) -> SceneRecord:
    P = config.P
    phi = rng.uniform(0.0, 2.0 * np.pi, P)
    theta = rng.uniform(-np.pi / 2, np.pi / 2, P)
    tau = rng.uniform(0.0, config.tau_max, P)
    g = (rng.standard_normal(P) + 1j * rng.standard_normal(P)) / np.sqrt(2.0)
    doppler = config.max_doppler_hz * np.cos(phi)

    k = config.rician_k
    if k > 0:
        los_power = k / (k + 1.0)
        rest = g[1:]
        rest_power = float(np.sum(np.abs(rest) ** 2))
        g = np.empty(P, dtype=complex)
        if P == 1:
            g[0] = 1.0
        else:
            g[0] = np.sqrt(los_power)
            g[1:] = rest * np.sqrt((1.0 - los_power) / rest_power)
    else:
        g = g / np.sqrt(np.sum(np.abs(g) ** 2))

    return SceneRecord(tuple(
        PathComponent(float(g[p].real), float(g[p].imag), float(tau[p]), float(theta[p]), float(doppler[p]))
        for p in range(P)
    ))


def synthesize(config: ScenarioConfig, scene: SceneRecord) -> np.ndarray:
    """Evaluate the sum-of-paths model on the config grid (complex128)."""
    arr = scene.as_array()
    g = arr[:, 0] + 1j * arr[:, 1]
    tau, theta, nu = arr[:, 2], arr[:, 3], arr[:, 4]
    t = np.arange(config.T) * config.delta_t
    s = np.arange(config.S) * config.spacing_wl
    f = np.arange(config.F) * config.delta_f
    a_t = np.exp(2j * np.pi * np.outer(nu, t))
    a_s = np.exp(2j * np.pi * np.outer(np.sin(theta), s))
    a_f = np.exp(-2j * np.pi * np.outer(tau, f))
    return np.einsum("p,pt,ps,pf->tsf", g, a_t, a_s, a_f)


def generate_sample(config: ScenarioConfig, sample_index: int) -> tuple[CsiSample, SceneRecord]:
    validate_config(config)
    if not 0 <= sample_index < config.n_samples:
        raise ConfigError("sample_index", f"{sample_index} outside [0, {config.n_samples})")
    scene = draw_paths(config, sample_rng(config, sample_index))
    return CsiSample(synthesize(config, scene)), scene


# -- persistence -------------------------------------------------------------

@dataclass
class DatasetManifest:
    config: ScenarioConfig
    n_samples: int
    digests: dict[str, str]
    format_version: int = FORMAT_VERSION

    @property
    def held_out(self) -> bool:
        return self.config.held_out

    @property
    def csi_digest(self) -> str:
        return self.digests["csi.bin"]

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "n_samples": self.n_samples,
            "held_out": self.config.held_out,
            "digests": dict(sorted(self.digests.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            config=ScenarioConfig.from_dict(d["config"]),
            n_samples=int(d["n_samples"]),
            digests=dict(d["digests"]),
            format_version=int(d["format_version"]),
        )


@dataclass
class CsiDataset:
    """A dataset held in memory: complex64 CSI [N, T, S, F] and scenes [N, P, 5]."""

    config: ScenarioConfig
    csi: np.ndarray
    scenes: np.ndarray
    digests: dict[str, str] = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.config.id

    def __len__(self) -> int:
        return self.csi.shape[0]

    def scene(self, i: int) -> SceneRecord:
        return SceneRecord.from_array(self.scenes[i])

    @property
    def csi_digest(self) -> str:
        """SHA-256 of the dataset's ``csi.bin`` form, computed on demand."""
        if "csi.bin" not in self.digests:
            self.digests["csi.bin"] = hashlib.sha256(csi_bytes(self.csi)).hexdigest()
        return self.digests["csi.bin"]

    def subset(self, indices) -> "CsiDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return replace(self, csi=self.csi[idx], scenes=self.scenes[idx], digests={})


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_dataset(config: ScenarioConfig) -> CsiDataset:
    """Generate every sample of ``config`` in memory."""
    validate_config(config)
    csi = np.empty((config.n_samples, config.T, config.S, config.F), dtype=np.complex64)
    scenes = np.empty((config.n_samples, config.P, 5), dtype=np.float32)
    for i in range(config.n_samples):
        sample, scene = generate_sample(config, i)
        csi[i] = sample.values
        scenes[i] = scene.as_array()
    return CsiDataset(config, csi, scenes)


def csi_bytes(csi: np.ndarray) -> bytes:
    """Serialized ``csi.bin`` content for a complex [N, T, S, F] array."""
    n, t, s, f = csi.shape
    inter = np.empty(csi.shape + (2,), dtype="<f4")
    inter[..., 0] = csi.real
    inter[..., 1] = csi.imag
    return CSI_MAGIC + struct.pack("<5I", FORMAT_VERSION, t, s, f, n) + inter.tobytes(order="C")


def write_csi(path: Path, csi: np.ndarray) -> None:
    Path(path).write_bytes(csi_bytes(csi))


def read_csi(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CSI_MAGIC:
        raise CorruptDatasetError(f"{path}: bad magic {raw[:4]!r}")
    version, t, s, f, n = struct.unpack_from("<5I", raw, 4)
    if version != FORMAT_VERSION:
        raise CorruptDatasetError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=24)
    if body.size != n * t * s * f * 2:
        raise CorruptDatasetError(f"{path}: payload holds {body.size} floats, expected {n * t * s * f * 2}")
    body = body.reshape(n, t, s, f, 2)
    return (body[..., 0] + 1j * body[..., 1]).astype(np.complex64)


def write_scenes(path: Path, scenes: np.ndarray) -> None:
    n, p, _ = scenes.shape
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<3I", FORMAT_VERSION, n, p))
        fh.write(np.ascontiguousarray(scenes, dtype="<f4").tobytes())


def read_scenes(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SCENE_MAGIC:
        raise CorruptDatasetError(f"{path}: bad magic {raw[:4]!r}")
    version, n, p = struct.unpack_from("<3I", raw, 4)
    if version != FORMAT_VERSION:
        raise CorruptDatasetError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    if body.size != n * p * 5:
        raise CorruptDatasetError(f"{path}: payload holds {body.size} floats, expected {n * p * 5}")
    return body.reshape(n, p, 5).astype(np.float32)


def generate_dataset(config: ScenarioConfig, out_dir) -> DatasetManifest:
    """Write ``csi.bin``, ``scenes.bin`` and ``manifest.json`` into ``out_dir``."""
    data = build_dataset(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csi(out / "csi.bin", data.csi)
    write_scenes(out / "scenes.bin", data.scenes)
    manifest = DatasetManifest(
        config=config,
        n_samples=config.n_samples,
        digests={name: _sha256(out / name) for name in ("csi.bin", "scenes.bin")},
    )
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path) -> CsiDataset:
    """Read a dataset directory, verifying both payload digests."""
    root = Path(path)
    manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()))
    for name, digest in manifest.digests.items():
        actual = _sha256(root / name)
        if actual != digest:
            raise CorruptDatasetError(f"{root / name}: digest {actual} does not match manifest {digest}")
    csi = read_csi(root / "csi.bin")
    scenes = read_scenes(root / "scenes.bin")
    cfg = manifest.config
    if csi.shape != (cfg.n_samples, cfg.T, cfg.S, cfg.F) or scenes.shape != (cfg.n_samples, cfg.P, 5):
        raise CorruptDatasetError(f"{root}: payload shapes do not match manifest config")
    return CsiDataset(cfg, csi, scenes, dict(manifest.digests))


# -- scenario suites ---------------------------------------------------------

# Physical constants shared by the default suite grid.
SUITE_BASE = dict(
    delta_t=0.5e-3,
    delta_f=30e3,
    carrier_hz=3.5e9,
    spacing_wl=0.5,
    P=8,
    tau_max=0.5e-6,
    rician_k=0.0,
)
HELD_OUT_ID = "S16-F64-T4-v15"


@dataclass
class SuiteEntry:
    id: str
    params: dict
    held_out: bool = False


@dataclass
class SuiteSpec:
    entries: list[SuiteEntry]
    seed: int
    n_samples: int

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        allowed = {"seed", "n_samples", "configs"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for key in ("n_samples", "configs"):
            if key not in d:
                raise ConfigError(key, "missing")
        entries = []
        scenario_fields = {f.name for f in fields(ScenarioConfig)} - {"id", "n_samples", "seed", "held_out"}
        for i, c in enumerate(d["configs"]):
            c = dict(c)
            if "id" not in c:
                raise ConfigError(f"configs[{i}].id", "missing")
            cid = c.pop("id")
            held = bool(c.pop("held_out", False))
            unknown = sorted(set(c) - scenario_fields)
            if unknown:
                raise ConfigError(unknown[0], "unknown field")
            entries.append(SuiteEntry(cid, c, held))
        return cls(entries, int(d.get("seed", 0)), int(d["n_samples"]))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_samples": self.n_samples,
            "configs": [{"id": e.id, "held_out": e.held_out, **e.params} for e in self.entries],
        }


def default_suite_spec(seed: int = 0, n_samples: int = 200, full: bool = False) -> SuiteSpec:
    """Factorial grid over S, F, T and receiver speed.

    ``full`` gives all 16 combinations; otherwise the half fraction where the
    high speed is used iff the number of "large" S/F/T levels is even, which
    keeps every pair of factors balanced. The S=16, F=64, T=4, 15 m/s
    configuration is held out in both variants.
    """
    entries = []
    for (i_s, S), (i_f, F), (i_t, T), (i_v, v) in itertools.product(
        enumerate((4, 16)), enumerate((16, 64)), enumerate((4, 8)), enumerate((0.5, 15.0))
    ):
        if not full and (i_s + i_f + i_t) % 2 != (1 - i_v):
            continue
        cid = f"S{S}-F{F}-T{T}-v{v:g}"
        params = dict(SUITE_BASE, S=S, F=F, T=T, speed_mps=v)
        entries.append(SuiteEntry(cid, params, held_out=cid == HELD_OUT_ID))
    return SuiteSpec(entries, seed, n_samples)


def derive_seed(master_seed: int, config_id: str) -> int:
    h = hashlib.sha256(f"{master_seed}:{config_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def build_suite(suite: SuiteSpec) -> list[ScenarioConfig]:
    if len(suite.entries) < 2:
        raise ConfigError("configs", "a suite needs at least 2 configs")
    if not any(e.held_out for e in suite.entries):
        raise ConfigError("held_out", "a suite needs at least 1 held-out config")
    ids = [e.id for e in suite.entries]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ConfigError("id", f"duplicate config id {dup[0]!r}")
    configs = [
        ScenarioConfig(
            id=e.id,
            n_samples=suite.n_samples,
            seed=derive_seed(suite.seed, e.id),
            held_out=e.held_out,
            **e.params,
        )
        for e in suite.entries
    ]
    if len({c.seed for c in configs}) != len(configs):
        raise ConfigError("seed", "derived seeds collide")
    return configs
